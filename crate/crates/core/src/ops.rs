//! Differentiable tensor helpers shared by the generator, encoder and critic.
//!
//! The convolution here is a custom op: forward runs the regular candle
//! convolution, backward is expressed through stride-1 convolutions with a
//! flipped kernel. That avoids the slow transposed-convolution path on CPU
//! and keeps the gradient itself differentiable (needed by the gradient
//! penalty, which backpropagates through an input gradient).

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, D};

use crate::error::{shape_bail, Result};

struct Conv2dOp {
    stride: usize,
    padding: usize,
}

fn storage_to_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv2d op expects contiguous inputs".into()))?;
    let dims = l.shape().dims().to_vec();
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], dims, &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], dims, &Device::Cpu),
        _ => Err(candle_core::Error::Msg(
            "conv2d op supports f32 and f64 only".into(),
        )),
    }
}

fn tensor_to_storage(t: &Tensor) -> candle_core::Result<CpuStorage> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => Ok(CpuStorage::F32(flat.to_vec1::<f32>()?)),
        DType::F64 => Ok(CpuStorage::F64(flat.to_vec1::<f64>()?)),
        dt => Err(candle_core::Error::Msg(format!(
            "conv2d op does not support {dt:?}"
        ))),
    }
}

/// Reverses both spatial axes of a kernel and swaps its in/out channel axes.
fn flip_transpose_kernel(w: &Tensor) -> candle_core::Result<Tensor> {
    let (_, _, kh, kw) = w.dims4()?;
    let rev = |k: usize| Tensor::from_vec((0..k as u32).rev().collect::<Vec<_>>(), k, w.device());
    w.index_select(&rev(kh)?, 2)?
        .index_select(&rev(kw)?, 3)?
        .transpose(0, 1)?
        .contiguous()
}

/// Inserts `stride - 1` zeros after every row and column.
fn dilate(g: &Tensor, stride: usize) -> candle_core::Result<Tensor> {
    if stride == 1 {
        return Ok(g.clone());
    }
    let (n, c, h, w) = g.dims4()?;
    let g = g.reshape((n, c, h, 1, w, 1))?;
    let z = Tensor::zeros((n, c, h, stride - 1, w, 1), g.dtype(), g.device())?;
    let g = Tensor::cat(&[&g, &z], 3)?;
    let z = Tensor::zeros((n, c, h, stride, w, stride - 1), g.dtype(), g.device())?;
    Tensor::cat(&[&g, &z], 5)?.reshape((n, c, h * stride, w * stride))
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "padlab-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = storage_to_tensor(s1, l1)?;
        let w = storage_to_tensor(s2, l2)?;
        let y = x.conv2d(&w, self.padding, self.stride, 1, 1)?;
        Ok((tensor_to_storage(&y)?, y.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, wd) = x.dims4()?;
        let (_, _, kh, kw) = w.dims4()?;
        let grad_x = if x.track_op() {
            let g = dilate(grad, self.stride)?;
            let (_, _, gh, gw) = g.dims4()?;
            // Full correlation needs k-1-p on each side; any shortfall of the
            // dilated grid against the input is padded at the far edge.
            let lead = kh - 1 - self.padding;
            let extra_h = (h + kh - 1).saturating_sub(gh + 2 * lead);
            let extra_w = (wd + kw - 1).saturating_sub(gw + 2 * lead);
            let g = g
                .pad_with_zeros(2, lead, lead + extra_h)?
                .pad_with_zeros(3, lead, lead + extra_w)?;
            let gx = conv2d_raw(&g, &flip_transpose_kernel(w)?, 1, 0)?;
            let gx = gx.narrow(2, 0, h)?.narrow(3, 0, wd)?;
            Some(gx)
        } else {
            None
        };
        let grad_w = if w.track_op() {
            let xt = x.transpose(0, 1)?.contiguous()?;
            let gt = grad.transpose(0, 1)?.contiguous()?;
            let gw = if self.stride == 1 {
                conv2d_raw(&xt, &gt, 1, self.padding)?
            } else {
                xt.conv2d(&gt, self.padding, 1, self.stride, 1)?
            };
            Some(gw.transpose(0, 1)?.narrow(2, 0, kh)?.narrow(3, 0, kw)?)
        } else {
            None
        };
        Ok((grad_x, grad_w))
    }
}

fn conv2d_raw(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op2(&w.contiguous()?, Conv2dOp { stride, padding })
}

/// 2-d convolution, `x: (n, c_in, h, w)`, `weight: (c_out, c_in, k, k)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (_, c_in, _, _) = x.dims4()?;
    let (_, wc_in, _, _) = weight.dims4()?;
    if c_in != wc_in {
        shape_bail!("conv2d input has {c_in} channels, kernel expects {wc_in}");
    }
    let y = x
        .contiguous()?
        .apply_op2(&weight.contiguous()?, Conv2dOp { stride, padding })?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
        None => Ok(y),
    }
}

/// Input gradient of a stride-1 convolution, expressed as a forward
/// convolution so it can itself be differentiated.
pub fn conv2d_input_grad(grad_out: &Tensor, weight: &Tensor, padding: usize) -> Result<Tensor> {
    let (_, _, k, _) = weight.dims4()?;
    if padding > k - 1 {
        shape_bail!("padding {padding} too large for a {k}x{k} kernel");
    }
    conv2d(grad_out, &flip_transpose_kernel(weight)?, None, 1, k - 1 - padding)
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(((x.relu()? * (1.0 - slope))? + (x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Nearest-neighbour x2 upsampling built from broadcasts so that the
/// backward pass accumulates correctly.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// 2x2 average pooling with stride 2.
pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        shape_bail!("cannot halve odd spatial size {h}x{w}");
    }
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?
        .mean(5)?
        .mean(3)?)
}

/// Interpolation matrix for half-pixel-centred bilinear resampling along one
/// axis, shape `(out, inp)`.
pub fn bilinear_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f64;
        m[o * inp + lo] += 1.0 - frac;
        m[o * inp + hi] += frac;
    }
    m
}

/// Bilinear resize of `(n, c, h, w)` to `(n, c, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let mh = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let mw = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let rows = mh.broadcast_as((n, c, out_h, h))?.contiguous()?;
    let cols = mw.broadcast_as((n, c, w, out_w))?.contiguous()?;
    Ok(rows.matmul(&x.contiguous()?)?.matmul(&cols)?)
}

/// Per-sample, per-channel normalisation over the spatial axes.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centred = flat.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centred.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.reshape((n, c, h, w))?)
}

/// `sqrt(v)` that is exactly zero at zero yet keeps a finite gradient there:
/// `v / sqrt(max(v, floor))`. Equal to `sqrt(v)` whenever `v >= floor`.
pub fn safe_sqrt(v: &Tensor) -> Result<Tensor> {
    const FLOOR: f64 = 1e-24;
    let denom = v.maximum(FLOOR)?.sqrt()?;
    Ok((v / denom)?)
}

/// Scalar value of a zero- or one-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(to_f64_vec(t)?.iter().all(|v| v.is_finite()))
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?;
    Ok(to_f64_vec(&diff)?
        .into_iter()
        .fold(0.0, |m, v| m.max(v.abs())))
}

#[cfg(test)]
mod tests {
    use candle_core::Var;

    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn half_sq_sum(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> f64 {
        let y = x.conv2d(w, padding, stride, 1, 1).unwrap();
        scalar(&(y.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap()).unwrap()
    }

    fn fd_grad(t: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let base = to_f64_vec(t).unwrap();
        let h = 1e-6;
        (0..base.len())
            .map(|i| {
                let mut v = base.clone();
                v[i] += h;
                let p = f(&Tensor::from_vec(v.clone(), t.shape(), &Device::Cpu).unwrap());
                v[i] -= 2.0 * h;
                let m = f(&Tensor::from_vec(v, t.shape(), &Device::Cpu).unwrap());
                (p - m) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for &(k, stride, padding, side) in &[
            (3, 1, 1, 6),
            (3, 1, 0, 6),
            (1, 1, 0, 5),
            (3, 2, 1, 8),
            (3, 2, 1, 4),
            (4, 1, 0, 7),
        ] {
            let x = randn(&[2, 3, side, side], 1);
            let w = randn(&[4, 3, k, k], 2);
            let xv = Var::from_tensor(&x).unwrap();
            let wv = Var::from_tensor(&w).unwrap();
            let y = conv2d(xv.as_tensor(), wv.as_tensor(), None, stride, padding).unwrap();
            let loss = (y.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
            let g = loss.backward().unwrap();
            let gx = to_f64_vec(g.get(xv.as_tensor()).unwrap()).unwrap();
            let gw = to_f64_vec(g.get(wv.as_tensor()).unwrap()).unwrap();
            let fx = fd_grad(&x, |x| half_sq_sum(x, &w, stride, padding));
            let fw = fd_grad(&w, |w| half_sq_sum(&x, w, stride, padding));
            assert!(rel_err(&gx, &fx) < 1e-6, "input grad k={k} s={stride} p={padding}");
            assert!(rel_err(&gw, &fw) < 1e-6, "kernel grad k={k} s={stride} p={padding}");
        }
    }

    #[test]
    fn explicit_input_grad_matches_backprop() {
        for &(k, padding) in &[(3, 1), (1, 0), (3, 0)] {
            let x = randn(&[2, 3, 6, 6], 5);
            let w = randn(&[4, 3, k, k], 6);
            let xv = Var::from_tensor(&x).unwrap();
            let y = conv2d(xv.as_tensor(), &w, None, 1, padding).unwrap();
            let r = randn(y.dims(), 7);
            let g = (&y * &r).unwrap().sum_all().unwrap().backward().unwrap();
            let auto = g.get(xv.as_tensor()).unwrap();
            let explicit = conv2d_input_grad(&r, &w, padding).unwrap();
            assert!(max_abs_diff(auto, &explicit).unwrap() < 1e-12, "k={k} p={padding}");
        }
    }

    #[test]
    fn softplus_values() {
        let x = Tensor::new(&[-50.0f64, 0.0, 3.0, 60.0], &Device::Cpu).unwrap();
        let v = to_f64_vec(&softplus(&x).unwrap()).unwrap();
        let expect = [(-50f64).exp().ln_1p(), 2f64.ln(), 3f64.exp().ln_1p(), 60.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_forward_matches_builtin_bitwise() {
        let x = randn(&[2, 3, 8, 8], 3).to_dtype(DType::F32).unwrap();
        let w = randn(&[5, 3, 3, 3], 4).to_dtype(DType::F32).unwrap();
        let a = x.conv2d(&w, 1, 1, 1, 1).unwrap();
        let b = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (i, o) in [(32, 34), (16, 34), (64, 16), (4, 4)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let x = Tensor::full(0.7f64, (1, 2, 5, 5), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 9, 9).unwrap();
        let v = to_f64_vec(&y).unwrap();
        assert!(v.iter().all(|a| (a - 0.7).abs() < 1e-12));
    }

    #[test]
    fn up_and_down_sampling_invert() {
        let x = randn(&[1, 2, 3, 3], 9);
        let y = downsample2x(&upsample2x(&x).unwrap()).unwrap();
        assert!(max_abs_diff(&x, &y).unwrap() < 1e-12);
    }

    #[test]
    fn safe_sqrt_is_exact_at_zero_and_one() {
        let v = Tensor::new(&[0.0f64, 1.0, 4.0], &Device::Cpu).unwrap();
        let r = to_f64_vec(&safe_sqrt(&v).unwrap()).unwrap();
        assert_eq!(r, vec![0.0, 1.0, 2.0]);
    }
}
