//! Dense and convolutional layers with runtime weight scaling (weights are
//! stored at unit variance and multiplied by `gain / sqrt(fan_in)` on use).

use candle_core::{Tensor, D};

use crate::error::{shape_bail, Result};
use crate::ops;
use crate::params::{Init, ParamSpec, ParamStore};

/// Collects parameter declarations under a path prefix.
#[derive(Debug, Default, Clone)]
pub struct SpecList {
    specs: Vec<ParamSpec>,
}

impl SpecList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, spec: ParamSpec) {
        self.specs.push(spec);
    }

    pub fn extend(&mut self, other: SpecList) {
        self.specs.extend(other.specs);
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize, bias_init: f64, lr_mul: f64) {
        self.push(ParamSpec::new(
            format!("{name}/weight"),
            &[out, inp],
            Init::Normal(1.0 / lr_mul),
        ));
        self.push(ParamSpec::new(
            format!("{name}/bias"),
            &[out],
            Init::Const(bias_init / lr_mul),
        ));
    }

    pub fn conv(&mut self, name: &str, inp: usize, out: usize, kernel: usize, bias: bool) {
        self.push(ParamSpec::new(
            format!("{name}/weight"),
            &[out, inp, kernel, kernel],
            Init::Normal(1.0),
        ));
        if bias {
            self.push(ParamSpec::new(format!("{name}/bias"), &[out], Init::Zeros));
        }
    }

    /// 1x1 convolution whose weights and bias start at zero.
    pub fn zero_conv(&mut self, name: &str, inp: usize, out: usize) {
        self.push(ParamSpec::new(
            format!("{name}/weight"),
            &[out, inp, 1, 1],
            Init::Zeros,
        ));
        self.push(ParamSpec::new(format!("{name}/bias"), &[out], Init::Zeros));
    }

    pub fn into_vec(self) -> Vec<ParamSpec> {
        self.specs
    }

    pub fn as_slice(&self) -> &[ParamSpec] {
        &self.specs
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
    weight_gain: f64,
    lr_mul: f64,
}

impl Linear {
    pub fn load(store: &ParamStore, name: &str, trainable: bool, lr_mul: f64) -> Result<Self> {
        let weight = store.get(&format!("{name}/weight"), trainable)?;
        let bias = store.get(&format!("{name}/bias"), trainable)?;
        let (_, inp) = weight.dims2()?;
        Ok(Self {
            weight,
            bias,
            weight_gain: lr_mul / (inp as f64).sqrt(),
            lr_mul,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Effective `(out, in)` weight matrix.
    pub fn weight(&self) -> Result<Tensor> {
        Ok((&self.weight * self.weight_gain)?)
    }

    /// `x: (batch, in)` -> `(batch, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, inp) = x.dims2()?;
        if inp != self.weight.dims()[1] {
            shape_bail!("linear layer expects {} inputs, got {inp}", self.weight.dims()[1]);
        }
        let y = x.matmul(&self.weight()?.t()?)?;
        Ok(y.broadcast_add(&(&self.bias * self.lr_mul)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    weight_gain: f64,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn load(
        store: &ParamStore,
        name: &str,
        trainable: bool,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight = store.get(&format!("{name}/weight"), trainable)?;
        let bias_name = format!("{name}/bias");
        let bias = if store.names().any(|n| *n == bias_name) {
            Some(store.get(&bias_name, trainable)?)
        } else {
            None
        };
        let (_, inp, kh, kw) = weight.dims4()?;
        Ok(Self {
            weight,
            bias,
            weight_gain: 1.0 / ((inp * kh * kw) as f64).sqrt(),
            stride,
            padding,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Effective kernel after scaling.
    pub fn weight(&self) -> Result<Tensor> {
        Ok((&self.weight * self.weight_gain)?)
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_padding(x, self.padding)
    }

    pub fn forward_with_padding(&self, x: &Tensor, padding: usize) -> Result<Tensor> {
        ops::conv2d(x, &self.weight()?, self.bias.as_ref(), self.stride, padding)
    }
}

/// Channel attention: global average -> bottleneck -> sigmoid gate.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    reduce: Linear,
    expand: Linear,
}

impl SqueezeExcite {
    pub fn specs(specs: &mut SpecList, name: &str, channels: usize, reduction: usize) {
        let hidden = (channels / reduction).max(1);
        specs.linear(&format!("{name}/reduce"), channels, hidden, 0.0, 1.0);
        specs.linear(&format!("{name}/expand"), hidden, channels, 0.0, 1.0);
    }

    pub fn load(store: &ParamStore, name: &str, trainable: bool) -> Result<Self> {
        Ok(Self {
            reduce: Linear::load(store, &format!("{name}/reduce"), trainable, 1.0)?,
            expand: Linear::load(store, &format!("{name}/expand"), trainable, 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let pooled = x.reshape((n, c, h * w))?.mean(D::Minus1)?;
        let gate = self.reduce.forward(&pooled)?.relu()?;
        let gate = ops::sigmoid(&self.expand.forward(&gate)?)?;
        Ok(x.broadcast_mul(&gate.reshape((n, c, 1, 1))?)?)
    }
}
