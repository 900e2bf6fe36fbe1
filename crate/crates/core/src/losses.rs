//! Encoder and discriminator objectives.
//!
//! Reductions: image distances are per-sample root-mean-square over all
//! elements, then averaged over the batch. The perceptual distance applies
//! the same reduction per feature level and averages levels uniformly. The
//! latent regulariser is the L2 distance of every W+ row to the average code,
//! averaged over rows and batch.

use candle_core::{Tensor, D};

use crate::config::{LossWeights, PenaltyNorm};
use crate::critic::Critic;
use crate::error::{shape_bail, LabError, Result};
use crate::extractors::{FeatureExtractor, IdentityEmbedder};
use crate::latent::LatentCodeWPlus;
use crate::ops;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        shape_bail!("shapes differ: {:?} vs {:?}", a.dims(), b.dims());
    }
    Ok(())
}

/// Batch mean of per-sample RMS difference.
pub fn rms_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    let batch = a.dims()[0];
    let per_sample = (a - b)?.sqr()?.reshape((batch, ()))?.mean(1)?;
    Ok(ops::safe_sqrt(&per_sample)?.mean(0)?)
}

pub fn pixel_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    rms_distance(x, x_hat)
}

pub fn perceptual_loss(x: &Tensor, x_hat: &Tensor, phi: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape(x, x_hat)?;
    let fx = phi.features(&x.detach())?;
    let fy = phi.features(x_hat)?;
    if fx.is_empty() {
        return Err(LabError::Numeric("feature extractor returned no levels".into()));
    }
    let levels = fx
        .iter()
        .zip(&fy)
        .map(|(a, b)| rms_distance(a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&levels, 0)?.mean(0))?)
}

/// `1 - cos(psi(x), psi(x_hat))`, batch mean.
pub fn identity_loss(x: &Tensor, x_hat: &Tensor, psi: &dyn IdentityEmbedder) -> Result<Tensor> {
    same_shape(x, x_hat)?;
    cosine_distance(&psi.embed(&x.detach())?, &psi.embed(x_hat)?)
}

/// Batch mean of `1 - cos(a_i, b_i)` for embeddings `(batch, k)`.
pub fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    let na = a.sqr()?.sum(D::Minus1)?;
    let nb = b.sqr()?.sum(D::Minus1)?;
    for n in ops::to_f64_vec(&na)?.into_iter().chain(ops::to_f64_vec(&nb)?) {
        if n == 0.0 || !n.is_finite() {
            return Err(LabError::Numeric(
                "identity embedding has zero or non-finite norm; cosine is undefined".into(),
            ));
        }
    }
    let cos = (a * b)?.sum(D::Minus1)?.div(&(na * nb)?.sqrt()?)?;
    Ok((cos.neg()? + 1.0)?.mean(0)?)
}

/// `-E[D(x_hat)]`.
pub fn adversarial_loss_encoder(d: &dyn Critic, x_hat: &Tensor) -> Result<Tensor> {
    Ok(d.score(x_hat)?.mean(0)?.neg()?)
}

/// Mean over rows (and batch) of `||w_l - w_bar||`; `w_bar` is `(d,)` or `(1, d)`.
pub fn regularization_loss(w_plus: &LatentCodeWPlus, w_bar: &Tensor) -> Result<Tensor> {
    let w_bar = w_bar.flatten_all()?;
    if w_bar.dims()[0] != w_plus.dim() {
        shape_bail!("average code has {} entries, W+ rows have {}", w_bar.dims()[0], w_plus.dim());
    }
    let diff = w_plus.tensor().broadcast_sub(&w_bar.reshape((1, 1, ()))?)?;
    let norms = ops::safe_sqrt(&diff.sqr()?.sum(D::Minus1)?)?;
    Ok(norms.mean_all()?)
}

/// Loss terms of one encoder step; absent terms are skipped.
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub pix: Option<Tensor>,
    pub per: Option<Tensor>,
    pub id: Option<Tensor>,
    pub adv: Option<Tensor>,
    pub reg: Option<Tensor>,
}

impl LossParts {
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        [
            ("pix", &self.pix),
            ("per", &self.per),
            ("id", &self.id),
            ("adv", &self.adv),
            ("reg", &self.reg),
        ]
        .into_iter()
        .filter_map(|(n, t)| t.as_ref().map(|t| (n, t)))
        .collect()
    }
}

/// Weighted sum of the present terms. Returns a zero scalar when nothing
/// contributes.
pub fn total_encoder_loss(parts: &LossParts, w: &LossWeights) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (name, t) in parts.named() {
        let weight = match name {
            "pix" => w.pix,
            "per" => w.per,
            "id" => w.id,
            "adv" => w.adv,
            _ => w.reg,
        };
        if weight == 0.0 {
            continue;
        }
        let term = (t * weight)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => {
            let like = parts
                .named()
                .first()
                .map(|(_, t)| (*t).clone())
                .ok_or_else(|| LabError::Numeric("no loss terms were computed".into()))?;
            Ok(like.zeros_like()?)
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorLoss {
    pub total: Tensor,
    /// `E[D(fake)] - E[D(real)]`.
    pub score_gap: Tensor,
    /// `E[||grad_x D(real)||]` (or its square), before the `gamma / 2` factor.
    pub penalty: Tensor,
}

/// `E[D(fake)] - E[D(real)] + gamma/2 * E[||grad_x D(real)||]`. Inputs are
/// used as given; detach them to keep the generator out of the graph.
pub fn discriminator_loss(
    d: &dyn Critic,
    x_real: &Tensor,
    x_fake: &Tensor,
    gamma: f64,
    norm: PenaltyNorm,
) -> Result<DiscriminatorLoss> {
    let fake = d.score(x_fake)?.mean(0)?;
    let (real, penalty) = if gamma > 0.0 {
        let (s, g) = d.score_with_input_grad(x_real)?;
        (s.mean(0)?, gradient_norm(&g, norm)?)
    } else {
        let s = d.score(x_real)?.mean(0)?;
        (s.clone(), s.zeros_like()?)
    };
    let score_gap = (fake - real)?;
    let total = (&score_gap + (&penalty * (gamma / 2.0))?)?;
    Ok(DiscriminatorLoss {
        total,
        score_gap,
        penalty,
    })
}

/// Batch mean of per-sample gradient norms.
pub fn gradient_norm(g: &Tensor, norm: PenaltyNorm) -> Result<Tensor> {
    let batch = g.dims()[0];
    let sq = g.sqr()?.reshape((batch, ()))?.sum(1)?;
    let per = match norm {
        PenaltyNorm::Plain => ops::safe_sqrt(&sq)?,
        PenaltyNorm::Squared => sq,
    };
    Ok(per.mean(0)?)
}

/// Non-saturating logistic generator loss `E[softplus(-D(fake))]`.
pub fn logistic_generator_loss(d: &dyn Critic, x_fake: &Tensor) -> Result<Tensor> {
    Ok(ops::softplus(&d.score(x_fake)?.neg()?)?.mean(0)?)
}

/// `E[softplus(D(fake))] + E[softplus(-D(real))] + r1/2 * E[||grad D(real)||^2]`.
pub fn logistic_discriminator_loss(
    d: &dyn Critic,
    x_real: &Tensor,
    x_fake: &Tensor,
    r1_gamma: f64,
) -> Result<DiscriminatorLoss> {
    let fake_scores = d.score(x_fake)?;
    let (real_scores, penalty) = if r1_gamma > 0.0 {
        let (s, g) = d.score_with_input_grad(x_real)?;
        (s, gradient_norm(&g, PenaltyNorm::Squared)?)
    } else {
        let s = d.score(x_real)?;
        let z = s.mean(0)?.zeros_like()?;
        (s, z)
    };
    let adv = (ops::softplus(&fake_scores)?.mean(0)? + ops::softplus(&real_scores.neg()?)?.mean(0)?)?;
    let score_gap = (fake_scores.mean(0)? - real_scores.mean(0)?)?;
    let total = (adv + (&penalty * (r1_gamma / 2.0))?)?;
    Ok(DiscriminatorLoss {
        total,
        score_gap,
        penalty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{ConstCritic, Discriminator, LinearCritic};
    use crate::extractors::{RandomConvPyramid, RandomEmbedder};
    use crate::gradcheck;
    use candle_core::{DType, Device};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Uniform};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0);
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| u.sample(&mut rng)).collect::<Vec<f64>>(), shape, &Device::Cpu)
            .unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        ops::scalar(t).unwrap()
    }

    #[test]
    fn pixel_closed_forms() {
        let x = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let y = Tensor::ones((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(s(&pixel_loss(&x, &y).unwrap()), 1.0);
        assert_eq!(s(&pixel_loss(&x, &x).unwrap()), 0.0);
        let a = rand(&[2, 3, 8, 8], 1);
        let b = rand(&[2, 3, 8, 8], 2);
        assert_eq!(s(&pixel_loss(&a, &b).unwrap()), s(&pixel_loss(&b, &a).unwrap()));
        assert!(pixel_loss(&a, &x).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let x = rand(&[1, 3, 8, 8], 3);
        let y = rand(&[1, 3, 8, 8], 4);
        let phi = RandomConvPyramid::new(&[4, 4, 8, 8, 8], 5, DType::F64).unwrap();
        let psi = RandomEmbedder::new(6, 6, DType::F64).unwrap();
        let (_, d) = Discriminator::init(8, 4, 4, 7, DType::F64).unwrap();
        let h = 1e-5;
        let pix = gradcheck::check(&y, h, |t| pixel_loss(&x, t)).unwrap();
        let per = gradcheck::check(&y, h, |t| perceptual_loss(&x, t, &phi)).unwrap();
        let id = gradcheck::check(&y, h, |t| identity_loss(&x, t, &psi)).unwrap();
        let adv = gradcheck::check(&y, h, |t| adversarial_loss_encoder(&d, t)).unwrap();
        let disc = gradcheck::check(&y, h, |t| {
            Ok(discriminator_loss(&d, &x, t, 10.0, PenaltyNorm::Plain)?.total)
        })
        .unwrap()
        .max(
            gradcheck::check(&x, h, |t| {
                Ok(discriminator_loss(&d, t, &y, 10.0, PenaltyNorm::Plain)?.total)
            })
            .unwrap(),
        );
        for (name, e) in [("pix", pix), ("per", per), ("id", id), ("adv", adv), ("disc", disc)] {
            assert!(e < 1e-3, "{name}: relative error {e}");
        }
        let w = LatentCodeWPlus::new(rand(&[1, 4, 5], 8)).unwrap();
        let w_bar = rand(&[5], 9);
        let reg = gradcheck::check(w.tensor(), h, |t| {
            regularization_loss(&LatentCodeWPlus::new(t.clone())?, &w_bar)
        })
        .unwrap();
        assert!(reg < 1e-3, "reg: {reg}");
    }

    #[test]
    fn linear_critic_penalty_is_analytic() {
        let a = rand(&[3, 8, 8], 10);
        let norm_a = ops::to_f64_vec(&a).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = LinearCritic { a, b: 0.3 };
        let x = rand(&[2, 3, 8, 8], 11);
        let gamma = 10.0;
        let out = discriminator_loss(&d, &x, &x, gamma, PenaltyNorm::Plain).unwrap();
        assert!((s(&out.penalty) * gamma / 2.0 - gamma / 2.0 * norm_a).abs() < 1e-6);
        assert!(s(&out.score_gap).abs() < 1e-12);
    }

    #[test]
    fn simple_values() {
        let x = rand(&[2, 3, 8, 8], 12);
        assert_eq!(s(&adversarial_loss_encoder(&ConstCritic(0.7), &x).unwrap()), -0.7);
        let zero = discriminator_loss(&ConstCritic(0.0), &x, &x, 10.0, PenaltyNorm::Plain).unwrap();
        assert_eq!(s(&zero.total), 0.0);
        let e = [[1.0f64, 0.0], [0.0, 1.0]];
        let a = Tensor::new(&e, &Device::Cpu).unwrap();
        assert!((s(&cosine_distance(&a, &a).unwrap())).abs() < 1e-15);
        assert!((s(&cosine_distance(&a, &a.neg().unwrap()).unwrap()) - 2.0).abs() < 1e-15);
        let b = Tensor::new(&[[0.0f64, 1.0], [1.0, 0.0]], &Device::Cpu).unwrap();
        assert!((s(&cosine_distance(&a, &b).unwrap()) - 1.0).abs() < 1e-15);
        let z = Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(cosine_distance(&a, &z), Err(LabError::Numeric(_))));
    }

    #[test]
    fn regularization_values() {
        let v = Tensor::new(&[[[3.0f64, 4.0]]], &Device::Cpu).unwrap();
        let zero = Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap();
        let w = LatentCodeWPlus::new(v).unwrap();
        assert_eq!(s(&regularization_loss(&w, &zero).unwrap()), 5.0);
        let bar = Tensor::new(&[1.0f64, -1.0], &Device::Cpu).unwrap();
        let at_bar = LatentCodeWPlus::broadcast(&bar.unsqueeze(0).unwrap(), 3).unwrap();
        assert_eq!(s(&regularization_loss(&at_bar, &bar).unwrap()), 0.0);
        let w = LatentCodeWPlus::new(rand(&[1, 4, 2], 13)).unwrap();
        let r1 = s(&regularization_loss(&w, &bar).unwrap());
        let scaled = LatentCodeWPlus::new(
            ((w.tensor().broadcast_sub(&bar).unwrap() * 2.0).unwrap())
                .broadcast_add(&bar)
                .unwrap(),
        )
        .unwrap();
        let r2 = s(&regularization_loss(&scaled, &bar).unwrap());
        assert!((r2 - 2.0 * r1).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum() {
        let t = |v: f64| Some(Tensor::new(v, &Device::Cpu).unwrap());
        let parts = LossParts {
            pix: t(1.0),
            per: t(2.0),
            id: t(3.0),
            adv: t(4.0),
            reg: t(5.0),
        };
        let w = LossWeights {
            pix: 1.0,
            per: 0.5,
            id: 0.25,
            adv: 2.0,
            reg: 0.1,
            ..LossWeights::default()
        };
        let total = s(&total_encoder_loss(&parts, &w).unwrap());
        assert!((total - (1.0 + 1.0 + 0.75 + 8.0 + 0.5)).abs() < 1e-12);
        let none = LossWeights {
            pix: 0.0,
            per: 0.0,
            id: 0.0,
            adv: 0.0,
            reg: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(s(&total_encoder_loss(&parts, &none).unwrap()), 0.0);
    }
}
