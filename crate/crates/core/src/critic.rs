//! Discriminators that also return their input gradient as a differentiable
//! tensor, so penalties on `||dD/dx||` can be backpropagated into the
//! critic's weights without second-order autodiff.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

use crate::error::{shape_bail, Result};
use crate::nn::{Conv2d, Linear, SpecList};
use crate::ops;
use crate::params::{ParamSpec, ParamStore};

const SLOPE: f64 = 0.2;

pub trait Critic {
    /// One score per sample, shape `(batch,)`.
    fn score(&self, x: &Tensor) -> Result<Tensor>;

    /// Scores and `d(sum of scores)/dx`, the latter built from forward ops so
    /// that functions of it stay differentiable in the critic's parameters.
    fn score_with_input_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;
}

#[derive(Debug, Clone)]
enum Step {
    Conv(Conv2d),
    Lrelu,
    Pool,
    Flatten,
    Dense(Linear),
}

/// Convolutional critic: 1x1 fromRGB, one 3x3 conv plus 2x2 average pool per
/// resolution down to the base, then two dense layers.
#[derive(Debug, Clone)]
pub struct Discriminator {
    resolution: usize,
    steps: Vec<Step>,
}

impl Discriminator {
    pub fn specs(resolution: usize, base: usize, channels: usize) -> Vec<ParamSpec> {
        let mut s = SpecList::new();
        s.conv("disc/from_rgb", 3, channels, 1, true);
        let mut r = resolution;
        while r >= base {
            s.conv(&format!("disc/res{r}/conv"), channels, channels, 3, true);
            if r == base {
                break;
            }
            r /= 2;
        }
        s.linear("disc/fc", channels * base * base, channels, 0.0, 1.0);
        s.linear("disc/out", channels, 1, 0.0, 1.0);
        s.into_vec()
    }

    pub fn init(resolution: usize, base: usize, channels: usize, seed: u64, dtype: DType) -> Result<(ParamStore, Self)> {
        let store = ParamStore::initialize(&Self::specs(resolution, base, channels), seed, dtype)?;
        let d = Self::from_store(&store, resolution, base, true)?;
        Ok((store, d))
    }

    pub fn from_arrays(
        arrays: &BTreeMap<String, Tensor>,
        resolution: usize,
        base: usize,
        channels: usize,
        dtype: DType,
    ) -> Result<ParamStore> {
        ParamStore::from_arrays(&Self::specs(resolution, base, channels), arrays, dtype)
    }

    pub fn from_store(store: &ParamStore, resolution: usize, base: usize, trainable: bool) -> Result<Self> {
        if resolution < base || !(resolution / base).is_power_of_two() {
            shape_bail!("critic resolution {resolution} is not base {base} times a power of two");
        }
        let mut steps = vec![
            Step::Conv(Conv2d::load(store, "disc/from_rgb", trainable, 1, 0)?),
            Step::Lrelu,
        ];
        let mut r = resolution;
        loop {
            steps.push(Step::Conv(Conv2d::load(store, &format!("disc/res{r}/conv"), trainable, 1, 1)?));
            steps.push(Step::Lrelu);
            if r == base {
                break;
            }
            steps.push(Step::Pool);
            r /= 2;
        }
        steps.push(Step::Flatten);
        steps.push(Step::Dense(Linear::load(store, "disc/fc", trainable, 1.0)?));
        steps.push(Step::Lrelu);
        steps.push(Step::Dense(Linear::load(store, "disc/out", trainable, 1.0)?));
        Ok(Self { resolution, steps })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            shape_bail!(
                "critic expects (_, 3, {r}, {r}), got {:?}",
                x.dims(),
                r = self.resolution
            );
        }
        Ok(())
    }

    /// Runs the forward pass, keeping each step's input.
    fn forward_trace(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check(x)?;
        let mut inputs = Vec::with_capacity(self.steps.len());
        let mut h = x.clone();
        for step in &self.steps {
            inputs.push(h.clone());
            h = match step {
                Step::Conv(c) => c.forward(&h)?,
                Step::Lrelu => ops::leaky_relu(&h, SLOPE)?,
                Step::Pool => ops::downsample2x(&h)?,
                Step::Flatten => h.flatten_from(1)?,
                Step::Dense(l) => l.forward(&h)?,
            };
        }
        Ok((h.squeeze(1)?, inputs))
    }
}

impl Critic for Discriminator {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.0)
    }

    fn score_with_input_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (score, inputs) = self.forward_trace(x)?;
        let batch = x.dims()[0];
        let mut g = Tensor::ones((batch, 1), x.dtype(), x.device())?;
        for (step, input) in self.steps.iter().zip(&inputs).rev() {
            g = match step {
                Step::Dense(l) => g.matmul(&l.weight()?)?,
                Step::Flatten => g.reshape(input.shape())?,
                Step::Lrelu => {
                    // slope is piecewise constant; its mask carries no gradient
                    let mask = (input.detach().ge(0.0)?.to_dtype(g.dtype())? * (1.0 - SLOPE))? + SLOPE;
                    (g * mask?)?
                }
                Step::Pool => (ops::upsample2x(&g)? * 0.25)?,
                Step::Conv(c) => ops::conv2d_input_grad(&g, &c.weight()?, c.padding)?,
            };
        }
        Ok((score, g))
    }
}

/// `D(x) = <a, x> + b` per sample, used to check penalties analytically.
#[derive(Debug, Clone)]
pub struct LinearCritic {
    pub a: Tensor,
    pub b: f64,
}

impl Critic for LinearCritic {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        let batch = x.dims()[0];
        let a = self.a.unsqueeze(0)?.broadcast_as(x.shape())?;
        Ok(((x * a)?.reshape((batch, ()))?.sum(1)? + self.b)?)
    }

    fn score_with_input_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = self.a.unsqueeze(0)?.broadcast_as(x.shape())?.contiguous()?;
        Ok((self.score(x)?, g))
    }
}

/// Critic returning the same score for every sample.
#[derive(Debug, Clone)]
pub struct ConstCritic(pub f64);

impl Critic for ConstCritic {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x.flatten_from(1)?.sum(1)?.zeros_like()? + self.0)?)
    }

    fn score_with_input_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.score(x)?, x.zeros_like()?))
    }
}
