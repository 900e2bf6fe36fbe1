//! Per-layer style codes.

use candle_core::Tensor;

use crate::error::{shape_bail, LabError, Result};
use crate::ops;

/// A batch of W+ codes, `(batch, L, d)`: one style vector per generator layer.
#[derive(Debug, Clone)]
pub struct LatentCodeWPlus(Tensor);

impl LatentCodeWPlus {
    pub fn new(codes: Tensor) -> Result<Self> {
        codes.dims3()?;
        Ok(Self(codes))
    }

    /// Checks the row count against a layer count.
    pub fn with_layers(codes: Tensor, layers: usize, dim: usize) -> Result<Self> {
        let (_, l, d) = codes.dims3()?;
        if l != layers || d != dim {
            shape_bail!("W+ code is {l}x{d}, generator expects {layers}x{dim}");
        }
        Ok(Self(codes))
    }

    /// Repeats each `w` row of `(batch, d)` across `layers`.
    pub fn broadcast(w: &Tensor, layers: usize) -> Result<Self> {
        let (b, d) = w.dims2()?;
        Ok(Self(w.unsqueeze(1)?.broadcast_as((b, layers, d))?.contiguous()?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn num_layers(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.0.dims()[2]
    }

    /// Style vectors of the 0-based layer `i`, `(batch, d)`.
    pub fn layer(&self, i: usize) -> Result<Tensor> {
        Ok(self.0.narrow(1, i, 1)?.squeeze(1)?)
    }

    pub fn select(&self, i: usize) -> Result<Self> {
        Ok(Self(self.0.narrow(0, i, 1)?))
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.0.dims() != other.0.dims() {
            shape_bail!("W+ shapes differ: {:?} vs {:?}", self.0.dims(), other.0.dims());
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self((&self.0 + &other.0)?))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self((&self.0 - &other.0)?))
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        Ok(Self((&self.0 * s)?))
    }

    /// `(1 - alpha) * self + alpha * other`; exact at both endpoints.
    pub fn lerp(&self, other: &Self, alpha: f64) -> Result<Self> {
        self.same_shape(other)?;
        if alpha == 0.0 {
            return Ok(self.clone());
        }
        if alpha == 1.0 {
            return Ok(other.clone());
        }
        Ok(Self(((&self.0 * (1.0 - alpha))? + (&other.0 * alpha)?)?))
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if !ops::all_finite(&self.0)? {
            return Err(LabError::Numeric("W+ code has non-finite entries".into()));
        }
        Ok(())
    }
}
