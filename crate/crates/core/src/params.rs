//! Named parameter storage with seeded initialisation.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Const(f64),
    /// Explicit values, row-major.
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Seed for a named parameter: independent of declaration order, so adding a
/// module never perturbs the initial values of the others.
fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn initialize(specs: &[ParamSpec], seed: u64, dtype: DType) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let n = spec.numel();
            let values: Vec<f64> = match &spec.init {
                Init::Normal(std) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &spec.name));
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * std
                        })
                        .collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Const(c) => vec![*c; n],
                Init::Values(v) => {
                    if v.len() != n {
                        return Err(LabError::Shape(format!(
                            "{}: {} explicit values for shape {:?}",
                            spec.name,
                            v.len(),
                            spec.shape
                        )));
                    }
                    v.clone()
                }
            };
            let t = Tensor::from_vec(values, spec.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
            store.insert(&spec.name, t)?;
        }
        Ok(store)
    }

    /// Builds a store from loaded arrays, checking them against the specs.
    pub fn from_arrays(
        specs: &[ParamSpec],
        arrays: &BTreeMap<String, Tensor>,
        dtype: DType,
    ) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let t = arrays.get(&spec.name).ok_or_else(|| {
                LabError::Checkpoint(format!("missing array {}", spec.name))
            })?;
            if t.dims() != spec.shape.as_slice() {
                return Err(LabError::Checkpoint(format!(
                    "array {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.dims(),
                    spec.shape
                )));
            }
            store.insert(&spec.name, t.to_dtype(dtype)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| LabError::Checkpoint(format!("unknown parameter {name}")))
    }

    /// Tensor view that participates in autograd.
    pub fn tracked(&self, name: &str) -> Result<Tensor> {
        Ok(self.var(name)?.as_tensor().clone())
    }

    /// Tensor view excluded from autograd; shares storage with the variable.
    pub fn frozen(&self, name: &str) -> Result<Tensor> {
        Ok(self.var(name)?.as_tensor().detach())
    }

    pub fn get(&self, name: &str, trainable: bool) -> Result<Tensor> {
        if trainable {
            self.tracked(name)
        } else {
            self.frozen(name)
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_arrays(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Hex SHA-256 over names and the little-endian bytes of every value.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            let t = var.as_tensor();
            match t.dtype() {
                DType::F64 => {
                    for v in t.flatten_all()?.to_vec1::<f64>()? {
                        h.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_order_free() {
        let a = vec![
            ParamSpec::new("x", &[3, 2], Init::Normal(1.0)),
            ParamSpec::new("y", &[4], Init::Normal(0.5)),
        ];
        let b = vec![a[1].clone(), a[0].clone()];
        let sa = ParamStore::initialize(&a, 11, DType::F32).unwrap();
        let sb = ParamStore::initialize(&b, 11, DType::F32).unwrap();
        assert_eq!(sa.checksum().unwrap(), sb.checksum().unwrap());
        let sc = ParamStore::initialize(&a, 12, DType::F32).unwrap();
        assert_ne!(sa.checksum().unwrap(), sc.checksum().unwrap());
    }

    #[test]
    fn frozen_view_tracks_updates() {
        let specs = vec![ParamSpec::new("w", &[2], Init::Zeros)];
        let store = ParamStore::initialize(&specs, 0, DType::F32).unwrap();
        let frozen = store.frozen("w").unwrap();
        store
            .var("w")
            .unwrap()
            .set(&Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(frozen.to_vec1::<f32>().unwrap(), vec![1.0, 2.0]);
        assert!(!frozen.track_op());
    }

    #[test]
    fn from_arrays_rejects_shape_mismatch() {
        let specs = vec![ParamSpec::new("w", &[2, 2], Init::Zeros)];
        let mut arrays = BTreeMap::new();
        arrays.insert("w".to_string(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        assert!(ParamStore::from_arrays(&specs, &arrays, DType::F32).is_err());
    }
}
