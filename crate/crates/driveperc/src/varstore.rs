//! Named parameter storage with deterministic initialization.
//!
//! Every learnable tensor lives in a [`VarStore`] under a hierarchical
//! dot-separated name (`encoder.backbone.stage1.conv.weight`). Initialization
//! draws from a seeded ChaCha stream so that two stores built with the same
//! seed and construction order hold identical values.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Uniform { lo: f64, hi: f64 },
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual conv/linear default.
    FanIn { fan_in: usize },
    Normal { std: f64 },
}

struct Inner {
    vars: IndexMap<String, Var>,
    buffers: HashSet<String>,
    rng: ChaCha8Rng,
}

#[derive(Clone)]
pub struct VarStore {
    inner: Rc<RefCell<Inner>>,
    device: Device,
    dtype: DType,
}

impl VarStore {
    pub fn new(device: Device, dtype: DType, seed: u64) -> Self {
        VarStore {
            inner: Rc::new(RefCell::new(Inner {
                vars: IndexMap::new(),
                buffers: HashSet::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            device,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            path: String::new(),
        }
    }

    /// All variables (parameters and buffers), sorted by name.
    pub fn all_vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.borrow();
        let mut out: Vec<_> = inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Trainable parameters only (buffers such as BN running stats excluded).
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.borrow();
        let mut out: Vec<_> = inner
            .vars
            .iter()
            .filter(|(k, _)| !inner.buffers.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.all_vars().into_iter().map(|(n, _)| n).collect()
    }

    pub fn get_var(&self, name: &str) -> Option<Var> {
        self.inner.borrow().vars.get(name).cloned()
    }

    pub fn set_var(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get_var(name)
            .ok_or_else(|| Error::config(format!("unknown variable `{name}`")))?;
        var.set(value)?;
        Ok(())
    }

    pub fn num_params(&self, prefix: &str) -> usize {
        self.trainable_vars()
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    fn create(&self, name: &str, shape: Shape, init: Init, buffer: bool) -> Result<Var> {
        let mut inner = self.inner.borrow_mut();
        if inner.vars.contains_key(name) {
            return Err(Error::config(format!("duplicate variable `{name}`")));
        }
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, hi } => (0..n).map(|_| inner.rng.gen_range(lo..hi)).collect(),
            Init::FanIn { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| inner.rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal { std } => {
                // Box-Muller on the ChaCha stream.
                (0..n)
                    .map(|_| {
                        let u1: f64 = inner.rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = inner.rng.gen_range(0.0..1.0);
                        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.vars.insert(name.to_string(), var.clone());
        if buffer {
            inner.buffers.insert(name.to_string());
        }
        Ok(var)
    }
}

/// A path-prefixed handle into a [`VarStore`].
#[derive(Clone)]
pub struct Scope {
    store: VarStore,
    path: String,
}

impl Scope {
    pub fn pp(&self, name: &str) -> Scope {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        };
        Scope {
            store: self.store.clone(),
            path,
        }
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    fn full_name(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        }
    }

    /// Create a trainable parameter and return a handle to its tensor.
    pub fn get<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Tensor> {
        let var = self.store.create(&self.full_name(name), shape.into(), init, false)?;
        Ok(var.as_tensor().clone())
    }

    /// Create a non-trainable buffer (e.g. BN running statistics).
    pub fn buffer<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Var> {
        self.store.create(&self.full_name(name), shape.into(), init, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_stores_are_identical() {
        let a = VarStore::new(Device::Cpu, DType::F32, 7);
        let b = VarStore::new(Device::Cpu, DType::F32, 7);
        let ta = a.root().get((3, 4), "w", Init::FanIn { fan_in: 4 }).unwrap();
        let tb = b.root().get((3, 4), "w", Init::FanIn { fan_in: 4 }).unwrap();
        let va: Vec<f32> = ta.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = tb.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn buffers_excluded_from_trainable() {
        let s = VarStore::new(Device::Cpu, DType::F32, 0);
        let root = s.root();
        root.get((2,), "w", Init::Zeros).unwrap();
        root.buffer((2,), "running_mean", Init::Zeros).unwrap();
        assert_eq!(s.all_vars().len(), 2);
        assert_eq!(s.trainable_vars().len(), 1);
        assert_eq!(s.trainable_vars()[0].0, "w");
    }

    #[test]
    fn set_var_writes_through_clones() {
        let s = VarStore::new(Device::Cpu, DType::F32, 0);
        let t = s.root().get((2,), "w", Init::Zeros).unwrap();
        s.set_var("w", &Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap())
            .unwrap();
        let v: Vec<f32> = t.to_vec1().unwrap();
        assert_eq!(v, vec![1.0, 2.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = VarStore::new(Device::Cpu, DType::F32, 0);
        s.root().get((1,), "w", Init::Zeros).unwrap();
        assert!(s.root().get((1,), "w", Init::Zeros).is_err());
    }
}
