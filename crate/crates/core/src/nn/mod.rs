//! Small neural-network toolkit on top of candle: a seeded parameter store,
//! the convolution used everywhere in the model, and the optimizer.

mod conv;
mod optim;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::BatchNorm;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use conv::{conv2d, Conv2d, ConvSpec};
pub use optim::{Adam, AdamConfig};

use crate::error::{FtwaError, Result};

/// Negative slope shared by every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.05;

pub fn leaky_relu(xs: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(xs, LEAKY_SLOPE)?)
}

pub fn sigmoid(xs: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(xs)?)
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    trainable: bool,
}

#[derive(Debug)]
struct StoreInner {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
}

/// Named collection of model tensors.
///
/// Initialization draws from a ChaCha stream seeded at construction, so a
/// model built twice from the same seed is bit-identical. Names are
/// dot-separated namespaces (`e_h.stem.weight`, `raft.head.bias`, ...).
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                entries: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device,
        }
    }

    fn lock(&self) -> MutexGuard<'_, StoreInner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn root(&self) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Every tensor, trainable or not, in name order.
    pub fn all(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().entries.get(name).map(|e| e.var.clone())
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().entries.keys().cloned().collect()
    }

    pub fn has_namespace(&self, ns: &str) -> bool {
        let prefix = format!("{ns}.");
        self.lock().entries.keys().any(|k| k.starts_with(&prefix))
    }

    /// Trainable scalar count, optionally restricted to one namespace.
    pub fn param_count(&self, namespace: Option<&str>) -> usize {
        let prefix = namespace.map(|ns| format!("{ns}."));
        self.lock()
            .entries
            .iter()
            .filter(|(k, e)| {
                e.trainable && prefix.as_ref().is_none_or(|p| k.starts_with(p.as_str()))
            })
            .map(|(_, e)| e.var.elem_count())
            .sum()
    }

    /// Copies values from `tensors` into the existing variables. Every
    /// stored name must be present with a matching shape.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        for (name, entry) in &inner.entries {
            let src = tensors
                .get(name)
                .ok_or_else(|| FtwaError::Checkpoint(format!("missing tensor {name}")))?;
            if src.dims() != entry.var.dims() {
                return Err(FtwaError::Checkpoint(format!(
                    "tensor {name}: stored shape {:?}, model expects {:?}",
                    src.dims(),
                    entry.var.dims()
                )));
            }
            entry
                .var
                .set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !inner.entries.contains_key(*k)) {
            return Err(FtwaError::Checkpoint(format!(
                "unexpected tensor {extra} not present in the model"
            )));
        }
        Ok(())
    }

    fn insert(&self, name: String, tensor: Tensor, trainable: bool) -> Result<Tensor> {
        let mut inner = self.lock();
        if inner.entries.contains_key(&name) {
            return Err(FtwaError::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        inner.entries.insert(name, Entry { var, trainable });
        Ok(t)
    }
}

/// Namespaced view into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn randn(&self, name: &str, shape: impl Into<Shape>, std: f64) -> Result<Tensor> {
        let shape = shape.into();
        let values: Vec<f64> = {
            let mut inner = self.store.lock();
            (0..shape.elem_count())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut inner.rng);
                    z * std
                })
                .collect()
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        self.store.insert(self.path(name), t, true)
    }

    pub fn constant(&self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Tensor> {
        let t = self.filled(shape, value)?;
        self.store.insert(self.path(name), t, true)
    }

    /// Non-trainable state (normalization running statistics).
    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Tensor> {
        let t = self.filled(shape, value)?;
        self.store.insert(self.path(name), t, false)
    }

    fn filled(&self, shape: impl Into<Shape>, value: f64) -> Result<Tensor> {
        let t = Tensor::ones(shape, self.store.dtype, &self.store.device)?;
        Ok(t.affine(value, 0.0)?)
    }
}

/// Batch normalization with affine scale initialized to `gamma`.
pub fn batch_norm(channels: usize, gamma: f64, pb: &ParamBuilder) -> Result<BatchNorm> {
    let running_mean = pb.buffer("running_mean", channels, 0.0)?;
    let running_var = pb.buffer("running_var", channels, 1.0)?;
    let weight = pb.constant("weight", channels, gamma)?;
    let bias = pb.constant("bias", channels, 0.0)?;
    Ok(BatchNorm::new_with_momentum(
        channels,
        running_mean,
        running_var,
        weight,
        bias,
        1e-5,
        0.1,
    )?)
}

/// Dense layer with normal init of the given std and zero bias.
pub fn linear(
    in_dim: usize,
    out_dim: usize,
    std: f64,
    pb: &ParamBuilder,
) -> Result<candle_nn::Linear> {
    let weight = pb.randn("weight", (out_dim, in_dim), std)?;
    let bias = pb.constant("bias", out_dim, 0.0)?;
    Ok(candle_nn::Linear::new(weight, Some(bias)))
}
