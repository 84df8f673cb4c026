//! Named, seed-initialized parameters with per-prefix freezing.
//!
//! A frozen parameter is handed to the forward pass detached, so backprop
//! never reaches it and its measured gradient is exactly zero.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};

use super::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

#[derive(Clone)]
pub struct Param {
    name: Arc<str>,
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl Param {
    /// Tensor for use in a forward pass; detached when frozen.
    pub fn t(&self) -> Tensor {
        if self.frozen.load(Ordering::Relaxed) {
            self.var.as_tensor().detach()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Relaxed)
    }

    pub fn dims(&self) -> &[usize] {
        self.var.as_tensor().dims()
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.dims())
    }
}

fn under(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

#[derive(Clone)]
pub struct ParamStore {
    params: Arc<Mutex<BTreeMap<String, Param>>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            params: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            dtype,
            device,
        }
    }

    pub fn cpu(seed: u64, dtype: DType) -> Self {
        Self::new(seed, dtype, Device::Cpu)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn builder(&self, prefix: &str) -> ParamBuilder {
        self.root().pp(prefix)
    }

    fn insert(&self, name: String, shape: &[usize], init: Init) -> Result<Param> {
        let mut map = self.params.lock().expect("param store poisoned");
        if map.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        // Each parameter draws from its own stream keyed by name, so values do
        // not depend on construction order.
        let mut r = rng::derive(self.seed, &name);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => rng::uniform_vec(&mut r, n, -b, b),
            Init::Normal(std) => rng::normal_vec(&mut r, n).into_iter().map(|x| x * std).collect(),
        };
        let t = rng::from_f64(data, shape, self.dtype, &self.device)?;
        let p = Param {
            name: name.clone().into(),
            var: Var::from_tensor(&t)?,
            frozen: Arc::new(AtomicBool::new(false)),
        };
        map.insert(name, p.clone());
        Ok(p)
    }

    pub fn all(&self) -> Vec<Param> {
        self.params.lock().expect("param store poisoned").values().cloned().collect()
    }

    pub fn with_prefix(&self, prefix: &str) -> Vec<Param> {
        self.all().into_iter().filter(|p| under(&p.name, prefix)).collect()
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.params.lock().expect("param store poisoned").get(name).cloned()
    }

    pub fn set_frozen(&self, prefix: &str, frozen: bool) {
        for p in self.with_prefix(prefix) {
            p.frozen.store(frozen, Ordering::Relaxed);
        }
    }

    pub fn freeze_all_except(&self, trainable: &[&str]) {
        for p in self.all() {
            let keep = trainable.iter().any(|pre| under(&p.name, pre));
            p.frozen.store(!keep, Ordering::Relaxed);
        }
    }

    pub fn unfreeze_all(&self) {
        self.set_frozen("", false);
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.all()
            .into_iter()
            .filter(|p| !p.is_frozen())
            .map(|p| p.var.clone())
            .collect()
    }

    /// Overwrites every parameter under `prefix` with zeros.
    pub fn zero(&self, prefix: &str) -> Result<()> {
        for p in self.with_prefix(prefix) {
            p.var.set(&p.var.as_tensor().zeros_like()?)?;
        }
        Ok(())
    }

    pub fn num_elements(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).iter().map(|p| p.var.as_tensor().elem_count()).sum()
    }

    /// L2 norm of the gradients recorded for parameters under `prefix`;
    /// parameters absent from the store contribute zero.
    pub fn grad_norm(&self, grads: &GradStore, prefix: &str) -> Result<f64> {
        let mut acc = 0.0;
        for p in self.with_prefix(prefix) {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                acc += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(acc.sqrt())
    }

    /// L2 norm of the gradients recorded for currently frozen parameters.
    pub fn frozen_grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut acc = 0.0;
        for p in self.all().into_iter().filter(|p| p.is_frozen()) {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                acc += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(acc.sqrt())
    }

    pub fn frozen_elements(&self) -> usize {
        self.all().iter().filter(|p| p.is_frozen()).map(|p| p.var.as_tensor().elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .all()
            .into_iter()
            .map(|p| (p.name.to_string(), p.var.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Loads values for every registered parameter; shapes must match.
    /// Entries in the file without a registered parameter are ignored.
    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        for p in self.all() {
            let t = map
                .get(p.name())
                .ok_or_else(|| Error::parse(p.name(), "missing from checkpoint"))?;
            if t.dims() != p.dims() {
                return Err(Error::parse(
                    p.name(),
                    format!("shape {:?} in checkpoint, expected {:?}", t.dims(), p.dims()),
                ));
            }
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: &str) -> ParamBuilder {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Param> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.insert(full, shape, init)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let a = ParamStore::cpu(7, DType::F64);
        let b = ParamStore::cpu(7, DType::F64);
        let pa = a.root().get(&[3], "x", Init::Normal(1.0)).unwrap();
        a.root().get(&[3], "y", Init::Normal(1.0)).unwrap();
        b.root().get(&[3], "y", Init::Normal(1.0)).unwrap();
        let pb = b.root().get(&[3], "x", Init::Normal(1.0)).unwrap();
        let va: Vec<f64> = pa.t().to_vec1().unwrap();
        let vb: Vec<f64> = pb.t().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let s = ParamStore::cpu(0, DType::F64);
        let w = s.builder("enc").get(&[2], "w", Init::Ones).unwrap();
        let v = s.builder("dec").get(&[2], "w", Init::Ones).unwrap();
        s.set_frozen("enc", true);
        let loss = (w.t() * v.t()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(s.grad_norm(&grads, "enc").unwrap(), 0.0);
        assert!(s.grad_norm(&grads, "dec").unwrap() > 0.0);
        assert_eq!(s.trainable_vars().len(), 1);
    }

    #[test]
    fn prefix_matching_respects_segments() {
        assert!(under("enc.w", "enc"));
        assert!(!under("encoder.w", "enc"));
        assert!(under("enc", "enc"));
        assert!(under("anything", ""));
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = ParamStore::cpu(0, DType::F32);
        s.root().get(&[1], "a", Init::Zeros).unwrap();
        assert!(s.root().get(&[1], "a", Init::Zeros).is_err());
    }
}
