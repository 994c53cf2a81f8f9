//! Named, seeded parameter storage.
//!
//! Every parameter is keyed by its dotted path (`decoder.layer3.attn.wq`)
//! and initialized from an RNG seeded by the store seed and that path, so a
//! parameter's initial value does not depend on which other parameters exist.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct ParamInner {
    name: String,
    shape: Vec<usize>,
    value: RwLock<Tensor>,
    trainable: AtomicBool,
}

/// Shared handle to a trainable tensor.
#[derive(Clone)]
pub struct Param(Arc<ParamInner>);

impl Param {
    fn new(name: String, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let t = Tensor::raw(data, shape.clone()).into_leaf();
        Param(Arc::new(ParamInner {
            name,
            shape,
            value: RwLock::new(t),
            trainable: AtomicBool::new(true),
        }))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// Current value; a tracked leaf when the parameter is trainable.
    pub fn tensor(&self) -> Tensor {
        self.0.value.read().unwrap().clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tensor().to_vec()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor().grad()
    }

    pub fn zero_grad(&self) {
        self.tensor().zero_grad();
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.0.trainable.store(trainable, Ordering::Relaxed);
        let data = self.to_vec();
        self.replace(data);
    }

    /// Replaces the value with a fresh leaf (dropping any gradient).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape("set_data", &self.0.shape, &[data.len()]));
        }
        self.replace(data);
        Ok(())
    }

    fn replace(&self, data: Vec<f64>) {
        let t = Tensor::raw(data, self.0.shape.clone());
        let t = if self.trainable() { t.into_leaf() } else { t };
        *self.0.value.write().unwrap() = t;
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name(), self.shape())
    }
}

/// 64-bit FNV-1a, used to derive per-parameter RNG streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn seeded_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(stream.as_bytes()))
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform on `[-b, b]`.
    Uniform(f64),
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

struct StoreInner {
    seed: u64,
    params: BTreeMap<String, Param>,
}

#[derive(Clone)]
pub struct VarStore(Arc<Mutex<StoreInner>>);

impl std::fmt::Debug for VarStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.lock().unwrap();
        f.debug_struct("VarStore")
            .field("seed", &inner.seed)
            .field("params", &inner.params.len())
            .finish()
    }
}

impl VarStore {
    pub fn new(seed: u64) -> Self {
        VarStore(Arc::new(Mutex::new(StoreInner {
            seed,
            params: BTreeMap::new(),
        })))
    }

    pub fn root(&self) -> VarBuilder {
        VarBuilder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.0.lock().unwrap().seed
    }

    /// All parameters in key order.
    pub fn params(&self) -> Vec<Param> {
        self.0.lock().unwrap().params.values().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.0.lock().unwrap().params.get(name).cloned()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(Param::numel).sum()
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Copies values out of a `key → (shape, data)` map. Every stored
    /// parameter must be present with a matching shape.
    pub fn load_map(&self, map: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        for p in self.params() {
            let (shape, data) = map
                .get(p.name())
                .ok_or_else(|| Error::Load(format!("checkpoint is missing `{}`", p.name())))?;
            if shape.as_slice() != p.shape() {
                return Err(Error::Load(format!(
                    "`{}` has shape {:?} in checkpoint, model expects {:?}",
                    p.name(),
                    shape,
                    p.shape()
                )));
            }
            p.set_data(data.clone())?;
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        self.params()
            .into_iter()
            .map(|p| (p.name().to_string(), (p.shape().to_vec(), p.to_vec())))
            .collect()
    }
}

#[derive(Clone)]
pub struct VarBuilder {
    store: VarStore,
    prefix: String,
}

impl VarBuilder {
    pub fn pp(&self, name: impl AsRef<str>) -> VarBuilder {
        VarBuilder {
            store: self.store.clone(),
            prefix: self.path(name.as_ref()),
        }
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Param {
        self.get_with(name, shape, |rng, n| match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..=b)).collect(),
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-b..=b)).collect()
            }
        })
    }

    /// Registers a parameter whose initial values come from `init`, called
    /// with the parameter's own RNG stream and element count.
    pub fn get_with(
        &self,
        name: &str,
        shape: &[usize],
        init: impl FnOnce(&mut ChaCha8Rng, usize) -> Vec<f64>,
    ) -> Param {
        let key = self.path(name);
        let mut inner = self.store.0.lock().unwrap();
        if let Some(p) = inner.params.get(&key) {
            assert_eq!(p.shape(), shape, "parameter `{key}` re-registered with a new shape");
            return p.clone();
        }
        let mut rng = seeded_rng(inner.seed, &key);
        let n = shape.iter().product();
        let data = init(&mut rng, n);
        assert_eq!(data.len(), n);
        let p = Param::new(key.clone(), shape.to_vec(), data);
        inner.params.insert(key, p.clone());
        p
    }
}
