//! Named parameter arrays, graph binding, and seeded initializers.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, NodeId, Real};
use crate::error::{Error, Result};

pub use crate::autodiff::BindMode;

static STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Ordered map of parameter name -> array. Iteration order is insertion
/// order, which keeps graph construction and optimizer updates deterministic.
#[derive(Debug)]
pub struct ParamStore<F: Real> {
    uid: u64,
    arrays: IndexMap<String, ArrayD<F>>,
}

impl<F: Real> Clone for ParamStore<F> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: STORE_UID.fetch_add(1, Ordering::Relaxed),
            arrays: self.arrays.clone(),
        }
    }
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            uid: STORE_UID.fetch_add(1, Ordering::Relaxed),
            arrays: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) -> Result<()> {
        let name = name.into();
        if self.arrays.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter `{name}`")));
        }
        self.arrays.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.arrays.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total scalar count across all arrays.
    pub fn param_count(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// Bind every array into the graph, cached per (store, mode) so repeated
    /// forwards in one graph share leaves and gradients accumulate correctly.
    pub fn bind(&self, g: &mut Graph<F>, mode: BindMode) -> Binding {
        if let Some(b) = g.bind_cache.get(&(self.uid, mode)) {
            return b.clone();
        }
        let mut ids = IndexMap::new();
        for (name, arr) in &self.arrays {
            let id = match mode {
                BindMode::Trainable => g.leaf(arr.clone()),
                BindMode::Frozen => g.constant(arr.clone()),
            };
            ids.insert(name.clone(), id);
        }
        let b = Binding { mode, ids };
        g.bind_cache.insert((self.uid, mode), b.clone());
        b
    }

    /// Collect gradients for every bound parameter after a backward pass.
    /// Parameters that received no gradient are omitted.
    pub fn grads_from(&self, g: &Graph<F>, binding: &Binding) -> IndexMap<String, ArrayD<F>> {
        let mut out = IndexMap::new();
        for (name, id) in &binding.ids {
            if let Some(grad) = g.grad(*id) {
                out.insert(name.clone(), grad.clone());
            }
        }
        out
    }

    /// Order- and bit-sensitive digest of all parameter values, used by the
    /// frozen-parameter tests.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, arr) in &self.arrays {
            name.hash(&mut h);
            arr.shape().hash(&mut h);
            for v in arr.iter() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn to_f32(&self) -> IndexMap<String, ArrayD<f32>> {
        self.arrays
            .iter()
            .map(|(k, v)| (k.clone(), v.mapv(|x| x.as_f32())))
            .collect()
    }

    pub fn from_f32(arrays: IndexMap<String, ArrayD<f32>>) -> Self {
        let mut store = ParamStore::new();
        for (k, v) in arrays {
            store.arrays.insert(k, v.mapv(F::of_f32));
        }
        store
    }
}

/// Node ids of one store bound into one graph.
#[derive(Debug, Clone)]
pub struct Binding {
    pub mode: BindMode,
    pub(crate) ids: IndexMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Seeded initializer stream. All draws go through f64 regardless of F.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std), redrawn while |x| > 2*std.
    pub fn trunc_normal<F: Real>(&mut self, shape: &[usize], std: f64) -> ArrayD<F> {
        let mut out = ArrayD::<F>::zeros(IxDyn(shape));
        for v in out.iter_mut() {
            loop {
                let z: f64 = self.rng.sample::<f64, _>(StandardNormal) * std;
                if z.abs() <= 2.0 * std {
                    *v = F::of_f64(z);
                    break;
                }
            }
        }
        out
    }

    /// Kaiming fan-in scaling for [Cout,Cin,k,k] conv kernels.
    pub fn kaiming_conv<F: Real>(&mut self, shape: &[usize; 4]) -> ArrayD<F> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut out = ArrayD::<F>::zeros(IxDyn(shape));
        for v in out.iter_mut() {
            let z: f64 = self.rng.sample::<f64, _>(StandardNormal) * std;
            *v = F::of_f64(z);
        }
        out
    }

    pub fn zeros<F: Real>(&mut self, shape: &[usize]) -> ArrayD<F> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones<F: Real>(&mut self, shape: &[usize]) -> ArrayD<F> {
        ArrayD::from_elem(IxDyn(shape), F::one())
    }
}

/// Split a master seed into independent stream seeds.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(index.wrapping_mul(0x94d049bb133111eb));
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    z
}
