//! Parameter storage, seeded initialization, and the Adam optimizer for the
//! small networks in this crate. The autodiff tape lives in [`tape`].

pub mod tape;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use tape::{Tape, Var};

/// Named weight matrices. Iteration order is the name order, which keeps
/// serialization and optimizer traversal deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a matrix drawn from N(0, 1/sqrt(fan_in)). The RNG stream is
    /// derived from (seed, name), so adding parameters never reshuffles the
    /// initialization of existing ones.
    pub fn init_normal(&mut self, name: &str, rows: usize, cols: usize, seed: u64) {
        let mut rng = rng_for(seed, name);
        let std = 1.0 / (rows as f64).sqrt();
        let m = Array2::from_shape_fn((rows, cols), |_| {
            normal_sample(&mut rng) * std
        });
        self.tensors.insert(name.to_string(), m);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.tensors
            .insert(name.to_string(), Array2::zeros((rows, cols)));
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count, for diagnostics.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// Registers every tensor as a gradient-tracked leaf on the tape.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect();
        BoundParams { vars }
    }

    pub fn to_named_tensors(&self) -> BTreeMap<String, NamedTensor> {
        self.tensors
            .iter()
            .map(|(name, m)| {
                (
                    name.clone(),
                    NamedTensor {
                        shape: [m.nrows(), m.ncols()],
                        data: m.iter().cloned().collect(),
                    },
                )
            })
            .collect()
    }

    pub fn from_named_tensors(
        tensors: &BTreeMap<String, NamedTensor>,
    ) -> Result<Self, String> {
        let mut store = Self::new();
        for (name, t) in tensors {
            let m = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| format!("tensor '{name}': {e}"))?;
            store.tensors.insert(name.clone(), m);
        }
        Ok(store)
    }
}

/// JSON-serializable tensor with its recorded shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Tape handles for a bound [`ParamStore`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    /// Collects per-parameter gradients after a backward pass. Parameters
    /// that did not influence the loss get zeros.
    pub fn gradients(
        &self,
        tape: &Tape,
        grads: &tape::Gradients,
    ) -> BTreeMap<String, Array2<f64>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(tape.value(v).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Deterministic per-name RNG stream.
pub fn rng_for(seed: u64, name: &str) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let digest = crate::util::sha256_hex(name.as_bytes());
    for (i, b) in digest.as_bytes().iter().take(24).enumerate() {
        key[8 + i] = *b;
    }
    ChaCha12Rng::from_seed(key)
}

/// Box-Muller standard normal draw.
pub fn normal_sample(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Adam with bias correction, one moment pair per named parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            azip(m, g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            azip(v, g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            for ((p, m), v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

fn azip<F: FnMut(&mut f64, &f64)>(a: &mut Array2<f64>, b: &Array2<f64>, mut f: F) {
    for (x, y) in a.iter_mut().zip(b.iter()) {
        f(x, y);
    }
}
