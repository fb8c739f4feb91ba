use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Array, AutodiffError, Graph};

/// One trainable tensor with its accumulated gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Array,
    pub grad: Array,
    first_moment: Array,
    second_moment: Array,
}

impl Param {
    fn new(value: Array) -> Self {
        let zeros = Array::zeros(value.shape());
        Self {
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        }
    }
}

/// Named trainable parameters, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    seed: u64,
    steps: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            seed,
            steps: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of optimizer steps applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn insert(&mut self, name: &str, value: Array) -> Result<(), AutodiffError> {
        if self.params.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    /// Gaussian init with the given standard deviation.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<(), AutodiffError> {
        let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(rng))
            .collect();
        self.insert(name, Array::from_vec(shape, data)?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param, AutodiffError> {
        self.params
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Array, AutodiffError> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Array, AutodiffError> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Array, AutodiffError> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.grad)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Array, AutodiffError> {
        Ok(&self.get(name)?.grad)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Adds the gradients a graph computed for its bound parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (name, var) in graph.param_vars() {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), graph.grad(var)) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients. Nothing is
/// modified if any gradient is non-finite. Gradients are left in place.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<(), AutodiffError> {
    if let Some((name, _)) = store.params.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(AutodiffError::NonFiniteGrad { name: name.clone() });
    }
    store.steps += 1;
    let t = store.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in store.params.values_mut() {
        let g = p.grad.data();
        let m = p.first_moment.data_mut();
        for (m, g) in m.iter_mut().zip(g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        }
        let v = p.second_moment.data_mut();
        for (v, g) in v.iter_mut().zip(g) {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        }
        let (m, v) = (p.first_moment.data(), p.second_moment.data());
        for ((w, m), v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            *w -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
