use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::NnError;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Named parameter arrays with matching gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Array2::zeros(value.dim()));
        self.values.push(value);
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces the value of an existing parameter, checking its shape.
    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<(), NnError> {
        let id = self.id(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if self.values[id.0].dim() != value.dim() {
            return Err(NnError::ShapeMismatch(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.values[id.0].dim(),
                value.dim()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Registers parameters under a name prefix and initializes them.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_, R>) -> T) -> T {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut child = ParamBuilder { store: self.store, rng: self.rng, prefix };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, value).expect("parameter names are generated uniquely per scope")
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)`.
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let std = 1.0 / (rows as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal));
        self.register(name, value)
    }

    /// Gaussian init with an explicit standard deviation.
    pub fn normal_std(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let value = Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal));
        self.register(name, value)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.register(name, Array2::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.register(name, Array2::ones((rows, cols)))
    }
}

/// Adam over every parameter of a store (no weight decay).
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros = || store.values.iter().map(|p| Array2::zeros(p.dim())).collect::<Vec<_>>();
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update from the store's gradient buffers.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for i in 0..store.values.len() {
            let g = &store.grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.values[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
