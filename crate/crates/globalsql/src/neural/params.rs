use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor of doubles. Only rank 1 and rank 2 are used.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) view; vectors are columns.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            [] => (1, 1),
            other => (other[0], other[1..].iter().product()),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// Gradients keyed by parameter name, same shapes as the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub(crate) map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn norm(&self) -> f64 {
        self.map.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Adds `other` into `self`, creating entries as needed.
    pub fn add(&mut self, other: &Gradients) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(t) => t.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Named parameters plus an accumulated gradient of identical shape for each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.grads.insert(name.clone(), Tensor::zeros(&value.shape));
        self.params.insert(name, value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// Parameter names in manifest (lexicographic) order.
    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.values_mut() {
            g.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (name, g) in &grads.map {
            if let Some(acc) = self.grads.get_mut(name) {
                acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Snapshot of the accumulated gradients.
    pub fn gradients(&self) -> Gradients {
        Gradients {
            map: self.grads.clone(),
        }
    }

    /// Glorot-uniform matrix: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn init_matrix<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        self.insert(name, Tensor { shape: vec![rows, cols], data });
    }

    /// Learned (non-bias) vector, initialised like a 1 x n matrix.
    pub fn init_vector<R: Rng>(&mut self, name: &str, n: usize, rng: &mut R) {
        let a = (6.0 / (n + 1) as f64).sqrt();
        let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
        self.insert(name, Tensor { shape: vec![n], data });
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }
}
