use super::graph::{Gradients, Graph, NodeId};
use super::matrix::Matrix;
use super::GradError;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub name: String,
    pub value: Matrix,
    #[serde(skip, default = "empty")]
    pub grad: Matrix,
}

fn empty() -> Matrix {
    Matrix::zeros(0, 0)
}

impl ParamArray {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { name: name.into(), value, grad }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(name, Matrix::from_vec(rows, cols, data))
    }
}

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    arrays: Vec<ParamArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, array: ParamArray) {
        match self.arrays.iter_mut().find(|a| a.name == array.name) {
            Some(slot) => *slot = array,
            None => self.arrays.push(array),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamArray> {
        self.arrays.iter_mut().find(|a| a.name == name)
    }

    pub fn value(&self, name: &str) -> &Matrix {
        &self.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamArray> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamArray> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.arrays.iter().map(|a| a.name.as_str()).collect()
    }

    /// Adds a parameter leaf for `name` to `graph`.
    pub fn leaf(&self, graph: &mut Graph, name: &str) -> NodeId {
        graph.param(name, self.value(name).clone())
    }

    pub fn zero_grads(&mut self) {
        for a in &mut self.arrays {
            if a.grad.shape() != a.value.shape() {
                a.grad = Matrix::zeros(a.value.rows(), a.value.cols());
            } else {
                a.grad.fill(0.0);
            }
        }
    }

    /// Adds the parameter gradients from a backward pass into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), GradError> {
        for (name, g) in grads.params() {
            let Some(a) = self.get_mut(name) else { continue };
            if a.grad.shape() != a.value.shape() {
                a.grad = Matrix::zeros(a.value.rows(), a.value.cols());
            }
            if g.shape() != a.value.shape() {
                return Err(GradError::ParamShape { name: name.to_string(), expected: a.value.shape(), got: g.shape() });
            }
            a.grad.add_assign(&g);
        }
        Ok(())
    }
}

/// Outcome of one parameter update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Arrays whose gradient was non-finite and were left untouched.
    pub skipped: Vec<String>,
}

/// `value <- value - lr * grad` for every array, then zeroes the accumulators.
pub fn sgd_step(params: &mut ParamStore, lr: f64) -> Result<StepReport, GradError> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(GradError::LearningRate(lr));
    }
    let mut report = StepReport::default();
    for a in params.iter_mut() {
        if a.grad.shape() != a.value.shape() {
            continue;
        }
        if !a.grad.is_finite() {
            report.skipped.push(a.name.clone());
            continue;
        }
        for (v, g) in a.value.data_mut().iter_mut().zip(a.grad.data()) {
            *v -= lr * g;
        }
    }
    params.zero_grads();
    Ok(report)
}

/// Adam moments, stored alongside parameters so checkpoints resume exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |a: &ParamArray| Matrix::zeros(a.value.rows(), a.value.cols());
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<StepReport, GradError> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(GradError::LearningRate(lr));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut report = StepReport::default();
        for (i, a) in params.iter_mut().enumerate() {
            if a.grad.shape() != a.value.shape() {
                continue;
            }
            if !a.grad.is_finite() {
                report.skipped.push(a.name.clone());
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, g), m), v) in a.value.data_mut().iter_mut().zip(a.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        params.zero_grads();
        Ok(report)
    }
}
