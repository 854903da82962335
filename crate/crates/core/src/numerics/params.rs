use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Matrix, SeededRng};

/// Handle into a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Glorot-uniform initialized.
    Weight,
    /// Zero initialized.
    Bias,
    /// One initialized (layer-norm gains).
    Gain,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub role: ParamRole,
}

impl Parameter {
    /// Fresh parameter. Weights draw from `U(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, where `fan_in = rows` and
    /// `fan_out = cols`.
    pub fn init(name: impl Into<String>, rows: usize, cols: usize, role: ParamRole, rng: &mut SeededRng) -> Self {
        assert!(rows >= 1 && cols >= 1, "parameter dims must be >= 1");
        let value = match role {
            ParamRole::Weight => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.uniform_range(-a, a)).collect();
                Matrix::from_vec(rows, cols, data).expect("shape")
            }
            ParamRole::Bias => Matrix::zeros(rows, cols),
            ParamRole::Gain => Matrix::filled(rows, cols, 1.0),
        };
        Self {
            name: name.into(),
            grad: Matrix::zeros(rows, cols),
            value,
            role,
        }
    }
}

/// All learned weights of a model, addressed by [`ParamId`] or by name.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, param: Parameter) -> ParamId {
        assert!(
            !self.by_name.contains_key(&param.name),
            "duplicate parameter name {}",
            param.name
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        id
    }

    pub fn init(&mut self, name: &str, rows: usize, cols: usize, role: ParamRole, rng: &mut SeededRng) -> ParamId {
        self.add(Parameter::init(name, rows, cols, role, rng))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zeroed buffers shaped like every parameter, for off-store accumulation.
    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect()
    }

    /// Adds `scale * grads[i]` into each parameter's gradient.
    pub fn accumulate(&mut self, grads: &[Matrix], scale: f64) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad.axpy(scale, g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.frobenius_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
            }
        }
        norm
    }

    /// Replaces a parameter value, keeping the shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: {:?} vs {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}
