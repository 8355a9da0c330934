use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major real array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl DiffArray {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![v; shape.iter().product()],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![v],
            grad: None,
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<DiffArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, array: DiffArray) -> ParamId {
        self.names.push(name.into());
        self.arrays.push(array);
        ParamId(self.arrays.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &DiffArray {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffArray {
        &mut self.arrays[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(DiffArray::len).sum()
    }

    pub fn clear_grads(&mut self) {
        self.arrays.iter_mut().for_each(|a| a.grad = None);
    }

    /// Rounds every value to the nearest `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for a in &mut self.arrays {
            a.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub(crate) fn arrays_mut(&mut self) -> &mut [DiffArray] {
        &mut self.arrays
    }
}
