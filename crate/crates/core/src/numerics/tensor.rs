use std::collections::BTreeMap;
use std::fmt;

use super::NumericsError;

/// Dense row-major `f64` tensor with an explicit shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

/// Entrywise operation kinds accepted by [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Neg,
    Exp,
    Sqrt,
}

impl ElementwiseKind {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::DataLength {
                shape,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness audit. Shapes are still checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, NumericsError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self, NumericsError> {
        self.expect_same_shape(other, "zip")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: f64, other: &Tensor) -> Result<(), NumericsError> {
        self.expect_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Entrywise arithmetic. Binary kinds require `b` with an identical shape.
pub fn elementwise(kind: ElementwiseKind, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor, NumericsError> {
    match (kind.is_binary(), b) {
        (true, None) => return Err(NumericsError::Arity { op: kind, expected: 2 }),
        (false, Some(_)) => return Err(NumericsError::Arity { op: kind, expected: 1 }),
        _ => {}
    }
    match kind {
        ElementwiseKind::Add => a.zip_map(b.unwrap(), |x, y| x + y),
        ElementwiseKind::Sub => a.zip_map(b.unwrap(), |x, y| x - y),
        ElementwiseKind::Mul => a.zip_map(b.unwrap(), |x, y| x * y),
        ElementwiseKind::Neg => Ok(a.map(|x| -x)),
        ElementwiseKind::Exp => Ok(a.map(f64::exp)),
        ElementwiseKind::Sqrt => {
            if let Some(index) = a.data.iter().position(|&v| v < 0.0) {
                return Err(NumericsError::Domain {
                    op: "sqrt",
                    index,
                    value: a.data[index],
                });
            }
            Ok(a.map(f64::sqrt))
        }
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), NumericsError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// A store with the same names and shapes, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// True when both stores carry identical names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn layout_mismatch(&self, other: &ParamStore) -> Option<String> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => return Some(format!("missing parameter {name}")),
                Some(o) if o.shape() != t.shape() => {
                    return Some(format!("parameter {name}: shape {:?} vs {:?}", t.shape(), o.shape()))
                }
                _ => {}
            }
        }
        other
            .names()
            .find(|n| !self.tensors.contains_key(*n))
            .map(|n| format!("unexpected parameter {n}"))
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// `self += factor * other`, requiring identical layouts.
    pub fn axpy(&mut self, factor: f64, other: &ParamStore) -> Result<(), NumericsError> {
        if let Some(msg) = self.layout_mismatch(other) {
            return Err(NumericsError::Layout(msg));
        }
        for (name, t) in self.tensors.iter_mut() {
            t.axpy(factor, &other.tensors[name])?;
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}
