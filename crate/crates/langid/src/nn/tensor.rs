//! Minimal dense tensor types used by the model.
//!
//! Everything is generic over [`Scalar`] so the production path runs in f32
//! (matching the float32 checkpoint payload) while numerical checks can
//! instantiate the exact same code in f64.

use std::collections::BTreeMap;
use std::fmt;

/// Element type of all model math: f32 or f64.
pub trait Scalar:
    num_traits::Float + std::iter::Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major 2D array. For activations the convention is rows = channels,
/// cols = frames; for per-utterance vectors rows = batch items.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match rows*cols");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = self.data[r * self.cols + c] + v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of column `c` (one value per row).
    pub fn col(&self, c: usize) -> Vec<S> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Mat<S> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Zero out columns `start..` in every row (mask padding frames).
    pub fn zero_cols_from(&mut self, start: usize) {
        for r in 0..self.rows {
            for c in start..self.cols {
                self.data[r * self.cols + c] = S::zero();
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Mat<S>) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Named dense array of rank 1..=3; the storage unit of [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn filled(dims: &[usize], v: S) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Self {
        assert_eq!(data.len(), dims.iter().product::<usize>());
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn at1(&self, i: usize) -> S {
        self.data[i]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[i * self.dims[1] + j]
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> S {
        debug_assert_eq!(self.dims.len(), 3);
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    #[inline]
    pub fn add1(&mut self, i: usize, v: S) {
        self.data[i] = self.data[i] + v;
    }

    #[inline]
    pub fn add2(&mut self, i: usize, j: usize, v: S) {
        let idx = i * self.dims[1] + j;
        self.data[idx] = self.data[idx] + v;
    }

    #[inline]
    pub fn add3(&mut self, i: usize, j: usize, k: usize, v: S) {
        let idx = (i * self.dims[1] + j) * self.dims[2] + k;
        self.data[idx] = self.data[idx] + v;
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Flat named-tensor store for weights, biases, and batch-norm statistics.
/// Iteration is always in sorted name order, which fixes the checkpoint
/// byte layout and the optimizer update order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<S> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParameterSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        ParameterSet {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    /// Panics on a missing name: the name set is fixed by the model config,
    /// so a miss is a programming error, not an input error.
    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of stored elements across all tensors.
    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all values zero (gradient / moment stores).
    pub fn zeros_like(&self) -> ParameterSet<S> {
        ParameterSet {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.dims())))
                .collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParameterSet<T> {
        ParameterSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// First non-finite element, as (tensor name, flat index).
    pub fn find_non_finite(&self) -> Option<(&str, usize)> {
        for (name, t) in &self.map {
            if let Some(idx) = t.data().iter().position(|v| !v.is_finite()) {
                return Some((name.as_str(), idx));
            }
        }
        None
    }

    pub fn max_abs_diff(&self, other: &ParameterSet<S>) -> f64 {
        let mut worst = 0.0f64;
        for (name, t) in &self.map {
            let o = other.get(name);
            for (a, b) in t.data().iter().zip(o.data()) {
                worst = worst.max((a.as_f64() - b.as_f64()).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mat_indexing_row_major() {
        let m = Mat::<f64>::from_fn(2, 3, |r, c| (r * 10 + c) as f64);
        assert_eq!(m.at(1, 2), 12.0);
        assert_eq!(m.row(1), &[10.0, 11.0, 12.0]);
        assert_eq!(m.col(2), vec![2.0, 12.0]);
    }

    #[test]
    fn mask_zeroes_trailing_cols() {
        let mut m = Mat::<f32>::from_fn(2, 4, |_, _| 1.0);
        m.zero_cols_from(2);
        assert_eq!(m.row(0), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.row(1), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn parameter_set_sorted_iteration() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("b", Tensor::zeros(&[2]));
        p.insert("a", Tensor::zeros(&[3]));
        let names: Vec<_> = p.names().cloned().collect();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(p.total_elements(), 5);
    }

    #[test]
    fn find_non_finite_reports_name() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("w", Tensor::from_vec(&[2], vec![1.0, f32::NAN]));
        let (name, idx) = p.find_non_finite().unwrap();
        assert_eq!(name, "w");
        assert_eq!(idx, 1);
    }
}
