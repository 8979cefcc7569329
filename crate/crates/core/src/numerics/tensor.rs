use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Every tensor is also viewed as a matrix: `cols` is the last dimension and
/// `rows` the product of the others. Scalars have shape `[]` and view as 1×1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], data: values }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
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

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Row-wise log-softmax, stabilized by max subtraction.
    pub fn log_softmax_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            log_softmax_in_place(row);
        }
        Tensor { shape: self.shape.clone(), data: out }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))` without overflow.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Log-softmax along `axis` of an arbitrary-rank tensor.
pub fn log_softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = logits.shape();
    if axis >= shape.len().max(1) {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    if shape.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = logits.data().to_vec();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for k in 0..n {
                buf[k] = out[base + k * inner];
            }
            log_softmax_in_place(&mut buf);
            for k in 0..n {
                out[base + k * inner] = buf[k];
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Named parameter collection with deterministic (sorted) iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Names whose presence or shape differs between the two sets.
    pub fn mismatches(&self, other: &ParamSet) -> Vec<String> {
        let mut bad = Vec::new();
        for (name, t) in &self.params {
            match other.params.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                _ => bad.push(name.clone()),
            }
        }
        for name in other.params.keys() {
            if !self.params.contains_key(name) {
                bad.push(name.clone());
            }
        }
        bad
    }

    pub fn is_shape_compatible(&self, other: &ParamSet) -> bool {
        self.mismatches(other).is_empty()
    }

    pub fn ensure_compatible(&self, other: &ParamSet) -> Result<()> {
        let bad = self.mismatches(other);
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(bad))
        }
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet { params: self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &ParamSet) -> Result<()> {
        self.ensure_compatible(other)?;
        for (name, t) in self.params.iter_mut() {
            let o = &other.params[name];
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += k * b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.params.values_mut() {
            t.scale_assign(k);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.params.values().map(Tensor::sq_norm).sum()
    }

    /// Euclidean distance over the concatenation of all values.
    pub fn distance(&self, other: &ParamSet) -> Result<f64> {
        self.ensure_compatible(other)?;
        let mut s = 0.0;
        for (name, t) in &self.params {
            for (a, b) in t.data().iter().zip(other.params[name].data()) {
                s += (a - b) * (a - b);
            }
        }
        Ok(s.sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and little-endian value bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet { params: iter.into_iter().collect() }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
        assert_eq!((Tensor::scalar(1.0).rows(), Tensor::scalar(1.0).cols()), (1, 1));
    }

    #[test]
    fn log_softmax_symmetric_pair() {
        let t = Tensor::vector(vec![0.0, 0.0]).log_softmax_rows();
        assert_eq!(t.data(), &[0.5f64.ln(), 0.5f64.ln()]);
    }

    #[test]
    fn log_softmax_large_logits_stay_finite() {
        let t = Tensor::vector(vec![1000.0, 0.0]).log_softmax_rows();
        assert!(t.is_finite());
        let s: f64 = t.data().iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_axis_zero_normalizes_columns() {
        let t = Tensor::new(vec![3, 2], vec![1.0, -1.0, 2.0, 0.5, -3.0, 4.0]).unwrap();
        let ls = log_softmax(&t, 0).unwrap();
        for c in 0..2 {
            let s: f64 = (0..3).map(|r| ls.data()[r * 2 + c].exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(log_softmax(&t, 2).is_err());
    }

    #[test]
    fn distance_is_global_euclidean() {
        let mut a = ParamSet::new();
        a.insert("x", Tensor::vector(vec![0.0, 1.0]));
        a.insert("y", Tensor::scalar(2.0));
        let mut b = a.clone();
        b.get_mut("x").unwrap().data_mut()[0] = 3.0;
        b.get_mut("y").unwrap().data_mut()[0] = 6.0;
        assert_eq!(a.distance(&b).unwrap(), 5.0);
        assert_eq!(a.distance(&a).unwrap(), 0.0);
    }

    #[test]
    fn mismatches_list_names() {
        let mut a = ParamSet::new();
        a.insert("x", Tensor::zeros(&[2]));
        a.insert("y", Tensor::zeros(&[2]));
        let mut b = ParamSet::new();
        b.insert("x", Tensor::zeros(&[3]));
        b.insert("z", Tensor::zeros(&[1]));
        assert_eq!(a.mismatches(&b), vec!["x", "y", "z"]);
    }
}
