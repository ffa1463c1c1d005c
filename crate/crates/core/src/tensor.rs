//! Dense real and complex tensors in row-major `f64` storage.
//!
//! Complex tensors are stored as two real planes. Binary operations allow
//! the second operand to broadcast along singleton dimensions of equal rank
//! (e.g. a `[C, 1, K]` scale against a `[C, T, K]` feature map). Any other
//! shape disagreement is a [`Error::Shape`].

use crate::error::{shape_err, Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RealTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Checks that `b` can be broadcast onto `a`: equal rank, each dim equal or 1.
pub(crate) fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return Err(shape_err(op, a, b));
    }
    Ok(())
}

/// For every flat index of `a`, the flat index of the broadcast element of `b`.
pub(crate) fn broadcast_indices(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = numel(a);
    if a == b {
        return (0..n).collect();
    }
    let bs = strides(b);
    let eff: Vec<usize> = b
        .iter()
        .zip(&bs)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    for _ in 0..n {
        out.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            if idx[d] < a[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Sums a full-shape buffer down onto a broadcast shape.
pub(crate) fn reduce_to(full: &[usize], data: &[f64], target: &[usize]) -> Vec<f64> {
    if full == target {
        return data.to_vec();
    }
    let map = broadcast_indices(full, target);
    let mut out = vec![0.0; numel(target)];
    for (v, &j) in data.iter().zip(&map) {
        out[j] += v;
    }
    out
}

impl RealTensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Invalid(format!(
                "rank {} exceeds {MAX_RANK}",
                shape.len()
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Constructor for callers that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(shape_err("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        let s = strides(&self.shape);
        self.data[index.iter().zip(&s).map(|(i, s)| i * s).sum::<usize>()]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        check_broadcast(op, &self.shape, &other.shape)?;
        let map = broadcast_indices(&self.shape, &other.shape);
        let data = self
            .data
            .iter()
            .zip(&map)
            .map(|(&a, &j)| f(a, other.data[j]))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Contracts the last axis with `w: [C1, C2]`.
    pub fn matmul(&self, w: &Self) -> Result<Self> {
        let (rows, inner, cols, out_shape) = matmul_dims(&self.shape, &w.shape)?;
        let mut out = vec![0.0; rows * cols];
        matmul_into(&self.data, &w.data, rows, inner, cols, &mut out);
        Ok(Self::from_parts(out_shape, out))
    }
}

pub(crate) fn matmul_dims(
    a: &[usize],
    w: &[usize],
) -> Result<(usize, usize, usize, Vec<usize>)> {
    if a.is_empty() || w.len() != 2 || a[a.len() - 1] != w[0] {
        return Err(shape_err("matmul", a, w));
    }
    let inner = w[0];
    let cols = w[1];
    let rows = numel(a) / inner.max(1);
    let mut out_shape = a.to_vec();
    *out_shape.last_mut().unwrap() = cols;
    Ok((rows, inner, cols, out_shape))
}

pub(crate) fn matmul_into(a: &[f64], w: &[f64], rows: usize, inner: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let o = &mut out[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let av = a[r * inner + k];
            if av == 0.0 {
                continue;
            }
            let wr = &w[k * cols..(k + 1) * cols];
            for (ov, wv) in o.iter_mut().zip(wr) {
                *ov += av * wv;
            }
        }
    }
}

/// Complex tensor stored as paired real planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    pub re: RealTensor,
    pub im: RealTensor,
}

impl ComplexTensor {
    pub fn new(re: RealTensor, im: RealTensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(shape_err("complex", re.shape(), im.shape()));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            re: RealTensor::zeros(shape),
            im: RealTensor::zeros(shape),
        }
    }

    /// Unit-modulus tensor `cos(angle) + j sin(angle)`.
    pub fn from_polar(modulus: &RealTensor, angle: &RealTensor) -> Result<Self> {
        let re = modulus.zip_with(angle, "from_polar", |m, a| m * a.cos())?;
        let im = modulus.zip_with(angle, "from_polar", |m, a| m * a.sin())?;
        Self::new(re, im)
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn get(&self, flat: usize) -> (f64, f64) {
        (self.re.data()[flat], self.im.data()[flat])
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::new(self.re.add(&other.re)?, self.im.add(&other.im)?)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Self::new(self.re.sub(&other.re)?, self.im.sub(&other.im)?)
    }

    /// Complex product `(a_re b_re - a_im b_im) + j (a_re b_im + a_im b_re)`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        check_broadcast("mul_complex", self.shape(), other.shape())?;
        let map = broadcast_indices(self.shape(), other.shape());
        let (ar, ai) = (self.re.data(), self.im.data());
        let (br, bi) = (other.re.data(), other.im.data());
        let mut re = Vec::with_capacity(ar.len());
        let mut im = Vec::with_capacity(ar.len());
        for (i, &j) in map.iter().enumerate() {
            re.push(ar[i] * br[j] - ai[i] * bi[j]);
            im.push(ar[i] * bi[j] + ai[i] * br[j]);
        }
        let shape = self.shape().to_vec();
        Ok(Self {
            re: RealTensor::from_parts(shape.clone(), re),
            im: RealTensor::from_parts(shape, im),
        })
    }

    pub fn scale_by_real(&self, s: &RealTensor) -> Result<Self> {
        Self::new(self.re.mul(s)?, self.im.mul(s)?)
    }

    pub fn modulus(&self) -> RealTensor {
        let data = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(r, i)| r.hypot(*i))
            .collect();
        RealTensor::from_parts(self.shape().to_vec(), data)
    }

    pub fn angle(&self) -> RealTensor {
        let data = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(r, i)| i.atan2(*r))
            .collect();
        RealTensor::from_parts(self.shape().to_vec(), data)
    }

    pub fn conj(&self) -> Self {
        Self {
            re: self.re.clone(),
            im: self.im.scale(-1.0),
        }
    }

    /// Global rotation `x * e^{j theta}`.
    pub fn rotate(&self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let re = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(r, i)| r * c - i * s)
            .collect();
        let im = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(r, i)| r * s + i * c)
            .collect();
        let shape = self.shape().to_vec();
        Self {
            re: RealTensor::from_parts(shape.clone(), re),
            im: RealTensor::from_parts(shape, im),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.re.norm().powi(2) + self.im.norm().powi(2)).sqrt()
    }

    /// Complex contraction of the last axis; no bias term.
    pub fn matmul(&self, w: &Self) -> Result<Self> {
        let rr = self.re.matmul(&w.re)?;
        let ii = self.im.matmul(&w.im)?;
        let ri = self.re.matmul(&w.im)?;
        let ir = self.im.matmul(&w.re)?;
        Self::new(rr.sub(&ii)?, ri.add(&ir)?)
    }
}

/// `||a - b|| / max(floor, ||b||)` over both planes.
pub fn relative_error(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
    let diff = a.sub(b).map(|d| d.norm()).unwrap_or(f64::INFINITY);
    diff / b.norm().max(1e-12)
}

pub fn relative_error_real(a: &RealTensor, b: &RealTensor) -> f64 {
    let diff = a.sub(b).map(|d| d.norm()).unwrap_or(f64::INFINITY);
    diff / b.norm().max(1e-12)
}
