//! Tape-based reverse-mode differentiation over [`RealTensor`] values.
//!
//! Every primitive records its inputs (by node id) and whatever forward
//! values its adjoint needs. Node ids are assigned in creation order, so the
//! tape is topologically sorted by construction and the backward sweep is a
//! single reverse pass. Complex quantities are carried as pairs of real
//! nodes; their gradients are the paired real gradients of the two planes.
//!
//! A tape built with [`Tape::inference`] records nothing: values flow through
//! the same code path but are released as soon as their handles drop.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::error::{shape_err, Error, Result};
use crate::signal::stft::Stft;
use crate::tensor::{broadcast_indices, matmul_dims, matmul_into, numel, reduce_to, strides, RealTensor};

pub type NodeId = usize;

/// Handle to a value, optionally tracked on a tape.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<NodeId>,
    value: Rc<RealTensor>,
}

impl Var {
    /// An untracked value.
    pub fn constant(value: RealTensor) -> Self {
        Self {
            id: None,
            value: Rc::new(value),
        }
    }

    pub fn value(&self) -> &RealTensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Silu,
    Relu,
    LeakyRelu(f64),
    Abs,
    Exp,
    /// Circular distance to the nearest multiple of 2π.
    AntiWrap,
}

/// Adjoint callback for user-registered primitives: receives the output
/// gradient, the saved inputs and the saved output, returns one gradient
/// buffer per input.
pub type CustomAdjoint = Rc<dyn Fn(&[f64], &[&RealTensor], &RealTensor) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Add { a: Vec<usize>, b: Vec<usize> },
    Sub { a: Vec<usize>, b: Vec<usize> },
    Mul { a: Rc<RealTensor>, b: Rc<RealTensor> },
    Scale(f64),
    AddScalar,
    Powf { x: Rc<RealTensor>, p: f64 },
    Unary { f: Unary, x: Rc<RealTensor>, y: Rc<RealTensor> },
    Modulus { re: Rc<RealTensor>, im: Rc<RealTensor>, out: Rc<RealTensor> },
    Atan2 { y: Rc<RealTensor>, x: Rc<RealTensor> },
    Sum { shape: Vec<usize> },
    Mean { input: Vec<usize>, out: Vec<usize>, count: usize },
    MatMul { a: Rc<RealTensor>, w: Rc<RealTensor> },
    BmmNt { a: Rc<RealTensor>, b: Rc<RealTensor> },
    Bmm { a: Rc<RealTensor>, b: Rc<RealTensor> },
    Softmax { y: Rc<RealTensor> },
    Conv2d { x: Rc<RealTensor>, w: Rc<RealTensor>, geom: ConvGeom },
    ConvT2d { x: Rc<RealTensor>, w: Rc<RealTensor>, geom: ConvGeom },
    Reshape,
    Permute { input: Vec<usize>, perm: Vec<usize> },
    Concat { axis: usize, sizes: Vec<usize>, out: Vec<usize> },
    Slice { axis: usize, start: usize, input: Vec<usize> },
    Stft { engine: Rc<Stft>, len: usize, frames: usize },
    Istft { engine: Rc<Stft>, frames: usize },
    Custom { inputs: Vec<Rc<RealTensor>>, out: Rc<RealTensor>, adjoint: CustomAdjoint },
}

struct Node {
    op: Op,
    inputs: Vec<Option<NodeId>>,
}

/// Recorder for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when `v` does not
    /// influence the loss or is untracked.
    pub fn get(&self, v: &Var) -> RealTensor {
        let data = v
            .id
            .and_then(|id| self.grads.get(id).cloned().flatten())
            .unwrap_or_else(|| vec![0.0; v.value.len()]);
        RealTensor::from_parts(v.shape().to_vec(), data)
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Batched `a: [B, L, D] x b: [B, M, D]^T -> [B, L, M]`.
fn bmm_nt(a: &[f64], b: &[f64], bsz: usize, l: usize, m: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; bsz * l * m];
    for bi in 0..bsz {
        for i in 0..l {
            let ar = &a[(bi * l + i) * d..(bi * l + i + 1) * d];
            for j in 0..m {
                let br = &b[(bi * m + j) * d..(bi * m + j + 1) * d];
                out[(bi * l + i) * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
    }
    out
}

/// Batched `a: [B, L, M] x b: [B, M, D] -> [B, L, D]`.
fn bmm(a: &[f64], b: &[f64], bsz: usize, l: usize, m: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; bsz * l * d];
    for bi in 0..bsz {
        matmul_into(
            &a[bi * l * m..(bi + 1) * l * m],
            &b[bi * m * d..(bi + 1) * m * d],
            l,
            m,
            d,
            &mut out[bi * l * d..(bi + 1) * l * d],
        );
    }
    out
}

/// Batched transpose of the two trailing axes.
fn transpose_last(a: &[f64], bsz: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for b in 0..bsz {
        for i in 0..r {
            for j in 0..c {
                out[(b * c + j) * r + i] = a[(b * r + i) * c + j];
            }
        }
    }
    out
}

pub fn anti_wrap(x: f64) -> f64 {
    (x - 2.0 * PI * (x / (2.0 * PI)).round()).abs()
}

fn unary_forward(f: Unary, x: f64) -> f64 {
    match f {
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Silu => x * sigmoid(x),
        Unary::Relu => x.max(0.0),
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Unary::Abs => x.abs(),
        Unary::Exp => x.exp(),
        Unary::AntiWrap => anti_wrap(x),
    }
}

fn unary_derivative(f: Unary, x: f64, y: f64) -> f64 {
    match f {
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        Unary::Abs => x.signum() * (x != 0.0) as u8 as f64,
        Unary::Exp => y,
        Unary::AntiWrap => {
            let r = x - 2.0 * PI * (x / (2.0 * PI)).round();
            if r == 0.0 {
                0.0
            } else {
                r.signum()
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that records nothing; used for inference.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input node ids of every recorded op, in recording order.
    pub fn topology(&self) -> Vec<(NodeId, Vec<Option<NodeId>>)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(i, n)| (i, n.inputs.clone()))
            .collect()
    }

    /// A differentiable leaf. On an inference tape this is a constant.
    pub fn leaf(&self, value: RealTensor) -> Var {
        if !self.recording {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
        });
        Var {
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    fn push(&self, value: RealTensor, inputs: &[&Var], op: impl FnOnce() -> Op) -> Var {
        let tracked = self.recording && inputs.iter().any(|v| v.id.is_some());
        if !tracked {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: op(),
            inputs: inputs.iter().map(|v| v.id).collect(),
        });
        Var {
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value.add(&b.value)?;
        Ok(self.push(out, &[a, b], || Op::Add {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        }))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value.sub(&b.value)?;
        Ok(self.push(out, &[a, b], || Op::Sub {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        }))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value.mul(&b.value)?;
        Ok(self.push(out, &[a, b], || Op::Mul {
            a: a.value.clone(),
            b: b.value.clone(),
        }))
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        self.push(a.value.scale(c), &[a], || Op::Scale(c))
    }

    pub fn neg(&self, a: &Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: &Var, c: f64) -> Var {
        self.push(a.value.map(|v| v + c), &[a], || Op::AddScalar)
    }

    pub fn powf(&self, x: &Var, p: f64) -> Var {
        self.push(x.value.map(|v| v.powf(p)), &[x], || Op::Powf {
            x: x.value.clone(),
            p,
        })
    }

    pub fn unary(&self, f: Unary, x: &Var) -> Var {
        let y = Rc::new(x.value.map(|v| unary_forward(f, v)));
        let y2 = y.clone();
        let mut var = self.push((*y).clone(), &[x], || Op::Unary {
            f,
            x: x.value.clone(),
            y: y2,
        });
        if var.id.is_some() {
            var.value = y;
        }
        var
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&self, x: &Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn silu(&self, x: &Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn relu(&self, x: &Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn leaky_relu(&self, x: &Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn abs(&self, x: &Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn anti_wrap(&self, x: &Var) -> Var {
        self.unary(Unary::AntiWrap, x)
    }

    /// `sqrt(re^2 + im^2)`; the adjoint is zero where the modulus vanishes.
    pub fn modulus(&self, re: &Var, im: &Var) -> Result<Var> {
        if re.shape() != im.shape() {
            return Err(shape_err("modulus", re.shape(), im.shape()));
        }
        let out = Rc::new(re.value.zip_with(&im.value, "modulus", f64::hypot)?);
        let o2 = out.clone();
        Ok(self.push((*out).clone(), &[re, im], || Op::Modulus {
            re: re.value.clone(),
            im: im.value.clone(),
            out: o2,
        }))
    }

    pub fn atan2(&self, y: &Var, x: &Var) -> Result<Var> {
        if y.shape() != x.shape() {
            return Err(shape_err("atan2", y.shape(), x.shape()));
        }
        let out = y.value.zip_with(&x.value, "atan2", f64::atan2)?;
        Ok(self.push(out, &[y, x], || Op::Atan2 {
            y: y.value.clone(),
            x: x.value.clone(),
        }))
    }

    pub fn sum(&self, x: &Var) -> Var {
        self.push(RealTensor::scalar(x.value.sum()), &[x], || Op::Sum {
            shape: x.shape().to_vec(),
        })
    }

    pub fn mean_all(&self, x: &Var) -> Var {
        let n = x.value.len().max(1) as f64;
        let s = self.sum(x);
        self.scale(&s, 1.0 / n)
    }

    /// Mean over `axes`, keeping them as singleton dimensions.
    pub fn mean_axes(&self, x: &Var, axes: &[usize]) -> Result<Var> {
        let shape = x.shape().to_vec();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::Invalid(format!("mean axes {axes:?} out of range for {shape:?}")));
        }
        let mut out_shape = shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let count = numel(&shape) / numel(&out_shape).max(1);
        let mut data = reduce_to(&shape, x.value.data(), &out_shape);
        for v in &mut data {
            *v /= count as f64;
        }
        let out = RealTensor::from_parts(out_shape.clone(), data);
        Ok(self.push(out, &[x], || Op::Mean {
            input: shape,
            out: out_shape,
            count,
        }))
    }

    /// Contracts the last axis of `a` with `w: [C1, C2]`.
    pub fn matmul(&self, a: &Var, w: &Var) -> Result<Var> {
        let out = a.value.matmul(&w.value)?;
        Ok(self.push(out, &[a, w], || Op::MatMul {
            a: a.value.clone(),
            w: w.value.clone(),
        }))
    }

    /// `a: [B, L, D]`, `b: [B, M, D]` -> `a b^T: [B, L, M]`.
    pub fn bmm_nt(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(shape_err("bmm_nt", sa, sb));
        }
        let data = bmm_nt(a.value.data(), b.value.data(), sa[0], sa[1], sb[1], sa[2]);
        let out = RealTensor::from_parts(vec![sa[0], sa[1], sb[1]], data);
        Ok(self.push(out, &[a, b], || Op::BmmNt {
            a: a.value.clone(),
            b: b.value.clone(),
        }))
    }

    /// `a: [B, L, M]`, `b: [B, M, D]` -> `[B, L, D]`.
    pub fn bmm(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let data = bmm(a.value.data(), b.value.data(), sa[0], sa[1], sa[2], sb[2]);
        let out = RealTensor::from_parts(vec![sa[0], sa[1], sb[2]], data);
        Ok(self.push(out, &[a, b], || Op::Bmm {
            a: a.value.clone(),
            b: b.value.clone(),
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: &Var) -> Var {
        let shape = x.shape().to_vec();
        let last = *shape.last().unwrap_or(&1);
        let mut data = x.value.data().to_vec();
        for row in data.chunks_mut(last.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = Rc::new(RealTensor::from_parts(shape, data));
        let y2 = y.clone();
        let mut var = self.push((*y).clone(), &[x], || Op::Softmax { y: y2 });
        if var.id.is_some() {
            var.value = y;
        }
        var
    }

    pub fn conv2d(&self, x: &Var, w: &Var, geom: ConvGeom) -> Result<Var> {
        let (data, shape) = conv::conv2d(x.value.data(), x.shape(), w.value.data(), w.shape(), &geom)?;
        let out = RealTensor::from_parts(shape, data);
        Ok(self.push(out, &[x, w], || Op::Conv2d {
            x: x.value.clone(),
            w: w.value.clone(),
            geom,
        }))
    }

    pub fn conv_transpose2d(&self, x: &Var, w: &Var, geom: ConvGeom) -> Result<Var> {
        let (data, shape) =
            conv::conv_transpose2d(x.value.data(), x.shape(), w.value.data(), w.shape(), &geom)?;
        let out = RealTensor::from_parts(shape, data);
        Ok(self.push(out, &[x, w], || Op::ConvT2d {
            x: x.value.clone(),
            w: w.value.clone(),
            geom,
        }))
    }

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = x.value.reshape(shape)?;
        Ok(self.push(out, &[x], || Op::Reshape))
    }

    pub fn permute(&self, x: &Var, perm: &[usize]) -> Result<Var> {
        let shape = x.shape();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != shape.len() || seen.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(shape_err("permute", shape, perm));
        }
        let (data, out_shape) = permute_data(x.value.data(), shape, perm);
        let out = RealTensor::from_parts(out_shape, data);
        Ok(self.push(out, &[x], || Op::Permute {
            input: shape.to_vec(),
            perm: perm.to_vec(),
        }))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Invalid(format!("concat axis {axis} out of range")));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(shape_err("concat", &first, s));
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let mut out_shape = first.clone();
        out_shape[axis] = sizes.iter().sum();
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&sizes) {
                let chunk = sz * inner;
                data.extend_from_slice(&p.value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = RealTensor::from_parts(out_shape.clone(), data);
        let refs: Vec<&Var> = parts.iter().collect();
        Ok(self.push(out, &refs, || Op::Concat {
            axis,
            sizes,
            out: out_shape,
        }))
    }

    pub fn slice(&self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Invalid(format!(
                "slice {start}..{} of axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&x.value.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = RealTensor::from_parts(out_shape, data);
        Ok(self.push(out, &[x], || Op::Slice {
            axis,
            start,
            input: shape,
        }))
    }

    /// Waveform `[N]` to stacked spectrum `[2, T, F]` (real plane, imaginary plane).
    pub fn stft(&self, engine: &Rc<Stft>, wave: &Var) -> Result<Var> {
        if wave.shape().len() != 1 {
            return Err(shape_err("stft", wave.shape(), &[0]));
        }
        let (re, im, frames) = engine.analyze(wave.value.data())?;
        let f = engine.config().n_bins();
        let mut data = re;
        data.extend(im);
        let out = RealTensor::from_parts(vec![2, frames, f], data);
        let len = wave.value.len();
        Ok(self.push(out, &[wave], || Op::Stft {
            engine: engine.clone(),
            len,
            frames,
        }))
    }

    /// Stacked spectrum `[2, T, F]` to waveform `[(T - 1) * hop]`.
    pub fn istft(&self, engine: &Rc<Stft>, spec: &Var) -> Result<Var> {
        let s = spec.shape();
        let f = engine.config().n_bins();
        if s.len() != 3 || s[0] != 2 || s[2] != f {
            return Err(shape_err("istft", s, &[2, 0, f]));
        }
        let half = s[1] * f;
        let d = spec.value.data();
        let wave = engine.synthesize(&d[..half], &d[half..], s[1])?;
        let out = RealTensor::from_parts(vec![wave.len()], wave);
        let frames = s[1];
        Ok(self.push(out, &[spec], || Op::Istft {
            engine: engine.clone(),
            frames,
        }))
    }

    /// Registers a primitive with a caller-supplied adjoint.
    pub fn custom(
        &self,
        inputs: &[&Var],
        forward: impl FnOnce(&[&RealTensor]) -> RealTensor,
        adjoint: CustomAdjoint,
    ) -> Var {
        let vals: Vec<&RealTensor> = inputs.iter().map(|v| v.value()).collect();
        let out = Rc::new(forward(&vals));
        let o2 = out.clone();
        let mut var = self.push((*out).clone(), inputs, || Op::Custom {
            inputs: inputs.iter().map(|v| v.value.clone()).collect(),
            out: o2,
            adjoint,
        });
        if var.id.is_some() {
            var.value = out;
        }
        var
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::NotScalar(loss.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|i| i.is_some()).collect();
            let input_grads = backward_op(&node.op, &g, &needs)?;
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(i), Some(ig)) = (inp, ig) else { continue };
                match &mut grads[*i] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&ig) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn backward_op(op: &Op, g: &[f64], needs: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add { a, b } => vec![Some(g.to_vec()), need(1).then(|| reduce_to(a, g, b))],
        Op::Sub { a, b } => vec![
            Some(g.to_vec()),
            need(1).then(|| reduce_to(a, g, b).into_iter().map(|v| -v).collect()),
        ],
        Op::Mul { a, b } => {
            let map = broadcast_indices(a.shape(), b.shape());
            let ga = need(0).then(|| g.iter().zip(&map).map(|(gv, &j)| gv * b.data()[j]).collect());
            let gb = need(1).then(|| {
                let full: Vec<f64> = g.iter().zip(a.data()).map(|(gv, av)| gv * av).collect();
                reduce_to(a.shape(), &full, b.shape())
            });
            vec![ga, gb]
        }
        Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Op::AddScalar => vec![Some(g.to_vec())],
        Op::Powf { x, p } => vec![Some(
            g.iter()
                .zip(x.data())
                .map(|(gv, xv)| if *p == 0.0 { 0.0 } else { gv * p * xv.powf(p - 1.0) })
                .collect(),
        )],
        Op::Unary { f, x, y } => vec![Some(
            g.iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(gv, (xv, yv))| gv * unary_derivative(*f, *xv, *yv))
                .collect(),
        )],
        Op::Modulus { re, im, out } => {
            let part = |src: &RealTensor| -> Vec<f64> {
                g.iter()
                    .zip(src.data().iter().zip(out.data()))
                    .map(|(gv, (s, m))| if *m > 0.0 { gv * s / m } else { 0.0 })
                    .collect()
            };
            vec![need(0).then(|| part(re)), need(1).then(|| part(im))]
        }
        Op::Atan2 { y, x } => {
            let (yd, xd) = (y.data(), x.data());
            let denom = |i: usize| {
                let d = xd[i] * xd[i] + yd[i] * yd[i];
                if d > 0.0 {
                    d
                } else {
                    f64::INFINITY
                }
            };
            let gy = need(0).then(|| (0..g.len()).map(|i| g[i] * xd[i] / denom(i)).collect());
            let gx = need(1).then(|| (0..g.len()).map(|i| -g[i] * yd[i] / denom(i)).collect());
            vec![gy, gx]
        }
        Op::Sum { shape } => vec![Some(vec![g[0]; numel(shape)])],
        Op::Mean { input, out, count } => {
            let map = broadcast_indices(input, out);
            let c = *count as f64;
            vec![Some(map.iter().map(|&j| g[j] / c).collect())]
        }
        Op::MatMul { a, w } => {
            let (rows, inner, cols, _) = matmul_dims(a.shape(), w.shape())?;
            let ga = need(0).then(|| {
                let wt = transpose_last(w.data(), 1, inner, cols);
                let mut out = vec![0.0; rows * inner];
                matmul_into(g, &wt, rows, cols, inner, &mut out);
                out
            });
            let gw = need(1).then(|| {
                let at = transpose_last(a.data(), 1, rows, inner);
                let mut out = vec![0.0; inner * cols];
                matmul_into(&at, g, inner, rows, cols, &mut out);
                out
            });
            vec![ga, gw]
        }
        Op::BmmNt { a, b } => {
            let (bsz, l, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let m = b.shape()[1];
            let ga = need(0).then(|| bmm(g, b.data(), bsz, l, m, d));
            let gb = need(1).then(|| {
                let gt = transpose_last(g, bsz, l, m);
                bmm(&gt, a.data(), bsz, m, l, d)
            });
            vec![ga, gb]
        }
        Op::Bmm { a, b } => {
            let (bsz, l, m) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let d = b.shape()[2];
            let ga = need(0).then(|| bmm_nt(g, b.data(), bsz, l, m, d));
            let gb = need(1).then(|| {
                let at = transpose_last(a.data(), bsz, l, m);
                bmm(&at, g, bsz, m, l, d)
            });
            vec![ga, gb]
        }
        Op::Softmax { y } => {
            let last = *y.shape().last().unwrap_or(&1);
            let mut out = vec![0.0; g.len()];
            for ((o, gr), yr) in out
                .chunks_mut(last)
                .zip(g.chunks(last))
                .zip(y.data().chunks(last))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((ov, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                    *ov = yv * (gv - dot);
                }
            }
            vec![Some(out)]
        }
        Op::Conv2d { x, w, geom } => {
            let gx = if need(0) {
                Some(conv::conv2d_input_grad(g, x.shape(), w.data(), w.shape(), geom)?)
            } else {
                None
            };
            let gw = if need(1) {
                Some(conv::conv2d_weight_grad(g, x.data(), x.shape(), w.shape(), geom)?)
            } else {
                None
            };
            vec![gx, gw]
        }
        Op::ConvT2d { x, w, geom } => {
            let (oh, ow) = conv::transposed_shape(x.shape(), w.shape(), geom)?;
            let out_shape = [w.shape()[1], oh, ow];
            let gx = if need(0) {
                Some(conv::conv2d(g, &out_shape, w.data(), w.shape(), geom)?.0)
            } else {
                None
            };
            let gw = if need(1) {
                Some(conv::conv2d_weight_grad(x.data(), g, &out_shape, w.shape(), geom)?)
            } else {
                None
            };
            vec![gx, gw]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Permute { input, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| input[p]).collect();
            vec![Some(permute_data(g, &out_shape, &inv).0)]
        }
        Op::Concat { axis, sizes, out } => {
            let (outer, total, inner) = split_axis(out, *axis);
            let mut offset = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(k, &sz)| {
                    let r = need(k).then(|| {
                        let mut v = Vec::with_capacity(outer * sz * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            v.extend_from_slice(&g[base..base + sz * inner]);
                        }
                        v
                    });
                    offset += sz;
                    r
                })
                .collect()
        }
        Op::Slice { axis, start, input } => {
            let (outer, n, inner) = split_axis(input, *axis);
            let len = g.len() / (outer * inner).max(1);
            let mut out = vec![0.0; numel(input)];
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                out[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(out)]
        }
        Op::Stft { engine, len, frames } => {
            let half = g.len() / 2;
            vec![Some(engine.analyze_adjoint(&g[..half], &g[half..], *frames, *len))]
        }
        Op::Istft { engine, frames } => {
            let (re, mut im) = engine.synthesize_adjoint(g, *frames);
            let mut out = re;
            out.append(&mut im);
            vec![Some(out)]
        }
        Op::Custom { inputs, out, adjoint } => {
            let refs: Vec<&RealTensor> = inputs.iter().map(|r| r.as_ref()).collect();
            adjoint(g, &refs, out).into_iter().map(Some).collect()
        }
    })
}
