//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation executed during a forward pass as a node
//! holding its output value. [`Tape::backward`] replays the nodes in reverse
//! order and accumulates adjoints. Trainable tensors live in a [`ParamStore`];
//! they are copied onto a tape the first time they are used and their
//! gradients are accumulated back into the store on every backward call.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

pub mod gradcheck;

pub use gradcheck::{finite_diff_check, finite_diff_check_where, GradCheckReport};

/// Additive offset applied to masked logits before normalisation.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range in {op} (extent {extent})")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("softmax slice {slice} is fully masked")]
    DegenerateMask { slice: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor data has {len} values but shape {shape:?} needs {expected}")]
    DataLength {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} {:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::DataLength {
                len: data.len(),
                expected,
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `1 × n` row vector.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len().max(1)],
            data: if values.is_empty() {
                vec![0.0]
            } else {
                values.to_vec()
            },
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Element `(i, j)` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data[i * cols + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Handle to a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub requires_grad: bool,
    /// Accumulated gradient; `None` until a backward pass reaches this tensor.
    pub grad: Option<Tensor>,
}

/// Named, ordered collection of trainable tensors.
///
/// Parameters are kept in registration order, which is also the order used
/// for checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            requires_grad: true,
            grad: None,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Clears every accumulated gradient.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn accumulate_grad(&mut self, id: ParamId, shape: &[usize], adj: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (d, a) in g.data.iter_mut().zip(adj) {
                    *d += a;
                }
            }
            None => {
                p.grad = Some(Tensor {
                    shape: shape.to_vec(),
                    data: adj.to_vec(),
                })
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleShift(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log { x: Var, floor: f64 },
    Softmax { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    Pick { x: Var, indices: Vec<usize> },
    ScatterAdd { x: Var, indices: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MaxAxis { x: Var, argmax: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so the node list is already in
/// topological order; backward visits it once, from the end.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Tensor>,
    sigmoid_adjoint_scale: Option<f64>,
}

/// Outer/axis/inner extents used by the axis-wise kernels.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into a tensor of shape `input`
/// broadcast to `out`.
fn broadcast_offsets(out: &[usize], input: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if out == input {
        return (0..n).collect();
    }
    if input.iter().product::<usize>() == 1 {
        return vec![0; n];
    }
    let rank = out.len();
    let pad = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for k in (0..rank).rev() {
        let d = if k >= pad { input[k - pad] } else { 1 };
        strides[k] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    let mut idx = vec![0usize; rank];
    let mut offsets = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for k in (0..rank).rev() {
            idx[k] += 1;
            off += strides[k];
            if idx[k] < out[k] {
                break;
            }
            off -= strides[k] * out[k];
            idx[k] = 0;
        }
    }
    offsets
}

/// Adjoint buffer of `v`, allocated on first use; `None` for constants.
fn adjoint_slot<'a>(
    adj: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for a non-parameter leaf created with
    /// `requires_grad = true`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    /// Test hook: scales the sigmoid adjoint so gradient checks can be shown
    /// to catch a wrong derivative.
    #[doc(hidden)]
    pub fn corrupt_sigmoid_adjoint(&mut self, scale: f64) {
        self.sigmoid_adjoint_scale = Some(scale);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Puts a parameter on the tape, reusing the node if it is already there.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(
            p.value.clone(),
            Op::Leaf { param: Some(id) },
            p.requires_grad,
        );
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::Axis { axis: 1, shape: s });
        }
        let (m, n) = (s[0], s[1]);
        let av = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::Transpose(a),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: self.value(a).data.clone(),
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| AutodiffError::Shape {
            op: name,
            left: sa.to_vec(),
            right: sb.to_vec(),
        })?;
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let data = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&out_shape, sa);
            let ob = broadcast_offsets(&out_shape, sb);
            oa.iter().zip(&ob).map(|(&i, &j)| f(av[i], bv[j])).collect()
        };
        Ok((
            Tensor {
                shape: out_shape,
                data,
            },
            self.rg(a) || self.rg(b),
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.map(x, |v| scale * v + shift);
        let rg = self.rg(x);
        self.push(value, Op::ScaleShift(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.scale_shift(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale_shift(x, -1.0, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.scale_shift(x, -1.0, 1.0)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[x.0].value;
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::exp);
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.log_floor(x, 0.0)
    }

    /// `ln(max(x, floor))`; the gradient is zero wherever the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        let value = self.map(x, |v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(value, Op::Log { x, floor }, rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax along `axis` where entries with `mask == false` are excluded.
    ///
    /// Masked logits receive [`MASK_NEG`] before normalisation and their
    /// outputs are then set to exactly zero.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.shape.len() {
            return Err(AutodiffError::Axis {
                axis,
                shape: t.shape.clone(),
            });
        }
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(AutodiffError::Shape {
                    op: "masked_softmax",
                    left: t.shape.clone(),
                    right: vec![m.len()],
                });
            }
        }
        let (outer, n, inner) = split_axis(&t.shape, axis);
        let mut out = t.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let keep = |k: usize| mask.is_none_or(|m| m[at(k)]);
                if !(0..n).any(keep) {
                    return Err(AutodiffError::DegenerateMask { slice: o * inner + i });
                }
                let mut max = f64::NEG_INFINITY;
                for k in 0..n {
                    if !keep(k) {
                        out[at(k)] += MASK_NEG;
                    }
                    max = max.max(out[at(k)]);
                }
                let mut total = 0.0;
                for k in 0..n {
                    let e = (out[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[at(k)] = if keep(k) { out[at(k)] / total } else { 0.0 };
                }
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Concatenation along `axis`; every other extent must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    left: vec![],
                    right: vec![],
                })
            }
        };
        if axis >= first.len() {
            return Err(AutodiffError::Axis { axis, shape: first });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = &self.nodes[v.0].value;
                let block = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.shape.len() {
            return Err(AutodiffError::Axis {
                axis,
                shape: t.shape.clone(),
            });
        }
        if len == 0 || start + len > t.shape[axis] {
            return Err(AutodiffError::Index {
                op: "slice",
                index: start + len,
                extent: t.shape[axis],
            });
        }
        let (outer, n, inner) = split_axis(&t.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&t.data[base..base + len * inner]);
        }
        let mut shape = t.shape.clone();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, axis, start }, rg))
    }

    /// Rows of a 2-D `table`, in `indices` order.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.shape.len() != 2 {
            return Err(AutodiffError::Axis {
                axis: 0,
                shape: t.shape.clone(),
            });
        }
        let (rows, cols) = (t.shape[0], t.shape[1]);
        if indices.is_empty() {
            return Err(AutodiffError::Index {
                op: "gather_rows",
                index: 0,
                extent: 0,
            });
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(&t.data[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), cols],
                data,
            },
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Selects flat elements; the result has shape `[indices.len()]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= t.numel() {
                return Err(AutodiffError::Index {
                    op: "pick",
                    index: i,
                    extent: t.numel(),
                });
            }
            data.push(t.data[i]);
        }
        if data.is_empty() {
            return Err(AutodiffError::Index {
                op: "pick",
                index: 0,
                extent: 0,
            });
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![data.len()],
                data,
            },
            Op::Pick {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `out[indices[k]] += x[k]`; the result is a `1 × len` row.
    pub fn scatter_add(&mut self, x: Var, indices: &[usize], len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if indices.len() != t.numel() {
            return Err(AutodiffError::Shape {
                op: "scatter_add",
                left: t.shape.clone(),
                right: vec![indices.len()],
            });
        }
        let mut data = vec![0.0; len];
        for (&i, &v) in indices.iter().zip(&t.data) {
            if i >= len {
                return Err(AutodiffError::Index {
                    op: "scatter_add",
                    index: i,
                    extent: len,
                });
            }
            data[i] += v;
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![1, len],
                data,
            },
            Op::ScatterAdd {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Maximum along the last axis of a matrix, keeping that axis with extent
    /// one. The gradient flows to the first maximal entry of each row.
    pub fn max_last_axis(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 {
            return Err(AutodiffError::Axis {
                axis: 1,
                shape: t.shape.clone(),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut argmax = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m);
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            data.push(row[best]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![m, 1],
                data,
            },
            Op::MaxAxis { x, argmax },
            rg,
        ))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Sum of several one-element tensors.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let flat: Vec<Var> = xs
            .iter()
            .map(|&v| {
                let n = self.value(v).numel();
                self.reshape(v, &[n])
            })
            .collect::<Result<_>>()?;
        let c = self.concat(&flat, 0)?;
        Ok(self.sum(c))
    }

    /// Reverse pass from a one-element `loss`.
    ///
    /// Parameter gradients are added into `store`; gradients of other leaves
    /// that require them are added into this tape. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if let Op::Leaf { param } = node.op {
                match param {
                    Some(id) => store.accumulate_grad(id, &node.value.shape, &g),
                    None => {
                        let shape = node.value.shape.clone();
                        let entry = self.leaf_grads.entry(i).or_insert_with(|| Tensor {
                            shape,
                            data: vec![0.0; g.len()],
                        });
                        for (d, a) in entry.data.iter_mut().zip(&g) {
                            *d += a;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        macro_rules! with_buf {
            ($v:expr, |$b:ident| $body:block) => {
                if let Some($b) = adjoint_slot(adj, nodes, $v) {
                    $body
                }
            };
        }
        match &nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                with_buf!(*a, |ga| {
                    // ga = g · bᵀ
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for (x, y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            ga[r * k + p] += s;
                        }
                    }
                });
                with_buf!(*b, |gb| {
                    // gb = aᵀ · g
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av.data[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (o, y) in gbrow.iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape[1], out.shape[0]);
                with_buf!(*a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Reshape(a) => with_buf!(*a, |ga| {
                for (o, x) in ga.iter_mut().zip(g) {
                    *o += x;
                }
            }),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let op = &nodes[i].op;
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let oa = broadcast_offsets(&out.shape, &va.shape);
                let ob = broadcast_offsets(&out.shape, &vb.shape);
                with_buf!(*a, |ga| {
                    for (k, &gk) in g.iter().enumerate() {
                        ga[oa[k]] += match op {
                            Op::Mul(..) => gk * vb.data[ob[k]],
                            _ => gk,
                        };
                    }
                });
                with_buf!(*b, |gb| {
                    for (k, &gk) in g.iter().enumerate() {
                        gb[ob[k]] += match op {
                            Op::Mul(..) => gk * va.data[oa[k]],
                            Op::Sub(..) => -gk,
                            _ => gk,
                        };
                    }
                });
            }
            Op::ScaleShift(x, s) => with_buf!(*x, |gx| {
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += s * v;
                }
            }),
            Op::Sigmoid(x) => {
                let scale = self.sigmoid_adjoint_scale.unwrap_or(1.0);
                with_buf!(*x, |gx| {
                    for ((o, y), v) in gx.iter_mut().zip(&out.data).zip(g) {
                        *o += scale * v * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => with_buf!(*x, |gx| {
                for ((o, y), v) in gx.iter_mut().zip(&out.data).zip(g) {
                    *o += v * (1.0 - y * y);
                }
            }),
            Op::Exp(x) => with_buf!(*x, |gx| {
                for ((o, y), v) in gx.iter_mut().zip(&out.data).zip(g) {
                    *o += v * y;
                }
            }),
            Op::Log { x, floor } => {
                let xv = &nodes[x.0].value.data;
                with_buf!(*x, |gx| {
                    for ((o, &xi), v) in gx.iter_mut().zip(xv).zip(g) {
                        if xi > *floor {
                            *o += v / xi;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(&out.shape, *axis);
                let y = &out.data;
                with_buf!(*x, |gx| {
                    for o in 0..outer {
                        for c in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + c;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&out.shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let e = nodes[v.0].value.shape[*axis];
                    with_buf!(v, |gv| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * e * inner;
                            for k in 0..e * inner {
                                gv[dst + k] += g[src + k];
                            }
                        }
                    });
                    offset += e;
                }
            }
            Op::Slice { x, axis, start } => {
                let full = &nodes[x.0].value.shape;
                let (outer, n, inner) = split_axis(full, *axis);
                let len = out.shape[*axis];
                with_buf!(*x, |gx| {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        for k in 0..len * inner {
                            gx[dst + k] += g[src + k];
                        }
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let cols = out.shape[1];
                with_buf!(*table, |gt| {
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            gt[idx * cols + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Pick { x, indices } => with_buf!(*x, |gx| {
                for (k, &idx) in indices.iter().enumerate() {
                    gx[idx] += g[k];
                }
            }),
            Op::ScatterAdd { x, indices } => with_buf!(*x, |gx| {
                for (k, &idx) in indices.iter().enumerate() {
                    gx[k] += g[idx];
                }
            }),
            Op::Sum(x) => with_buf!(*x, |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                with_buf!(*x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::MaxAxis { x, argmax } => {
                let n = nodes[x.0].value.shape[1];
                with_buf!(*x, |gx| {
                    for (r, &j) in argmax.iter().enumerate() {
                        gx[r * n + j] += g[r];
                    }
                });
            }
        }
    }
}
