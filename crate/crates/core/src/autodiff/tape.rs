use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;

use super::{AutodiffError, ParameterSet, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param { trainable: bool },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Concat(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Softmax(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    RepeatRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Concat(_) => "concat",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Softmax(_) => "softmax",
            Op::Transpose(_) => "transpose",
            Op::SliceCols(..) => "slice_cols",
            Op::RepeatRows(_) => "repeat_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert list of tensor operations supporting one reverse sweep.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and the backward pass is a single reverse scan.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: BTreeMap<(bool, String), Var>,
}

/// Gradient slots for every node of a tape after [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `var`, or `None` if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.slots.get(var.0).and_then(|g| g.as_ref())
    }
}

fn rank2(t: &Tensor) -> bool {
    t.rank() == 2
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p((-x.abs()).exp())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}

/// Sums `g` down to `shape` when the forward op broadcast a scalar.
fn unbroadcast(g: Tensor, target: &Tensor) -> Tensor {
    if target.numel() == g.numel() {
        g
    } else {
        let mut t = Tensor::zeros(target.shape());
        t.data_mut()[0] = g.sum();
        t
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.push(value, Op::Constant)
    }

    /// Copies `v`'s value into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var, AutodiffError> {
        let value = self.value(v).clone();
        self.push(value, Op::Constant)
    }

    /// Records a trainable leaf not tied to any parameter set.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.push(value, Op::Param { trainable: true })
    }

    /// Binds a named parameter; repeated binds of the same name share a node.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var, AutodiffError> {
        self.bind(params, name, true)
    }

    /// Binds a named parameter as a stop-gradient leaf.
    pub fn frozen_param(
        &mut self,
        params: &ParameterSet,
        name: &str,
    ) -> Result<Var, AutodiffError> {
        self.bind(params, name, false)
    }

    /// Node already bound for `name` in the given mode, if any.
    pub fn bound(&self, name: &str, trainable: bool) -> Option<Var> {
        self.bound.get(&(trainable, String::from(name))).copied()
    }

    fn bind(
        &mut self,
        params: &ParameterSet,
        name: &str,
        trainable: bool,
    ) -> Result<Var, AutodiffError> {
        let key = (trainable, String::from(name));
        if let Some(&v) = self.bound.get(&key) {
            return Ok(v);
        }
        let value = params
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(String::from(name)))?
            .clone();
        let v = self.push(value, Op::Param { trainable })?;
        self.bound.insert(key, v);
        Ok(v)
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(ta.shape().to_vec())
        } else if tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        let shape = self.binary_shapes(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let pick = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        let data = (0..n).map(|i| f(pick(ta, i), pick(tb, i))).collect();
        let out = Tensor::new(shape, data)?;
        self.push(out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !rank2(ta) || !rank2(tb) || ta.cols() != tb.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = matmul(ta, tb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if !rank2(tx) || tb.numel() != tx.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % n];
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    /// Concatenates rank-2 tensors with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::EmptyConcat)?;
        let rows = self.value(*first).rows();
        for p in parts {
            let t = self.value(*p);
            if !rank2(t) || t.rows() != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::MeanAll(a))
    }

    fn reduce_axis(&self, a: Var, axis: usize) -> Result<Tensor, AutodiffError> {
        let t = self.value(a);
        if !rank2(t) || axis > 1 {
            return Err(AutodiffError::BadAxis {
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let (m, n) = (t.rows(), t.cols());
        Ok(if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                    *o += v;
                }
            }
            Tensor::new(vec![1, n], out)?
        } else {
            let out = (0..m).map(|i| t.row_slice(i).iter().sum()).collect();
            Tensor::new(vec![m, 1], out)?
        })
    }

    /// Sums a rank-2 tensor over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let out = self.reduce_axis(a, axis)?;
        self.push(out, Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let n = self.value(a).shape().get(axis).copied().unwrap_or(1) as f64;
        let out = self.reduce_axis(a, axis)?.map(|x| x / n);
        self.push(out, Op::MeanAxis(a, axis))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let n = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
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
        self.push(out, Op::Softmax(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if !rank2(t) {
            return Err(AutodiffError::BadAxis {
                axis: 1,
                shape: t.shape().to_vec(),
            });
        }
        let out = transpose(t);
        self.push(out, Op::Transpose(a))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if !rank2(t) || start + len > t.cols() || len == 0 {
            return Err(AutodiffError::BadSlice {
                start,
                len,
                shape: t.shape().to_vec(),
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        self.push(out, Op::SliceCols(a, start))
    }

    /// Tiles a `1 x n` row into `rows x n`.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if !rank2(t) || t.rows() != 1 || rows == 0 {
            return Err(AutodiffError::BadAxis {
                axis: 0,
                shape: t.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(rows * t.cols());
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, t.cols()], data)?;
        self.push(out, Op::RepeatRows(a))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        slots[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        fn acc(slots: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut slots[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Param { .. } | Op::Constant) {
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Constant | Op::Param { .. } => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut slots, *a, matmul(&g, &transpose(tb)));
                    acc(&mut slots, *b, matmul(&transpose(ta), &g));
                }
                Op::Add(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut slots, *a, unbroadcast(g.clone(), ta));
                    acc(&mut slots, *b, unbroadcast(g, tb));
                }
                Op::Sub(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut slots, *a, unbroadcast(g.clone(), ta));
                    acc(&mut slots, *b, unbroadcast(g.map(|x| -x), tb));
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let pick = |t: &Tensor, i: usize| {
                        if t.numel() == 1 {
                            t.data()[0]
                        } else {
                            t.data()[i]
                        }
                    };
                    let n = g.numel();
                    let is_mul = matches!(node.op, Op::Mul(..));
                    let mut ga = g.clone();
                    let mut gb = g;
                    for i in 0..n {
                        let (x, w) = (pick(ta, i), pick(tb, i));
                        let gi = ga.data()[i];
                        if is_mul {
                            ga.data_mut()[i] = gi * w;
                            gb.data_mut()[i] = gi * x;
                        } else {
                            ga.data_mut()[i] = gi / w;
                            gb.data_mut()[i] = -gi * x / (w * w);
                        }
                    }
                    acc(&mut slots, *a, unbroadcast(ga, ta));
                    acc(&mut slots, *b, unbroadcast(gb, tb));
                }
                Op::Scale(a, c) => acc(&mut slots, *a, g.map(|x| x * c)),
                Op::AddBias(x, b) => {
                    let n = g.cols();
                    let mut gb = Tensor::zeros(self.value(*b).shape());
                    for (i, v) in g.data().iter().enumerate() {
                        gb.data_mut()[i % n] += v;
                    }
                    acc(&mut slots, *b, gb);
                    acc(&mut slots, *x, g);
                }
                Op::Tanh(a) => acc(&mut slots, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut slots, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }))
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    acc(&mut slots, *a, g.zip_map(x, |g, x| g * sigmoid(x)))
                }
                Op::Exp(a) => acc(&mut slots, *a, g.zip_map(y, |g, y| g * y)),
                Op::Log(a) => {
                    let x = self.value(*a);
                    acc(&mut slots, *a, g.zip_map(x, |g, x| g / x))
                }
                Op::Sqrt(a) => acc(&mut slots, *a, g.zip_map(y, |g, y| g / (2.0 * y))),
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut slots, *p, Tensor::new(vec![rows, w], data)?);
                    }
                }
                Op::SumAll(a) => {
                    let s = g.item();
                    acc(&mut slots, *a, Tensor::full(self.value(*a).shape(), s))
                }
                Op::MeanAll(a) => {
                    let t = self.value(*a);
                    let s = g.item() / t.numel() as f64;
                    acc(&mut slots, *a, Tensor::full(t.shape(), s))
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let t = self.value(*a);
                    let (m, n) = (t.rows(), t.cols());
                    let div = if matches!(node.op, Op::MeanAxis(..)) {
                        t.shape()[*axis] as f64
                    } else {
                        1.0
                    };
                    let mut out = Tensor::zeros(t.shape());
                    for i in 0..m {
                        for j in 0..n {
                            let gv = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                            out.data_mut()[i * n + j] = gv / div;
                        }
                    }
                    acc(&mut slots, *a, out);
                }
                Op::Softmax(a) => {
                    let n = y.cols();
                    let mut out = g.clone();
                    for (orow, yrow) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: f64 = orow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for (o, yv) in orow.iter_mut().zip(yrow) {
                            *o = yv * (*o - dot);
                        }
                    }
                    acc(&mut slots, *a, out);
                }
                Op::Transpose(a) => acc(&mut slots, *a, transpose(&g)),
                Op::SliceCols(a, start) => {
                    let t = self.value(*a);
                    let (rows, cols, w) = (t.rows(), t.cols(), g.cols());
                    let mut out = Tensor::zeros(t.shape());
                    for r in 0..rows {
                        out.data_mut()[r * cols + start..r * cols + start + w]
                            .copy_from_slice(g.row_slice(r));
                    }
                    acc(&mut slots, *a, out);
                }
                Op::RepeatRows(a) => {
                    let n = g.cols();
                    let mut out = Tensor::zeros(self.value(*a).shape());
                    for (i, v) in g.data().iter().enumerate() {
                        out.data_mut()[i % n] += v;
                    }
                    acc(&mut slots, *a, out);
                }
            }
        }
        // stop-gradient leaves report nothing
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Constant | Op::Param { trainable: false }) {
                slots[i] = None;
            }
        }
        Ok(Gradients { slots })
    }

    /// Gradients for every parameter in `params`; unbound, unreachable and
    /// frozen parameters get zeros.
    pub fn param_grads(
        &self,
        grads: &Gradients,
        params: &ParameterSet,
    ) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .map(|(name, value)| {
                let g = self
                    .bound
                    .get(&(true, name.clone()))
                    .and_then(|v| grads.wrt(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
