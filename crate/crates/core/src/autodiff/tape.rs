use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::scalar::Scalar;

use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics used by [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a, T> {
    /// Normalize with the statistics of the current batch (training).
    Batch,
    /// Normalize with fixed running statistics (evaluation).
    Running {
        mean: &'a Tensor<T>,
        var: &'a Tensor<T>,
    },
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Sum(Var, usize),
    SumAll(Var),
    Mean(Var, usize),
    Max(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, T, T),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    IndexSelect(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    ScatterMax(Var, Rc<[usize]>),
    Gather(Var, Rc<[(usize, usize)]>),
    Narrow(Var, usize, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of a computation. Nodes are created in topological
/// order, so the backward pass is a single reverse sweep.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<Vec<(ParamId, Var)>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, lhs: [usize; 2], rhs: [usize; 2]) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs, rhs }
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2], AutodiffError> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(shape_err(op, a, b)),
    }
}

fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, shape: [usize; 2], f: impl Fn(T, T) -> T) -> Tensor<T> {
    let [r, c] = shape;
    let mut data = Vec::with_capacity(r * c);
    let (ar, ac, br, bc) = (a.rows() == 1, a.cols() == 1, b.rows() == 1, b.cols() == 1);
    for i in 0..r {
        for j in 0..c {
            let x = a.get(if ar { 0 } else { i }, if ac { 0 } else { j });
            let y = b.get(if br { 0 } else { i }, if bc { 0 } else { j });
            data.push(f(x, y));
        }
    }
    Tensor::from_vec(r, c, data).expect("shape computed")
}

fn check_axis(axis: usize) -> Result<(), AutodiffError> {
    if axis > 1 {
        Err(AutodiffError::InvalidAxis(axis))
    } else {
        Ok(())
    }
}

// Applies `f` to every line along `axis`: columns when axis = 0, rows when
// axis = 1. The closure receives the line's flat indices.
fn for_each_line<T: Scalar>(t: &Tensor<T>, axis: usize, mut f: impl FnMut(usize, &[usize])) {
    let [r, c] = t.shape();
    let mut idx = Vec::new();
    if axis == 0 {
        for j in 0..c {
            idx.clear();
            idx.extend((0..r).map(|i| i * c + j));
            f(j, &idx);
        }
    } else {
        for i in 0..r {
            idx.clear();
            idx.extend((0..c).map(|j| i * c + j));
            f(i, &idx);
        }
    }
}

fn reduced_shape(shape: [usize; 2], axis: usize) -> [usize; 2] {
    if axis == 0 {
        [1, shape[1]]
    } else {
        [shape[0], 1]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// The value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteValue { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var(nodes.len() - 1))
    }

    /// Records an input that gradients may be taken with respect to.
    pub fn leaf(&self, value: Tensor<T>) -> Result<Var, AutodiffError> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values that are not differentiated.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var, AutodiffError> {
        self.leaf(value)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.borrow().iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self
            .leaf(store.value(id).clone())
            .expect("stored parameters are finite");
        self.bound.borrow_mut().push((id, v));
        v
    }

    /// Adds the gradients of every bound trainable parameter into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for &(id, v) in self.bound.borrow().iter() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(v) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.cols() != y.rows() {
                return Err(shape_err("matmul", x.shape(), y.shape()));
            }
            x.matmul(y)
        };
        self.push("matmul", out, Op::MatMul(a, b))
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, AutodiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = broadcast_shape(name, x.shape(), y.shape())?;
            broadcast_zip(x, y, shape, f)
        };
        self.push(name, out, op)
    }

    /// Elementwise sum with row/column broadcasting of size-1 dimensions.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&self, a: Var, k: T) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|x| x * k);
        self.push("scale", out, Op::Scale(a, k))
    }

    pub fn neg(&self, a: Var) -> Result<Var, AutodiffError> {
        self.scale(a, -T::one())
    }

    pub fn transpose(&self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    /// Concatenates along rows (axis 0) or columns (axis 1).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        check_axis(axis)?;
        assert!(!parts.is_empty(), "concat of nothing");
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape();
            let mut rows = 0;
            let mut cols = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                if axis == 0 {
                    if s[1] != first[1] {
                        return Err(shape_err("concat", first, s));
                    }
                    rows += s[0];
                    cols = s[1];
                } else {
                    if s[0] != first[0] {
                        return Err(shape_err("concat", first, s));
                    }
                    cols += s[1];
                    rows = s[0];
                }
            }
            let mut data = Vec::with_capacity(rows * cols);
            if axis == 0 {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.data());
                }
            } else {
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(nodes[p.0].value.row_slice(r));
                    }
                }
            }
            Tensor::from_vec(rows, cols, data)?
        };
        self.push("concat", out, Op::Concat(parts.to_vec(), axis))
    }

    fn reduce(&self, a: Var, axis: usize, f: impl Fn(&[T]) -> T) -> Result<Tensor<T>, AutodiffError> {
        check_axis(axis)?;
        let x = self.value(a);
        let [r, c] = reduced_shape(x.shape(), axis);
        let mut out = Tensor::zeros(r, c);
        let data = x.data();
        let mut buf = Vec::new();
        for_each_line(&x, axis, |k, idx| {
            buf.clear();
            buf.extend(idx.iter().map(|&i| data[i]));
            out.data_mut()[k] = f(&buf);
        });
        Ok(out)
    }

    pub fn sum(&self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let out = self.reduce(a, axis, |xs| xs.iter().copied().sum())?;
        self.push("sum", out, Op::Sum(a, axis))
    }

    /// Sum of every element as a `1 x 1` tensor.
    pub fn sum_all(&self, a: Var) -> Result<Var, AutodiffError> {
        let total = self.value(a).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(total), Op::SumAll(a))
    }

    pub fn mean(&self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let out = self.reduce(a, axis, |xs| {
            xs.iter().copied().sum::<T>() / T::of_usize(xs.len().max(1))
        })?;
        self.push("mean", out, Op::Mean(a, axis))
    }

    pub fn max(&self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        if self.value(a).is_empty() {
            return Err(shape_err("max", self.shape(a), [0, 0]));
        }
        let out = self.reduce(a, axis, |xs| xs.iter().copied().fold(T::neg_infinity(), T::max))?;
        self.push("max", out, Op::Max(a, axis))
    }

    fn softmax_values(&self, a: Var, axis: usize, log: bool) -> Result<Tensor<T>, AutodiffError> {
        check_axis(axis)?;
        let x = self.value(a);
        let mut out = x.clone();
        let data = x.data();
        for_each_line(&x, axis, |_, idx| {
            let m = idx.iter().map(|&i| data[i]).fold(T::neg_infinity(), T::max);
            let z: T = idx.iter().map(|&i| (data[i] - m).exp()).sum();
            let lz = z.ln();
            for &i in idx {
                let shifted = data[i] - m;
                out.data_mut()[i] = if log { shifted - lz } else { shifted.exp() / z };
            }
        });
        Ok(out)
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let out = self.softmax_values(a, axis, false)?;
        self.push("softmax", out, Op::Softmax(a, axis))
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let out = self.softmax_values(a, axis, true)?;
        self.push("log_softmax", out, Op::LogSoftmax(a, axis))
    }

    pub fn relu(&self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", out, Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push("leaky_relu", out, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(T::tanh);
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(T::exp);
        self.push("exp", out, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(T::ln);
        self.push("log", out, Op::Log(a))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(T::sqrt);
        self.push("sqrt", out, Op::Sqrt(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push("clamp", out, Op::Clamp(a, lo, hi))
    }

    /// Column-wise batch normalization `gamma * (x - mean) / sqrt(var + eps) + beta`.
    ///
    /// With [`NormStats::Batch`] the biased batch statistics are used and the
    /// returned pair holds the batch mean and the unbiased batch variance for
    /// updating running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>), AutodiffError> {
        let (out, xhat, inv_std, batch_stats) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            let [n, c] = xv.shape();
            for t in [g, b] {
                if t.shape() != [1, c] {
                    return Err(shape_err("batch_norm", xv.shape(), t.shape()));
                }
            }
            let (mean, var, unbiased) = match stats {
                NormStats::Batch => {
                    let mut mean = vec![T::zero(); c];
                    let mut var = vec![T::zero(); c];
                    let nn = T::of_usize(n.max(1));
                    for r in 0..n {
                        for (m, &v) in mean.iter_mut().zip(xv.row_slice(r)) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= nn);
                    for r in 0..n {
                        for ((s, &v), &m) in var.iter_mut().zip(xv.row_slice(r)).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                    let denom = T::of_usize(n.saturating_sub(1).max(1));
                    let unbiased: Vec<T> = var.iter().map(|&s| s / denom).collect();
                    var.iter_mut().for_each(|s| *s /= nn);
                    (mean, var, Some(unbiased))
                }
                NormStats::Running { mean, var } => {
                    if mean.shape() != [1, c] || var.shape() != [1, c] {
                        return Err(shape_err("batch_norm", xv.shape(), mean.shape()));
                    }
                    (mean.data().to_vec(), var.data().to_vec(), None)
                }
            };
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = Tensor::zeros(n, c);
            let mut out = Tensor::zeros(n, c);
            for r in 0..n {
                for k in 0..c {
                    let h = (xv.get(r, k) - mean[k]) * inv_std[k];
                    xhat.set(r, k, h);
                    out.set(r, k, g.get(0, k) * h + b.get(0, k));
                }
            }
            let batch_stats = unbiased.map(|u| (Tensor::row(mean), Tensor::row(u)));
            (out, xhat, inv_std, batch_stats)
        };
        let batch = batch_stats.is_some();
        let v = self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
        )?;
        Ok((v, batch_stats))
    }

    fn check_indices(op: &'static str, idx: &[usize], len: usize) -> Result<(), AutodiffError> {
        match idx.iter().find(|&&i| i >= len) {
            Some(&index) => Err(AutodiffError::IndexOutOfRange { op, index, len }),
            None => Ok(()),
        }
    }

    /// Rows `a[idx[k]]` stacked in order.
    pub fn index_select(&self, a: Var, idx: Rc<[usize]>) -> Result<Var, AutodiffError> {
        let out = {
            let x = self.value(a);
            Self::check_indices("index_select", &idx, x.rows())?;
            let mut data = Vec::with_capacity(idx.len() * x.cols());
            for &i in idx.iter() {
                data.extend_from_slice(x.row_slice(i));
            }
            Tensor::from_vec(idx.len(), x.cols(), data)?
        };
        self.push("index_select", out, Op::IndexSelect(a, idx))
    }

    /// `out[idx[k]] += a[k]` into `segments` rows.
    pub fn scatter_add(&self, a: Var, idx: Rc<[usize]>, segments: usize) -> Result<Var, AutodiffError> {
        let out = {
            let x = self.value(a);
            if idx.len() != x.rows() {
                return Err(shape_err("scatter_add", x.shape(), [idx.len(), 1]));
            }
            Self::check_indices("scatter_add", &idx, segments)?;
            let c = x.cols();
            let mut out = Tensor::zeros(segments, c);
            for (k, &s) in idx.iter().enumerate() {
                let row = x.row_slice(k);
                for (o, &v) in out.data_mut()[s * c..(s + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        };
        self.push("scatter_add", out, Op::ScatterAdd(a, idx))
    }

    /// Column-wise maximum of the rows assigned to each segment; empty
    /// segments are zero. Gradients of tied maxima are split evenly.
    pub fn scatter_max(&self, a: Var, idx: Rc<[usize]>, segments: usize) -> Result<Var, AutodiffError> {
        let out = {
            let x = self.value(a);
            if idx.len() != x.rows() {
                return Err(shape_err("scatter_max", x.shape(), [idx.len(), 1]));
            }
            Self::check_indices("scatter_max", &idx, segments)?;
            let c = x.cols();
            let mut out = Tensor::filled(segments, c, T::neg_infinity());
            for (k, &s) in idx.iter().enumerate() {
                for (o, &v) in out.data_mut()[s * c..(s + 1) * c].iter_mut().zip(x.row_slice(k)) {
                    *o = o.max(v);
                }
            }
            out.data_mut()
                .iter_mut()
                .filter(|v| v.is_infinite())
                .for_each(|v| *v = T::zero());
            out
        };
        self.push("scatter_max", out, Op::ScatterMax(a, idx))
    }

    /// Picks `a[r][c]` for every pair, as a column.
    pub fn gather(&self, a: Var, at: Rc<[(usize, usize)]>) -> Result<Var, AutodiffError> {
        let out = {
            let x = self.value(a);
            let mut data = Vec::with_capacity(at.len());
            for &(r, c) in at.iter() {
                if r >= x.rows() || c >= x.cols() {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "gather",
                        index: r * x.cols() + c,
                        len: x.len(),
                    });
                }
                data.push(x.get(r, c));
            }
            Tensor::column(data)
        };
        self.push("gather", out, Op::Gather(a, at))
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..start + len`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let out = {
            let x = self.value(a);
            let [r, c] = x.shape();
            let extent = match axis {
                0 => r,
                1 => c,
                _ => return Err(AutodiffError::InvalidAxis(axis)),
            };
            if start + len > extent {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "narrow",
                    index: start + len,
                    len: extent,
                });
            }
            if axis == 0 {
                Tensor::from_vec(len, c, x.data()[start * c..(start + len) * c].to_vec())?
            } else {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&x.row_slice(i)[start..start + len]);
                }
                Tensor::from_vec(r, len, data)?
            }
        };
        self.push("narrow", out, Op::Narrow(a, axis, start))
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if shape != [1, 1] {
            return Err(AutodiffError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, gout.matmul_t(val(*b)));
                    acc(&mut grads, *b, val(*a).t_matmul(&gout));
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let [ar, ac] = val(*a).shape();
                    let [br, bc] = val(*b).shape();
                    acc(&mut grads, *a, gout.reduce_to(ar, ac));
                    let gb = gout.reduce_to(br, bc);
                    let gb = if matches!(node.op, Op::Sub(..)) { gb.map(|x| -x) } else { gb };
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let shape = gout.shape();
                    let gx = broadcast_zip(&gout, y, shape, |g, y| g * y);
                    let gy = broadcast_zip(&gout, x, shape, |g, x| g * x);
                    acc(&mut grads, *a, gx.reduce_to(x.rows(), x.cols()));
                    acc(&mut grads, *b, gy.reduce_to(y.rows(), y.cols()));
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let shape = gout.shape();
                    let gx = broadcast_zip(&gout, y, shape, |g, y| g / y);
                    // d(x/y)/dy = -out / y
                    let q = broadcast_zip(&node.value, y, shape, |o, y| o / y);
                    let gy = gout.zip_map(&q, |g, q| -g * q);
                    acc(&mut grads, *a, gx.reduce_to(x.rows(), x.cols()));
                    acc(&mut grads, *b, gy.reduce_to(y.rows(), y.cols()));
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(&mut grads, *a, gout.map(|g| g * k));
                }
                Op::Transpose(a) => acc(&mut grads, *a, gout.transpose()),
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let [r, c] = val(*p).shape();
                        let mut g = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                let v = if *axis == 0 {
                                    gout.get(offset + i, j)
                                } else {
                                    gout.get(i, offset + j)
                                };
                                g.set(i, j, v);
                            }
                        }
                        offset += if *axis == 0 { r } else { c };
                        acc(&mut grads, *p, g);
                    }
                }
                Op::Sum(a, axis) | Op::Mean(a, axis) => {
                    let x = val(*a);
                    let n = if *axis == 0 { x.rows() } else { x.cols() };
                    let k = if matches!(node.op, Op::Mean(..)) {
                        T::one() / T::of_usize(n.max(1))
                    } else {
                        T::one()
                    };
                    let mut g = Tensor::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        for j in 0..x.cols() {
                            let src = if *axis == 0 { gout.get(0, j) } else { gout.get(i, 0) };
                            g.set(i, j, src * k);
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SumAll(a) => {
                    let x = val(*a);
                    acc(&mut grads, *a, Tensor::filled(x.rows(), x.cols(), gout.item()));
                }
                Op::Max(a, axis) => {
                    let x = val(*a);
                    let mut g = Tensor::zeros(x.rows(), x.cols());
                    let xd = x.data();
                    for_each_line(x, *axis, |k, idx| {
                        let m = node.value.data()[k];
                        let ties = idx.iter().filter(|&&i| xd[i] == m).count();
                        let share = gout.data()[k] / T::of_usize(ties);
                        for &i in idx {
                            if xd[i] == m {
                                g.data_mut()[i] = share;
                            }
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Softmax(a, axis) => {
                    let y = &node.value;
                    let mut g = Tensor::zeros(y.rows(), y.cols());
                    for_each_line(y, *axis, |_, idx| {
                        let dot: T = idx.iter().map(|&i| gout.data()[i] * y.data()[i]).sum();
                        for &i in idx {
                            g.data_mut()[i] = y.data()[i] * (gout.data()[i] - dot);
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::LogSoftmax(a, axis) => {
                    let y = &node.value;
                    let mut g = Tensor::zeros(y.rows(), y.cols());
                    for_each_line(y, *axis, |_, idx| {
                        let total: T = idx.iter().map(|&i| gout.data()[i]).sum();
                        for &i in idx {
                            g.data_mut()[i] = gout.data()[i] - y.data()[i].exp() * total;
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let g = gout.zip_map(val(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                    acc(&mut grads, *a, g);
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let g = gout.zip_map(val(*a), |g, x| if x > T::zero() { g } else { g * s });
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let g = gout.zip_map(&node.value, |g, y| g * (T::one() - y * y));
                    acc(&mut grads, *a, g);
                }
                Op::Exp(a) => acc(&mut grads, *a, gout.zip_map(&node.value, |g, y| g * y)),
                Op::Log(a) => acc(&mut grads, *a, gout.zip_map(val(*a), |g, x| g / x)),
                Op::Sqrt(a) => {
                    let half = T::of(0.5);
                    let g = gout.zip_map(&node.value, |g, y| {
                        if y > T::zero() {
                            g * half / y
                        } else {
                            T::zero()
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let g = gout.zip_map(val(*a), |g, x| if x >= lo && x <= hi { g } else { T::zero() });
                    acc(&mut grads, *a, g);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let gm = val(*gamma);
                    let [n, c] = xhat.shape();
                    let mut dgamma = Tensor::zeros(1, c);
                    let mut dbeta = Tensor::zeros(1, c);
                    for r in 0..n {
                        for k in 0..c {
                            let g = gout.get(r, k);
                            dgamma.data_mut()[k] += g * xhat.get(r, k);
                            dbeta.data_mut()[k] += g;
                        }
                    }
                    let mut dx = Tensor::zeros(n, c);
                    if *batch {
                        let nn = T::of_usize(n.max(1));
                        for k in 0..c {
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for r in 0..n {
                                let d = gout.get(r, k) * gm.get(0, k);
                                sum_d += d;
                                sum_dx += d * xhat.get(r, k);
                            }
                            for r in 0..n {
                                let d = gout.get(r, k) * gm.get(0, k);
                                let v = inv_std[k] / nn * (nn * d - sum_d - xhat.get(r, k) * sum_dx);
                                dx.set(r, k, v);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for k in 0..c {
                                dx.set(r, k, gout.get(r, k) * gm.get(0, k) * inv_std[k]);
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                }
                Op::IndexSelect(a, idx) => {
                    let x = val(*a);
                    let c = x.cols();
                    let mut g = Tensor::zeros(x.rows(), c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &v) in g.data_mut()[i * c..(i + 1) * c].iter_mut().zip(gout.row_slice(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::ScatterAdd(a, idx) => {
                    let x = val(*a);
                    let mut data = Vec::with_capacity(x.len());
                    for &s in idx.iter() {
                        data.extend_from_slice(gout.row_slice(s));
                    }
                    acc(&mut grads, *a, Tensor::from_vec(x.rows(), x.cols(), data)?);
                }
                Op::ScatterMax(a, idx) => {
                    let x = val(*a);
                    let c = x.cols();
                    let segments = node.value.rows();
                    let mut ties = vec![0usize; segments * c];
                    for (k, &s) in idx.iter().enumerate() {
                        for j in 0..c {
                            if x.get(k, j) == node.value.get(s, j) {
                                ties[s * c + j] += 1;
                            }
                        }
                    }
                    let mut g = Tensor::zeros(x.rows(), c);
                    for (k, &s) in idx.iter().enumerate() {
                        for j in 0..c {
                            if x.get(k, j) == node.value.get(s, j) {
                                g.set(k, j, gout.get(s, j) / T::of_usize(ties[s * c + j]));
                            }
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Gather(a, at) => {
                    let x = val(*a);
                    let mut g = Tensor::zeros(x.rows(), x.cols());
                    for (k, &(r, c)) in at.iter().enumerate() {
                        let v = g.get(r, c) + gout.data()[k];
                        g.set(r, c, v);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Narrow(a, axis, start) => {
                    let x = val(*a);
                    let mut g = Tensor::zeros(x.rows(), x.cols());
                    let [gr, gc] = gout.shape();
                    for i in 0..gr {
                        for j in 0..gc {
                            let (r, c) = if *axis == 0 { (start + i, j) } else { (i, start + j) };
                            g.set(r, c, gout.get(i, j));
                        }
                    }
                    acc(&mut grads, *a, g);
                }
            }
            // Interior nodes do not keep their gradient.
        }
        Ok(Gradients { grads })
    }
}
