//! Small building blocks shared by the GNN layers, policy heads and flows:
//! a forward-pass context, dense layers, MLPs and batch normalization.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, NormStats, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Everything a forward pass needs: the tape to record on, the weights, and
/// whether batch norm normalizes with batch (training) or running statistics.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    pub train: bool,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

struct BnUpdate<T> {
    mean_id: ParamId,
    var_id: ParamId,
    mean: Tensor<T>,
    var: Tensor<T>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        Forward {
            tape,
            store,
            train,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Evaluation-mode pass (running batch-norm statistics).
    pub fn eval(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self::new(tape, store, false)
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// Folds the batch statistics seen during a training pass into the
    /// running statistics of `store`.
    pub fn apply_bn_updates(&self, store: &mut ParamStore<T>) {
        let m = T::of(BN_MOMENTUM);
        for u in self.bn_updates.borrow().iter() {
            for (id, batch) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
                let old = store.value(id).clone();
                let new = old.zip_map(batch, |o, b| (T::one() - m) * o + m * b);
                store.set_value(id, new);
            }
        }
    }
}

/// Activation applied between MLP layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &Tape<T>, x: Var) -> Result<Var, AutodiffError> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Glorot-uniform initialization of an `rows x cols` matrix.
pub fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::of(rng.random_range(-limit..limit)))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

/// Dense layer `x W + b` with `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, in_dim, out_dim));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, out_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var, AutodiffError> {
        let y = f.tape.matmul(x, f.param(self.w))?;
        match self.b {
            Some(b) => f.tape.add(y, f.param(b)),
            None => Ok(y),
        }
    }
}

/// Stack of [`Linear`] layers with an activation between consecutive layers
/// (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(store, &format!("{name}.{k}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var, AutodiffError> {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            if k > 0 {
                h = self.activation.apply(f.tape, h)?;
            }
            h = layer.forward(f, h)?;
        }
        Ok(h)
    }
}

/// Batch normalization over rows with learnable affine parameters and
/// running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(1, dim)),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::filled(1, dim, T::one())),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var, AutodiffError> {
        let (gamma, beta) = (f.param(self.gamma), f.param(self.beta));
        let eps = T::of(BN_EPS);
        if f.train {
            let (y, stats) = f.tape.batch_norm(x, gamma, beta, NormStats::Batch, eps)?;
            // An empty batch carries no statistics worth folding in.
            if f.tape.shape(x)[0] > 0 {
                if let Some((mean, var)) = stats {
                    f.bn_updates.borrow_mut().push(BnUpdate {
                        mean_id: self.running_mean,
                        var_id: self.running_var,
                        mean,
                        var,
                    });
                }
            }
            Ok(y)
        } else {
            let stats = NormStats::Running {
                mean: f.store.value(self.running_mean),
                var: f.store.value(self.running_var),
            };
            Ok(f.tape.batch_norm(x, gamma, beta, stats, eps)?.0)
        }
    }
}

/// Row-wise log-softmax of a column of logits within segments: entry `k`
/// is normalized against every entry with the same `seg[k]`.
pub fn segment_log_softmax<T: Scalar>(
    tape: &Tape<T>,
    logits: Var,
    seg: std::rc::Rc<[usize]>,
    segments: usize,
) -> Result<Var, AutodiffError> {
    let max = tape.scatter_max(logits, seg.clone(), segments)?;
    let max = constant_copy(tape, max)?;
    let shifted = tape.sub(logits, tape.index_select(max, seg.clone())?)?;
    let sums = tape.scatter_add(tape.exp(shifted)?, seg.clone(), segments)?;
    let log_sums = tape.log(tape.index_select(sums, seg.clone())?)?;
    tape.sub(shifted, log_sums)
}

/// Segment softmax of a logits matrix, normalized per column within segments.
pub fn segment_softmax<T: Scalar>(
    tape: &Tape<T>,
    logits: Var,
    seg: std::rc::Rc<[usize]>,
    segments: usize,
) -> Result<Var, AutodiffError> {
    let max = tape.scatter_max(logits, seg.clone(), segments)?;
    let max = constant_copy(tape, max)?;
    let e = tape.exp(tape.sub(logits, tape.index_select(max, seg.clone())?)?)?;
    let sums = tape.scatter_add(e, seg.clone(), segments)?;
    tape.div(e, tape.index_select(sums, seg)?)
}

/// Records the current value of `v` as a new constant (no gradient flows
/// back into `v`). Used for numerical-stability shifts.
pub fn constant_copy<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<Var, AutodiffError> {
    let value = tape.value(v).clone();
    tape.constant(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_params;
    use rand::SeedableRng;
    use std::rc::Rc;

    #[test]
    fn mlp_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], Activation::Tanh, &mut rng);
        let x = glorot::<f64>(&mut rng, 5, 3);
        let err = grad_check_params(
            &store,
            |tape, s| {
                let f = Forward::eval(tape, s);
                let xv = tape.constant(x.clone())?;
                let y = mlp.forward(&f, xv)?;
                tape.sum_all(tape.mul(y, y)?)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn segment_log_softmax_normalizes_each_segment() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::column(vec![1.0, 2.0, 3.0, -1.0, 0.5])).unwrap();
        let seg: Rc<[usize]> = Rc::from(vec![0, 0, 1, 1, 1]);
        let y = segment_log_softmax(&tape, x, seg, 2).unwrap();
        let v = tape.value(y).clone();
        let s0: f64 = v.data()[..2].iter().map(|x| x.exp()).sum();
        let s1: f64 = v.data()[2..].iter().map(|x| x.exp()).sum();
        assert!((s0 - 1.0).abs() < 1e-12 && (s1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn segment_log_softmax_grad_check() {
        let x = Tensor::column(vec![0.3, -0.2, 1.1, 0.7, -0.4, 0.05]);
        let seg: Rc<[usize]> = Rc::from(vec![0, 1, 0, 1, 1, 2]);
        let w = Tensor::column(vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7]);
        let err = crate::autodiff::grad_check(
            |tape, xv| {
                let y = segment_log_softmax(tape, xv, seg.clone(), 3)?;
                let wv = tape.constant(w.clone())?;
                tape.sum_all(tape.mul(y, wv)?)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn batch_norm_running_update() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, true);
        let x = tape.constant(Tensor::column(vec![1.0, 3.0])).unwrap();
        bn.forward(&f, x).unwrap();
        let mut updated = store.clone();
        f.apply_bn_updates(&mut updated);
        assert!((updated.value(bn.running_mean).item() - 0.2).abs() < 1e-12);
        // unbiased var of {1,3} = 2 -> 0.9 * 1 + 0.1 * 2
        assert!((updated.value(bn.running_var).item() - 1.1).abs() < 1e-12);
    }
}
