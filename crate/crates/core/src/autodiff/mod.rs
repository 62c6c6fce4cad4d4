//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; every primitive records its inputs so that
//! [`Tape::backward`] can replay the computation in reverse. Reductions run
//! sequentially in a fixed order, so results are bit-reproducible.

mod param;
mod tape;
mod tensor;

pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, NormStats, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("axis {0} is invalid for a matrix")]
    InvalidAxis(usize),
    #[error("index {index} out of range {len} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward needs a 1x1 output, got {0:?}")]
    NotScalar([usize; 2]),
}

/// Adam optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self::with_betas(lr, T::of(0.9), T::of(0.999), T::of(1e-8))
    }

    pub fn with_betas(lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update to every trainable parameter, then zeroes all
    /// gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &g), mk), vk) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mk = self.beta1 * *mk + (T::one() - self.beta1) * g;
                *vk = self.beta2 * *vk + (T::one() - self.beta2) * g * g;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
    }
}

/// Functional form of one Adam step over a parameter store.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut Adam<T>) {
    state.step(store);
}

fn relative_error<T: Scalar>(ad: T, fd: T) -> T {
    (ad - fd).abs() / T::one().max(fd.abs())
}

/// Compares the tape gradient of `f` at `x` with central finite differences.
/// Returns `max |g_ad - g_fd| / max(1, |g_fd|)` over all components.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T, AutodiffError>
where
    T: Scalar,
    F: Fn(&Tape<T>, Var) -> Result<Var, AutodiffError>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let y = f(&tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let eval = |point: Tensor<T>| -> Result<T, AutodiffError> {
        let t = Tape::new();
        let v = t.leaf(point)?;
        let out = f(&t, v)?;
        Ok(t.scalar(out))
    };
    let two = T::of(2.0);
    let mut worst = T::zero();
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[k] += eps;
        let mut minus = x.clone();
        minus.data_mut()[k] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (two * eps);
        worst = worst.max(relative_error(analytic.data()[k], fd));
    }
    if !worst.is_finite() {
        return Err(AutodiffError::NonFiniteValue { op: "grad_check" });
    }
    Ok(worst)
}

/// Finite-difference check of the gradients `f` produces for every trainable
/// parameter of `store`. `f` records a scalar on the tape it is given.
pub fn grad_check_params<T, F>(store: &ParamStore<T>, f: F, eps: T) -> Result<T, AutodiffError>
where
    T: Scalar,
    F: Fn(&Tape<T>, &ParamStore<T>) -> Result<Var, AutodiffError>,
{
    let tape = Tape::new();
    let y = f(&tape, store)?;
    let grads = tape.backward(y)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    tape.accumulate_param_grads(&grads, &mut analytic);

    let eval = |s: &ParamStore<T>| -> Result<T, AutodiffError> {
        let t = Tape::new();
        let out = f(&t, s)?;
        Ok(t.scalar(out))
    };
    let two = T::of(2.0);
    let mut worst = T::zero();
    let mut probe = store.clone();
    for id in store.ids() {
        if !store.get(id).trainable {
            continue;
        }
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            probe.get_mut(id).value.data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig;
            let fd = (up - down) / (two * eps);
            worst = worst.max(relative_error(analytic.get(id).grad.data()[k], fd));
        }
    }
    if !worst.is_finite() {
        return Err(AutodiffError::NonFiniteValue { op: "grad_check" });
    }
    Ok(worst)
}
