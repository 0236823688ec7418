//! Differentiable execution.
//!
//! Every model in this crate is written once against [`Graph`]. [`Eager`]
//! evaluates immediately and keeps nothing; [`Tape`] records each primitive
//! with its saved activations so [`Tape::backward`] can run reverse mode.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::{check_model_gradients, finite_diff_check, GradCheckReport, DEFAULT_FD_EPS, MIN_FD_SAMPLES};
pub use optim::{adam_step, warmup_lr, AdamConfig, OptimState, TrainLogEntry};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::numerics::{self, Activation, NormKind};
use crate::params::Parameters;
use crate::ssm::{self, ScanMode, SsmInputs};
use crate::tensor::Tensor;

/// Primitive operations shared by the eager evaluator and the tape.
pub trait Graph {
    type T: Clone;

    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Tensor;
    /// Non-learnable value (data, targets, constants).
    fn input(&mut self, t: Tensor) -> Self::T;
    /// Learnable tensor. Repeated calls with the same tensor yield the same handle.
    fn param(&mut self, t: &Tensor) -> Self::T;

    fn matmul(&mut self, x: &Self::T, w: &Self::T) -> Result<Self::T>;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add_bias(&mut self, x: &Self::T, bias: &Self::T) -> Result<Self::T>;
    fn scale(&mut self, x: &Self::T, c: f64) -> Self::T;
    fn activation(&mut self, x: &Self::T, kind: Activation) -> Self::T;
    fn exp(&mut self, x: &Self::T) -> Self::T;
    fn conv1d(&mut self, x: &Self::T, w: &Self::T, b: &Self::T, causal: bool) -> Result<Self::T>;
    fn normalize(
        &mut self,
        x: &Self::T,
        kind: NormKind,
        gain: &Self::T,
        bias: Option<&Self::T>,
        eps: f64,
    ) -> Result<Self::T>;
    fn reverse_time(&mut self, x: &Self::T) -> Self::T;
    #[allow(clippy::too_many_arguments)]
    fn selective_scan(
        &mut self,
        u: &Self::T,
        delta: &Self::T,
        a: &Self::T,
        b_sel: &Self::T,
        c_sel: &Self::T,
        d: &Self::T,
    ) -> Result<Self::T>;
    fn attention(&mut self, q: &Self::T, k: &Self::T, v: &Self::T, heads: usize, causal: bool) -> Result<Self::T>;
    fn softmax(&mut self, x: &Self::T) -> Self::T;
    fn glu(&mut self, x: &Self::T) -> Result<Self::T>;
    fn mean_time(&mut self, x: &Self::T) -> Result<Self::T>;
    /// Inverted dropout; identity unless the backend is in training mode.
    fn dropout(&mut self, x: &Self::T, p: f64) -> Self::T;
    /// Elementwise `x^alpha` for `x >= 0`.
    fn pow(&mut self, x: &Self::T, alpha: f64) -> Result<Self::T>;
    fn sum(&mut self, x: &Self::T) -> Self::T;
    fn mean(&mut self, x: &Self::T) -> Self::T;
    /// Mean binary cross-entropy of logits against 0/1 targets.
    fn bce_with_logits(&mut self, logits: &Self::T, targets: &Self::T) -> Result<Self::T>;
}

/// A scalar loss of a parameter set, written once for any backend.
pub trait Objective<P: ?Sized> {
    fn loss<G: Graph>(&self, g: &mut G, params: &P) -> Result<G::T>;
}

/// Gradients of every tensor in `params`, in traversal order.
pub fn param_grads<P: Parameters + ?Sized>(tape: &Tape, grads: &Gradients, params: &P) -> Vec<Tensor> {
    let mut out = Vec::new();
    params.visit(&mut |_, t| out.push(tape.param_grad(grads, t)));
    out
}

/// Records the loss on `tape`, runs reverse mode and returns
/// `(loss, per-parameter gradients)`.
pub fn value_and_grad<P, O>(params: &P, obj: &O, tape: &mut Tape) -> Result<(f64, Vec<Tensor>)>
where
    P: Parameters + ?Sized,
    O: Objective<P> + ?Sized,
{
    let loss = obj.loss(tape, params)?;
    let value = tape.get(loss)?.item();
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    Ok((value, param_grads(tape, &grads, params)))
}

/// Loss value through the eager backend.
pub fn eager_loss<P, O>(params: &P, obj: &O, scan_mode: ScanMode) -> Result<f64>
where
    P: Parameters + ?Sized,
    O: Objective<P> + ?Sized,
{
    let mut g = Eager::with_scan_mode(scan_mode);
    let loss = obj.loss(&mut g, params)?;
    Ok(loss.item())
}

/// Euclidean norm over all gradient entries.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn check_pow(x: &Tensor, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("exponent must lie in (0, 1], got {alpha}")));
    }
    if let Some(v) = x.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::Domain(format!("power-law input must be non-negative, found {v}")));
    }
    Ok(())
}

pub(crate) fn bce_value(z: &Tensor, t: &Tensor) -> Result<Tensor> {
    z.expect_same_shape(t)?;
    let n = z.len() as f64;
    let s: f64 = z
        .data()
        .iter()
        .zip(t.data())
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(Tensor::scalar(s / n))
}

/// Immediate evaluation.
///
/// Also tallies multiply-accumulates of the contraction primitives (matmul,
/// convolution taps, scan state updates and readout, attention scores and
/// mixing); elementwise work is not counted.
#[derive(Clone, Debug, Default)]
pub struct Eager {
    pub scan_mode: ScanMode,
    macs: u64,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_scan_mode(scan_mode: ScanMode) -> Self {
        Self { scan_mode, macs: 0 }
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }
}

impl Graph for Eager {
    type T = Tensor;

    fn value<'a>(&'a self, t: &'a Tensor) -> &'a Tensor {
        t
    }

    fn input(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn matmul(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let out = numerics::matmul(x, w)?;
        self.macs += (x.len() * w.shape()[1]) as u64;
        Ok(out)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, |x, y| x * y)
    }

    fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        numerics::add_bias(x, bias)
    }

    fn scale(&mut self, x: &Tensor, c: f64) -> Tensor {
        x.map(|v| v * c)
    }

    fn activation(&mut self, x: &Tensor, kind: Activation) -> Tensor {
        numerics::activation(x, kind)
    }

    fn exp(&mut self, x: &Tensor) -> Tensor {
        x.map(f64::exp)
    }

    fn conv1d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, causal: bool) -> Result<Tensor> {
        let out = numerics::depthwise_conv1d(x, w, b, causal)?;
        self.macs += (x.len() * w.shape()[1]) as u64;
        Ok(out)
    }

    fn normalize(&mut self, x: &Tensor, kind: NormKind, gain: &Tensor, bias: Option<&Tensor>, eps: f64) -> Result<Tensor> {
        numerics::normalize(x, kind, gain, bias, eps)
    }

    fn reverse_time(&mut self, x: &Tensor) -> Tensor {
        numerics::reverse_time(x)
    }

    fn selective_scan(&mut self, u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<Tensor> {
        let inp = SsmInputs {
            u: u.clone(),
            delta: delta.clone(),
            a: a.clone(),
            b_sel: b.clone(),
            c_sel: c.clone(),
            d: d.clone(),
        };
        let out = ssm::selective_scan(&inp, self.scan_mode)?;
        self.macs += 3 * (u.len() * a.shape()[1]) as u64;
        Ok(out)
    }

    fn attention(&mut self, q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> Result<Tensor> {
        let out = numerics::attention(q, k, v, heads, causal)?;
        let (b, l, d) = q.dims3()?;
        let pairs: usize = (0..l).map(|i| numerics::attended(i, l, causal)).sum();
        self.macs += (2 * b * pairs * d) as u64;
        Ok(out)
    }

    fn softmax(&mut self, x: &Tensor) -> Tensor {
        numerics::softmax(x)
    }

    fn glu(&mut self, x: &Tensor) -> Result<Tensor> {
        numerics::glu(x)
    }

    fn mean_time(&mut self, x: &Tensor) -> Result<Tensor> {
        numerics::mean_time(x)
    }

    fn dropout(&mut self, x: &Tensor, _p: f64) -> Tensor {
        x.clone()
    }

    fn pow(&mut self, x: &Tensor, alpha: f64) -> Result<Tensor> {
        check_pow(x, alpha)?;
        Ok(x.map(|v| v.powf(alpha)))
    }

    fn sum(&mut self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.sum())
    }

    fn mean(&mut self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.sum() / x.len() as f64)
    }

    fn bce_with_logits(&mut self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        bce_value(logits, targets)
    }
}
