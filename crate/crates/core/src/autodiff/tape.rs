//! Recording tape and reverse-mode adjoints.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{bce_value, check_pow, Graph};
use crate::error::{Error, Result};
use crate::numerics::{self, conv_left_pad, row_stats, sigmoid, Activation, NormKind};
use crate::ssm::{self, chunked_scan, readout, sequential_scan, ScanDims, ScanMode, SsmInputs};
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Exp(Var),
    Conv { x: Var, w: Var, b: Var, causal: bool },
    Norm { x: Var, gain: Var, bias: Option<Var>, kind: NormKind, eps: f64 },
    Reverse(Var),
    Scan { args: [Var; 6], mode: ScanMode },
    Attention { q: Var, k: Var, v: Var, heads: usize, causal: bool },
    Softmax(Var),
    Glu(Var),
    MeanTime(Var),
    Dropout { x: Var, mask: Tensor },
    Pow(Var, f64),
    Sum(Var),
    Mean(Var),
    Bce(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | Bce(a, b) => vec![*a, *b],
            Scale(x, _) | Act(x, _) | Exp(x) | Reverse(x) | Softmax(x) | Glu(x) | MeanTime(x) | Pow(x, _) | Sum(x)
            | Mean(x) => vec![*x],
            Dropout { x, .. } => vec![*x],
            Conv { x, w, b, .. } => vec![*x, *w, *b],
            Norm { x, gain, bias, .. } => {
                let mut v = vec![*x, *gain];
                v.extend(bias);
                v
            }
            Scan { args, .. } => args.to_vec(),
            Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Hidden states of a scan node, `[B, L, E, N]`.
    saved: Option<Tensor>,
}

/// Reverse-mode recording of one forward evaluation.
///
/// Parameters are registered through [`Graph::param`] and identified by the
/// address of the borrowed tensor, so the parameter struct must not move
/// between the forward pass and [`Tape::param_grad`].
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<*const Tensor, Var>,
    pub scan_mode: ScanMode,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), scan_mode: ScanMode::Sequential, rng: None }
    }

    pub fn with_scan_mode(scan_mode: ScanMode) -> Self {
        Self { scan_mode, ..Self::new() }
    }

    /// Enables dropout masks drawn from `rng`.
    pub fn training(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Returns the dropout RNG so a training loop can keep one stream.
    pub fn take_rng(&mut self) -> Option<ChaCha8Rng> {
        self.rng.take()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf not tied to a parameter tensor.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true, None)
    }

    pub fn get(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Structural(format!("node {} is not on the tape", v.0)))
    }

    /// Handle previously assigned to `t`, if it was used in the forward pass.
    pub fn param_var(&self, t: &Tensor) -> Option<Var> {
        self.params.get(&(t as *const Tensor)).copied()
    }

    /// Gradient for a parameter tensor; zeros when it did not influence the loss.
    pub fn param_grad(&self, grads: &Gradients, t: &Tensor) -> Tensor {
        self.param_var(t)
            .and_then(|v| grads.get(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, saved: Option<Tensor>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        for v in &inputs {
            self.get(*v)?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let (value, saved) = self.eval(&op)?;
        Ok(self.push(value, op, requires_grad, saved))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn scan_inputs(&self, args: &[Var; 6]) -> SsmInputs {
        let [u, delta, a, b, c, d] = args.map(|v| self.val(v).clone());
        SsmInputs { u, delta, a, b_sel: b, c_sel: c, d }
    }

    /// Forward kernel for one op from the current input values.
    fn eval(&self, op: &Op) -> Result<(Tensor, Option<Tensor>)> {
        use Op::*;
        let v = |x: &Var| self.val(*x);
        let out = match op {
            Leaf => return Err(Error::Structural("leaves have no forward rule".into())),
            MatMul(a, b) => numerics::matmul(v(a), v(b))?,
            Add(a, b) => v(a).zip_map(v(b), |x, y| x + y)?,
            Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y)?,
            Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y)?,
            AddBias(x, b) => numerics::add_bias(v(x), v(b))?,
            Scale(x, c) => v(x).map(|t| t * c),
            Act(x, k) => numerics::activation(v(x), *k),
            Exp(x) => v(x).map(f64::exp),
            Conv { x, w, b, causal } => numerics::depthwise_conv1d(v(x), v(w), v(b), *causal)?,
            Norm { x, gain, bias, kind, eps } => numerics::normalize(v(x), *kind, v(gain), bias.as_ref().map(v), *eps)?,
            Reverse(x) => numerics::reverse_time(v(x)),
            Scan { args, mode } => {
                let inp = self.scan_inputs(args);
                inp.validate()?;
                let dims = inp.dims()?;
                if let ScanMode::Parallel { chunk: 0 } = mode {
                    return Err(Error::Config("scan chunk must be at least 1".into()));
                }
                let states = ssm::states_unchecked(&inp, dims, *mode);
                let y = readout(&inp, dims, states.data());
                return Ok((y, Some(states)));
            }
            Attention { q, k, v: vv, heads, causal } => numerics::attention(v(q), v(k), v(vv), *heads, *causal)?,
            Softmax(x) => numerics::softmax(v(x)),
            Glu(x) => numerics::glu(v(x))?,
            MeanTime(x) => numerics::mean_time(v(x))?,
            Dropout { x, mask } => v(x).zip_map(mask, |a, m| a * m)?,
            Pow(x, alpha) => {
                check_pow(v(x), *alpha)?;
                v(x).map(|t| t.powf(*alpha))
            }
            Sum(x) => Tensor::scalar(v(x).sum()),
            Mean(x) => Tensor::scalar(v(x).sum() / v(x).len() as f64),
            Bce(z, t) => bce_value(v(z), v(t))?,
        };
        Ok((out, None))
    }

    /// Recomputes every recorded op from its recorded inputs and checks that
    /// the values are bit-identical to the recording.
    pub fn verify_replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let (value, _) = self.eval(&node.op)?;
            let same = value.shape() == node.value.shape()
                && value.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::Structural(format!("replay of node {i} diverged")));
            }
        }
        Ok(())
    }

    /// Reverse pass from a single-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let v = self.get(loss)?;
        if v.len() != 1 {
            return Err(Error::Structural(format!("backward() needs a scalar loss, got shape {:?}", v.shape())));
        }
        self.backward_with(loss, Tensor::ones(v.shape()))
    }

    /// Reverse pass seeded with an arbitrary output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        self.get(out)?.expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for inp in node.op.inputs() {
                if inp.0 >= i {
                    return Err(Error::Structural(format!("node {i} reads later node {}", inp.0)));
                }
            }
            if node.requires_grad {
                self.node_vjp(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_vjp(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        use Op::*;
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Leaf => {}
            MatMul(x, w) => {
                if self.wants(*x) {
                    self.acc(grads, *x, numerics::matmul_bt(g, self.val(*w)));
                }
                if self.wants(*w) {
                    self.acc(grads, *w, numerics::matmul_at(self.val(*x), g));
                }
            }
            Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|t| -t));
            }
            Mul(a, b) => {
                self.acc(grads, *a, g.zip_map(self.val(*b), |x, y| x * y)?);
                self.acc(grads, *b, g.zip_map(self.val(*a), |x, y| x * y)?);
            }
            AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.wants(*b) {
                    let c = g.last_dim();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *b, Tensor::from_raw(vec![c], gb));
                }
            }
            Scale(x, c) => self.acc(grads, *x, g.map(|t| t * c)),
            Act(x, k) => {
                let gx = g.zip_map(self.val(*x), |gv, xv| gv * k.derivative(xv))?;
                self.acc(grads, *x, gx);
            }
            Exp(x) => self.acc(grads, *x, g.zip_map(y, |a, b| a * b)?),
            Conv { x, w, b, causal } => self.conv_vjp(g, *x, *w, *b, *causal, grads),
            Norm { x, gain, bias, kind, eps } => self.norm_vjp(g, *x, *gain, *bias, *kind, *eps, grads),
            Reverse(x) => self.acc(grads, *x, numerics::reverse_time(g)),
            Scan { args, mode } => {
                let states = node.saved.as_ref().ok_or_else(|| Error::Structural("scan node lost its states".into()))?;
                self.scan_vjp(g, args, *mode, states, grads)?;
            }
            Attention { q, k, v, heads, causal } => self.attention_vjp(g, *q, *k, *v, *heads, *causal, grads)?,
            Softmax(x) => {
                let d = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((p, gr), o) in y.data().chunks_exact(d).zip(g.data().chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        o[j] = p[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::from_raw(y.shape().to_vec(), gx));
            }
            Glu(x) => {
                let xv = self.val(*x);
                let c = y.last_dim();
                let mut gx = vec![0.0; xv.len()];
                for ((row, gr), o) in xv.data().chunks_exact(2 * c).zip(g.data().chunks_exact(c)).zip(gx.chunks_exact_mut(2 * c)) {
                    for j in 0..c {
                        let s = sigmoid(row[c + j]);
                        o[j] = gr[j] * s;
                        o[c + j] = gr[j] * row[j] * s * (1.0 - s);
                    }
                }
                self.acc(grads, *x, Tensor::from_raw(xv.shape().to_vec(), gx));
            }
            MeanTime(x) => {
                let (b, l, d) = self.val(*x).dims3()?;
                let inv = 1.0 / l as f64;
                let mut gx = vec![0.0; b * l * d];
                for bi in 0..b {
                    for li in 0..l {
                        for j in 0..d {
                            gx[(bi * l + li) * d + j] = g.data()[bi * d + j] * inv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_raw(vec![b, l, d], gx));
            }
            Dropout { x, mask } => self.acc(grads, *x, g.zip_map(mask, |a, m| a * m)?),
            Pow(x, alpha) => {
                let gx = g.zip_map(self.val(*x), |gv, xv| gv * alpha * xv.max(1e-12).powf(alpha - 1.0))?;
                self.acc(grads, *x, gx);
            }
            Sum(x) => {
                let s = g.item();
                self.acc(grads, *x, Tensor::full(self.val(*x).shape(), s));
            }
            Mean(x) => {
                let xv = self.val(*x);
                let s = g.item() / xv.len() as f64;
                self.acc(grads, *x, Tensor::full(xv.shape(), s));
            }
            Bce(z, t) => {
                let zv = self.val(*z);
                let s = g.item() / zv.len() as f64;
                self.acc(grads, *z, zv.zip_map(self.val(*t), |a, b| (sigmoid(a) - b) * s)?);
                if self.wants(*t) {
                    self.acc(grads, *t, zv.map(|a| -a * s));
                }
            }
        }
        Ok(())
    }

    fn conv_vjp(&self, g: &Tensor, x: Var, w: Var, b: Var, causal: bool, grads: &mut [Option<Tensor>]) {
        let (xv, wv) = (self.val(x), self.val(w));
        let (bs, l, e) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let k = wv.shape()[1];
        let pad = conv_left_pad(k, causal) as isize;
        let mut gx = vec![0.0; xv.len()];
        let mut gw = vec![0.0; wv.len()];
        let mut gb = vec![0.0; e];
        for bi in 0..bs {
            for li in 0..l {
                let grow = &g.data()[(bi * l + li) * e..(bi * l + li + 1) * e];
                for ch in 0..e {
                    gb[ch] += grow[ch];
                }
                for kk in 0..k {
                    let src = li as isize - pad + kk as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    let base = (bi * l + src as usize) * e;
                    for ch in 0..e {
                        gx[base + ch] += grow[ch] * wv.data()[ch * k + kk];
                        gw[ch * k + kk] += grow[ch] * xv.data()[base + ch];
                    }
                }
            }
        }
        self.acc(grads, x, Tensor::from_raw(xv.shape().to_vec(), gx));
        self.acc(grads, w, Tensor::from_raw(wv.shape().to_vec(), gw));
        self.acc(grads, b, Tensor::from_raw(vec![e], gb));
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_vjp(&self, g: &Tensor, x: Var, gain: Var, bias: Option<Var>, kind: NormKind, eps: f64, grads: &mut [Option<Tensor>]) {
        let xv = self.val(x);
        let gv = self.val(gain);
        let d = xv.last_dim();
        let mut gx = vec![0.0; xv.len()];
        let mut gg = vec![0.0; d];
        let mut gb = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut gxhat = vec![0.0; d];
        for ((row, grow), out) in xv.data().chunks_exact(d).zip(g.data().chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
            let (center, inv) = row_stats(row, kind, eps);
            for j in 0..d {
                xhat[j] = (row[j] - center) * inv;
                gxhat[j] = grow[j] * gv.data()[j];
                gg[j] += grow[j] * xhat[j];
                gb[j] += grow[j];
            }
            let n = d as f64;
            let mean_g = gxhat.iter().sum::<f64>() / n;
            let mean_gx = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
            for j in 0..d {
                out[j] = match kind {
                    NormKind::Layer => inv * (gxhat[j] - mean_g - xhat[j] * mean_gx),
                    NormKind::Rms => inv * (gxhat[j] - xhat[j] * mean_gx),
                };
            }
        }
        self.acc(grads, x, Tensor::from_raw(xv.shape().to_vec(), gx));
        self.acc(grads, gain, Tensor::from_raw(vec![d], gg));
        if let Some(b) = bias {
            self.acc(grads, b, Tensor::from_raw(vec![d], gb));
        }
    }

    /// Adjoint of the selective scan. The state cotangent obeys the reversed
    /// recurrence `gh[l] = gy[l]*C[l] + Abar[l+1] * gh[l+1]`, evaluated with the
    /// same strategy (sequential or chunked) as the forward pass.
    fn scan_vjp(&self, g: &Tensor, args: &[Var; 6], mode: ScanMode, states: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let inp = self.scan_inputs(args);
        let ScanDims { b, l, e, n } = inp.dims()?;
        let (u, delta, a, bsel, csel, d) =
            (inp.u.data(), inp.delta.data(), inp.a.data(), inp.b_sel.data(), inp.c_sel.data(), inp.d.data());
        let gy = g.data();
        let h = states.data();
        let width = e * n;

        let mut gu = vec![0.0; b * l * e];
        let mut gdelta = vec![0.0; b * l * e];
        let mut ga = vec![0.0; e * n];
        let mut gb = vec![0.0; b * l * n];
        let mut gc = vec![0.0; b * l * n];
        let mut gd = vec![0.0; e];

        for bi in 0..b {
            let elem = |i: usize, aa: &mut [f64], bb: &mut [f64]| {
                let li = l - 1 - i;
                let row = bi * l + li;
                let crow = &csel[row * n..(row + 1) * n];
                for ch in 0..e {
                    let gyv = gy[row * e + ch];
                    for s in 0..n {
                        aa[ch * n + s] = if li + 1 < l { (delta[(row + 1) * e + ch] * a[ch * n + s]).exp() } else { 0.0 };
                        bb[ch * n + s] = gyv * crow[s];
                    }
                }
            };
            let gh_rev = match mode {
                ScanMode::Sequential => sequential_scan(l, width, elem),
                ScanMode::Parallel { chunk } => chunked_scan(l, width, chunk, elem),
            };
            for li in 0..l {
                let row = bi * l + li;
                let gh = &gh_rev[(l - 1 - li) * width..(l - li) * width];
                let hs = &h[row * width..(row + 1) * width];
                let brow = &bsel[row * n..(row + 1) * n];
                for ch in 0..e {
                    let gyv = gy[row * e + ch];
                    let (dt, uv) = (delta[row * e + ch], u[row * e + ch]);
                    gd[ch] += gyv * uv;
                    let mut gu_acc = gyv * d[ch];
                    let mut gdt = 0.0;
                    for s in 0..n {
                        let idx = ch * n + s;
                        gc[row * n + s] += gyv * hs[idx];
                        let ghv = gh[idx];
                        gu_acc += ghv * dt * brow[s];
                        gb[row * n + s] += ghv * dt * uv;
                        gdt += ghv * brow[s] * uv;
                        if li > 0 {
                            let prev = h[(row - 1) * width + idx];
                            let abar = (dt * a[idx]).exp();
                            let g_abar = ghv * prev * abar;
                            gdt += g_abar * a[idx];
                            ga[idx] += g_abar * dt;
                        }
                    }
                    gu[row * e + ch] = gu_acc;
                    gdelta[row * e + ch] = gdt;
                }
            }
        }
        let [vu, vdelta, va, vb, vc, vd] = *args;
        self.acc(grads, vu, Tensor::from_raw(vec![b, l, e], gu));
        self.acc(grads, vdelta, Tensor::from_raw(vec![b, l, e], gdelta));
        self.acc(grads, va, Tensor::from_raw(vec![e, n], ga));
        self.acc(grads, vb, Tensor::from_raw(vec![b, l, n], gb));
        self.acc(grads, vc, Tensor::from_raw(vec![b, l, n], gc));
        self.acc(grads, vd, Tensor::from_raw(vec![e], gd));
        Ok(())
    }

    /// Recomputes each query row's attention weights instead of storing the
    /// `L x L` matrix.
    #[allow(clippy::too_many_arguments)]
    fn attention_vjp(&self, g: &Tensor, q: Var, k: Var, v: Var, heads: usize, causal: bool, grads: &mut [Option<Tensor>]) -> Result<()> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let (b, l, d, dh) = numerics::check_attention(qv, kv, vv, heads)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut p = vec![0.0; l];
        let mut dp = vec![0.0; l];
        for bi in 0..b {
            for hh in 0..heads {
                let off = hh * dh;
                let at = |i: usize| (bi * l + i) * d + off;
                for i in 0..l {
                    let cnt = numerics::attended(i, l, causal);
                    let qi = &qd[at(i)..at(i) + dh];
                    let go = &gd[at(i)..at(i) + dh];
                    for j in 0..cnt {
                        let kj = &kd[at(j)..at(j) + dh];
                        p[j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    numerics::softmax_in_place(&mut p[..cnt]);
                    let mut dot = 0.0;
                    for j in 0..cnt {
                        let vj = &vd[at(j)..at(j) + dh];
                        dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += p[j] * dp[j];
                    }
                    for j in 0..cnt {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        for t in 0..dh {
                            gq[at(i) + t] += ds * kd[at(j) + t];
                            gk[at(j) + t] += ds * qd[at(i) + t];
                            gv[at(j) + t] += p[j] * go[t];
                        }
                    }
                }
            }
        }
        let shape = vec![b, l, d];
        self.acc(grads, q, Tensor::from_raw(shape.clone(), gq));
        self.acc(grads, k, Tensor::from_raw(shape.clone(), gk));
        self.acc(grads, v, Tensor::from_raw(shape, gv));
        Ok(())
    }
}

impl Graph for Tape {
    type T = Var;

    fn value<'a>(&'a self, t: &'a Var) -> &'a Tensor {
        &self.nodes[t.0].value
    }

    fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, None)
    }

    fn param(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor;
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let v = self.push(t.clone(), Op::Leaf, true, None);
        self.params.insert(key, v);
        v
    }

    fn matmul(&mut self, x: &Var, w: &Var) -> Result<Var> {
        self.record(Op::MatMul(*x, *w))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Sub(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Mul(*a, *b))
    }

    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        self.record(Op::AddBias(*x, *bias))
    }

    fn scale(&mut self, x: &Var, c: f64) -> Var {
        self.record(Op::Scale(*x, c)).expect("scale is total")
    }

    fn activation(&mut self, x: &Var, kind: Activation) -> Var {
        self.record(Op::Act(*x, kind)).expect("activation is total")
    }

    fn exp(&mut self, x: &Var) -> Var {
        self.record(Op::Exp(*x)).expect("exp is total")
    }

    fn conv1d(&mut self, x: &Var, w: &Var, b: &Var, causal: bool) -> Result<Var> {
        self.record(Op::Conv { x: *x, w: *w, b: *b, causal })
    }

    fn normalize(&mut self, x: &Var, kind: NormKind, gain: &Var, bias: Option<&Var>, eps: f64) -> Result<Var> {
        self.record(Op::Norm { x: *x, gain: *gain, bias: bias.copied(), kind, eps })
    }

    fn reverse_time(&mut self, x: &Var) -> Var {
        self.record(Op::Reverse(*x)).expect("reverse is total")
    }

    fn selective_scan(&mut self, u: &Var, delta: &Var, a: &Var, b: &Var, c: &Var, d: &Var) -> Result<Var> {
        let mode = self.scan_mode;
        self.record(Op::Scan { args: [*u, *delta, *a, *b, *c, *d], mode })
    }

    fn attention(&mut self, q: &Var, k: &Var, v: &Var, heads: usize, causal: bool) -> Result<Var> {
        self.record(Op::Attention { q: *q, k: *k, v: *v, heads, causal })
    }

    fn softmax(&mut self, x: &Var) -> Var {
        self.record(Op::Softmax(*x)).expect("softmax is total")
    }

    fn glu(&mut self, x: &Var) -> Result<Var> {
        self.record(Op::Glu(*x))
    }

    fn mean_time(&mut self, x: &Var) -> Result<Var> {
        self.record(Op::MeanTime(*x))
    }

    fn dropout(&mut self, x: &Var, p: f64) -> Var {
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return *x;
        };
        let keep = 1.0 / (1.0 - p);
        let shape = self.nodes[x.0].value.shape().to_vec();
        let n = shape.iter().product();
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let mask = Tensor::from_raw(shape, mask);
        self.record(Op::Dropout { x: *x, mask }).expect("mask matches input")
    }

    fn pow(&mut self, x: &Var, alpha: f64) -> Result<Var> {
        self.record(Op::Pow(*x, alpha))
    }

    fn sum(&mut self, x: &Var) -> Var {
        self.record(Op::Sum(*x)).expect("sum is total")
    }

    fn mean(&mut self, x: &Var) -> Var {
        self.record(Op::Mean(*x)).expect("mean is total")
    }

    fn bce_with_logits(&mut self, logits: &Var, targets: &Var) -> Result<Var> {
        self.record(Op::Bce(*logits, *targets))
    }
}
