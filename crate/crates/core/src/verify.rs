//! Numerical self-checks shared by the `equiv` and `gradcheck` commands.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_model_gradients, Eager, Graph, Objective, DEFAULT_FD_EPS};
use crate::bimamba::{ext_bimamba_forward, init_ext, init_inn, inn_bimamba_forward, ExtBiMambaParams, InnBiMambaParams};
use crate::blocks::{layer_forward, BlockSpec, LayerKind, LayerParams, MixerKind};
use crate::error::Result;
use crate::mamba::{init_params, mamba_forward, MambaConfig, MambaParams};
use crate::numerics::{reverse_time, Activation, NormKind};
use crate::params::seeded_rng;
use crate::ssm::{lti_kernel, lti_apply, selective_scan_parallel, selective_scan_sequential, SsmInputs};
use crate::tensor::Tensor;

pub const SCAN_LENGTHS: [usize; 6] = [1, 2, 3, 16, 257, 1024];
pub const SCAN_WIDTHS: [usize; 3] = [1, 4, 16];
pub const SCAN_TOL: f64 = 1e-10;
pub const LTI_TOL: f64 = 1e-8;
pub const REVERSAL_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-5;

/// Random well-posed scan instance: positive steps, stable `A`.
pub fn random_ssm_inputs<R: Rng + ?Sized>(rng: &mut R, b: usize, l: usize, e: usize, n: usize) -> SsmInputs {
    SsmInputs {
        u: Tensor::randn(&[b, l, e], rng),
        delta: Tensor::uniform(&[b, l, e], 0.001, 0.5, rng),
        a: Tensor::uniform(&[e, n], -2.0, -0.05, rng),
        b_sel: Tensor::randn(&[b, l, n], rng),
        c_sel: Tensor::randn(&[b, l, n], rng),
        d: Tensor::randn(&[e], rng),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivStats {
    pub instances: usize,
    pub comparisons: usize,
    pub max_abs_diff: f64,
}

/// Parallel against sequential scan over random shapes and every chunk size
/// in `{1, 2, 7, 64, L}`.
pub fn scan_equivalence(seed: u64, instances: usize) -> Result<EquivStats> {
    let mut rng = seeded_rng("verify-scan", seed);
    let (mut worst, mut comparisons) = (0.0f64, 0);
    for _ in 0..instances {
        let l = *SCAN_LENGTHS.choose(&mut rng).expect("non-empty");
        let e = *SCAN_WIDTHS.choose(&mut rng).expect("non-empty");
        let n = *SCAN_WIDTHS.choose(&mut rng).expect("non-empty");
        let inp = random_ssm_inputs(&mut rng, 1, l, e, n);
        let seq = selective_scan_sequential(&inp)?;
        for chunk in [1, 2, 7, 64, l] {
            worst = worst.max(selective_scan_parallel(&inp, chunk)?.max_abs_diff(&seq)?);
            comparisons += 1;
        }
    }
    Ok(EquivStats { instances, comparisons, max_abs_diff: worst })
}

/// Convolution form of a constant-parameter SSM against the recurrence.
pub fn lti_equivalence(seed: u64, instances: usize) -> Result<EquivStats> {
    let mut rng = seeded_rng("verify-lti", seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (l, e, n) = (rng.random_range(1..=64), rng.random_range(1..=6), rng.random_range(1..=8));
        let dt = Tensor::uniform(&[e], 0.01, 0.5, &mut rng);
        let bv = Tensor::randn(&[n], &mut rng);
        let cv = Tensor::randn(&[n], &mut rng);
        let a = Tensor::uniform(&[e, n], -2.0, -0.05, &mut rng);
        let tile = |v: &Tensor| Tensor::from_raw(vec![1, l, v.len()], v.data().repeat(l));
        let inp = SsmInputs {
            u: Tensor::randn(&[1, l, e], &mut rng),
            delta: tile(&dt),
            a: a.clone(),
            b_sel: tile(&bv),
            c_sel: tile(&cv),
            d: Tensor::zeros(&[e]),
        };
        let mut abar = Tensor::zeros(&[e, n]);
        let mut bbar = Tensor::zeros(&[e, n]);
        for ch in 0..e {
            for s in 0..n {
                abar.data_mut()[ch * n + s] = (dt.data()[ch] * a.data()[ch * n + s]).exp();
                bbar.data_mut()[ch * n + s] = dt.data()[ch] * bv.data()[s];
            }
        }
        let conv = lti_apply(&inp.u, &lti_kernel(&abar, &bbar, &cv, l)?)?;
        worst = worst.max(conv.max_abs_diff(&selective_scan_sequential(&inp)?)?);
    }
    Ok(EquivStats { instances, comparisons: instances, max_abs_diff: worst })
}

fn randomize_skips(rng: &mut impl Rng, gain: &mut Tensor, skips: [&mut Tensor; 2]) {
    *gain = Tensor::uniform(gain.shape(), 0.5, 1.5, rng);
    for s in skips {
        *s = Tensor::randn(s.shape(), rng);
    }
}

/// `f(reverse(x); swapped) == reverse(f(x))` for both bidirectional layers.
/// Returns the worst deviation of each: `(inn, ext)`.
pub fn reversal_equivariance(seed: u64, instances: usize) -> Result<(f64, f64)> {
    let mut rng = seeded_rng("verify-reversal", seed);
    let (mut inn_worst, mut ext_worst) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let d = 2 * rng.random_range(1..=4);
        let cfg = MambaConfig { d_model: d, d_state: rng.random_range(1..=4), d_conv: rng.random_range(1..=4), dt_reduction: 2, ..Default::default() };
        let l = rng.random_range(1..=12);
        let x = Tensor::randn(&[2, l, d], &mut rng);
        let xr = reverse_time(&x);

        let mut pi = init_inn(&cfg, seed.wrapping_add(i as u64))?;
        randomize_skips(&mut rng, &mut pi.norm_gain, [&mut pi.fwd.d_skip, &mut pi.bwd.d_skip]);
        let lhs = inn_bimamba_forward(&mut Eager::new(), &xr, &pi.swapped())?;
        let rhs = reverse_time(&inn_bimamba_forward(&mut Eager::new(), &x, &pi)?);
        inn_worst = inn_worst.max(lhs.max_abs_diff(&rhs)?);

        let mut pe = init_ext(&cfg, seed.wrapping_add(i as u64))?;
        randomize_skips(&mut rng, &mut pe.norm_gain, [&mut pe.fwd.ssm.d_skip, &mut pe.bwd.ssm.d_skip]);
        let lhs = ext_bimamba_forward(&mut Eager::new(), &xr, &pe.swapped())?;
        let rhs = reverse_time(&ext_bimamba_forward(&mut Eager::new(), &x, &pe)?);
        ext_worst = ext_worst.max(lhs.max_abs_diff(&rhs)?);
    }
    Ok((inn_worst, ext_worst))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Differentiable primitive under test.
#[derive(Clone, Copy, Debug)]
enum Op {
    Matmul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    Act(Activation),
    Exp,
    Conv(bool),
    Norm(NormKind),
    Reverse,
    Scan,
    Attention(bool),
    Softmax,
    Glu,
    MeanTime,
    Pow,
    Sum,
    Mean,
    Bce,
}

const OPS: [(&str, Op); 27] = [
    ("matmul", Op::Matmul),
    ("add", Op::Add),
    ("sub", Op::Sub),
    ("mul", Op::Mul),
    ("add_bias", Op::AddBias),
    ("scale", Op::Scale),
    ("silu", Op::Act(Activation::Silu)),
    ("swish", Op::Act(Activation::Swish)),
    ("sigmoid", Op::Act(Activation::Sigmoid)),
    ("softplus", Op::Act(Activation::Softplus)),
    ("relu", Op::Act(Activation::Relu)),
    ("exp", Op::Exp),
    ("conv1d_causal", Op::Conv(true)),
    ("conv1d_centred", Op::Conv(false)),
    ("layer_norm", Op::Norm(NormKind::Layer)),
    ("rms_norm", Op::Norm(NormKind::Rms)),
    ("reverse_time", Op::Reverse),
    ("selective_scan", Op::Scan),
    ("attention_causal", Op::Attention(true)),
    ("attention_full", Op::Attention(false)),
    ("softmax", Op::Softmax),
    ("glu", Op::Glu),
    ("mean_time", Op::MeanTime),
    ("pow", Op::Pow),
    ("sum", Op::Sum),
    ("mean", Op::Mean),
    ("bce_with_logits", Op::Bce),
];

const SHAPE: [usize; 3] = [2, 10, 12];

impl Op {
    /// Inputs as trainable tensors, each kept inside the op's domain.
    fn inputs<R: Rng>(self, rng: &mut R) -> Vec<Tensor> {
        match self {
            Op::Matmul => {
                let a = Tensor::randn(&SHAPE, rng);
                vec![a, Tensor::randn(&[12, 12], rng)]
            }
            Op::Add | Op::Sub | Op::Mul => {
                let a = Tensor::randn(&SHAPE, rng);
                vec![a, Tensor::randn(&SHAPE, rng)]
            }
            Op::AddBias => {
                let a = Tensor::randn(&SHAPE, rng);
                vec![a, Tensor::randn(&[12], rng)]
            }
            // keep clear of the kink
            Op::Act(Activation::Relu) => vec![Tensor::randn(&SHAPE, rng).map(|v| v.signum() * (0.1 + v.abs()))],
            Op::Conv(_) => {
                let a = Tensor::randn(&SHAPE, rng);
                let w = Tensor::randn(&[12, 3], rng);
                vec![a, w, Tensor::randn(&[12], rng)]
            }
            Op::Norm(_) => {
                let a = Tensor::randn(&SHAPE, rng);
                let g = Tensor::uniform(&[12], 0.5, 1.5, rng);
                vec![a, g, Tensor::randn(&[12], rng)]
            }
            Op::Scan => {
                let s = random_ssm_inputs(rng, 2, 10, 6, 4);
                vec![s.u, s.delta, s.a, s.b_sel, s.c_sel, s.d]
            }
            Op::Attention(_) => {
                let q = Tensor::randn(&SHAPE, rng);
                let k = Tensor::randn(&SHAPE, rng);
                vec![q, k, Tensor::randn(&SHAPE, rng)]
            }
            Op::Pow => vec![Tensor::uniform(&SHAPE, 0.5, 2.0, rng)],
            Op::Bce => {
                let z = Tensor::randn(&SHAPE, rng);
                vec![z, Tensor::uniform(&SHAPE, 0.0, 1.0, rng)]
            }
            _ => vec![Tensor::randn(&SHAPE, rng)],
        }
    }

    fn apply<G: Graph>(self, g: &mut G, v: &[G::T]) -> Result<G::T> {
        Ok(match self {
            Op::Matmul => g.matmul(&v[0], &v[1])?,
            Op::Add => g.add(&v[0], &v[1])?,
            Op::Sub => g.sub(&v[0], &v[1])?,
            Op::Mul => g.mul(&v[0], &v[1])?,
            Op::AddBias => g.add_bias(&v[0], &v[1])?,
            Op::Scale => g.scale(&v[0], -1.7),
            Op::Act(kind) => g.activation(&v[0], kind),
            Op::Exp => g.exp(&v[0]),
            Op::Conv(causal) => g.conv1d(&v[0], &v[1], &v[2], causal)?,
            Op::Norm(kind) => g.normalize(&v[0], kind, &v[1], Some(&v[2]), 1e-5)?,
            Op::Reverse => g.reverse_time(&v[0]),
            Op::Scan => g.selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5])?,
            Op::Attention(causal) => g.attention(&v[0], &v[1], &v[2], 3, causal)?,
            Op::Softmax => g.softmax(&v[0]),
            Op::Glu => g.glu(&v[0])?,
            Op::MeanTime => g.mean_time(&v[0])?,
            Op::Pow => g.pow(&v[0], 0.3)?,
            Op::Sum => g.sum(&v[0]),
            Op::Mean => g.mean(&v[0]),
            Op::Bce => g.bce_with_logits(&v[0], &v[1])?,
        })
    }
}

/// `sum(op(params) * w)` with a fixed random `w`, so every output element
/// contributes its own weight to the gradient.
struct Projected {
    op: Op,
    weights: Tensor,
}

impl Objective<Vec<Tensor>> for Projected {
    fn loss<G: Graph>(&self, g: &mut G, params: &Vec<Tensor>) -> Result<G::T> {
        let vars: Vec<G::T> = params.iter().map(|p| g.param(p)).collect();
        let y = self.op.apply(g, &vars)?;
        let w = g.input(self.weights.clone());
        let yw = g.mul(&y, &w)?;
        Ok(g.sum(&yw))
    }
}

trait Layer {
    fn forward<G: Graph>(&self, g: &mut G, h: &G::T) -> Result<G::T>;
}

impl Layer for MambaParams {
    fn forward<G: Graph>(&self, g: &mut G, h: &G::T) -> Result<G::T> {
        mamba_forward(g, h, self)
    }
}

impl Layer for InnBiMambaParams {
    fn forward<G: Graph>(&self, g: &mut G, h: &G::T) -> Result<G::T> {
        inn_bimamba_forward(g, h, self)
    }
}

impl Layer for ExtBiMambaParams {
    fn forward<G: Graph>(&self, g: &mut G, h: &G::T) -> Result<G::T> {
        ext_bimamba_forward(g, h, self)
    }
}

struct LayerLoss {
    x: Tensor,
    weights: Tensor,
}

impl<P: Layer> Objective<P> for LayerLoss {
    fn loss<G: Graph>(&self, g: &mut G, p: &P) -> Result<G::T> {
        let h = g.input(self.x.clone());
        let y = p.forward(g, &h)?;
        let w = g.input(self.weights.clone());
        let yw = g.mul(&y, &w)?;
        Ok(g.sum(&yw))
    }
}

struct BlockLoss<'a> {
    spec: &'a BlockSpec,
    x: Tensor,
    weights: Tensor,
}

impl Objective<LayerParams> for BlockLoss<'_> {
    fn loss<G: Graph>(&self, g: &mut G, p: &LayerParams) -> Result<G::T> {
        let h = g.input(self.x.clone());
        let y = layer_forward(g, &h, self.spec, p)?;
        let w = g.input(self.weights.clone());
        let yw = g.mul(&y, &w)?;
        Ok(g.sum(&yw))
    }
}

fn small_mamba() -> MambaConfig {
    MambaConfig { d_model: 4, expand: 2, d_state: 3, d_conv: 3, dt_reduction: 4, ..Default::default() }
}

/// Central-difference check of every primitive, the three mamba layers and
/// two composed blocks, `samples` coordinates each.
pub fn gradient_suite(seed: u64, samples: usize) -> Result<Vec<GradCase>> {
    let mut rng = seeded_rng("verify-grad", seed);
    let mut out = Vec::new();
    for (i, &(name, op)) in OPS.iter().enumerate() {
        let params = op.inputs(&mut rng);
        let y = op.apply(&mut Eager::new(), &params)?;
        let obj = Projected { op, weights: Tensor::randn(y.shape(), &mut rng) };
        let r = check_model_gradients(&params, &obj, DEFAULT_FD_EPS, samples, seed.wrapping_add(i as u64))?;
        out.push(GradCase { name: name.to_string(), max_rel_err: r.max_rel_err, checked: r.checked });
    }

    let cfg = small_mamba();
    let x = Tensor::randn(&[2, 6, 4], &mut rng);
    let obj = LayerLoss { x: x.clone(), weights: Tensor::randn(&[2, 6, 4], &mut rng) };
    let mut m = init_params(&cfg, seed)?;
    m.ssm.d_skip = Tensor::randn(m.ssm.d_skip.shape(), &mut rng);
    let mut inn = init_inn(&cfg, seed)?;
    randomize_skips(&mut rng, &mut inn.norm_gain, [&mut inn.fwd.d_skip, &mut inn.bwd.d_skip]);
    let mut ext = init_ext(&cfg, seed)?;
    randomize_skips(&mut rng, &mut ext.norm_gain, [&mut ext.fwd.ssm.d_skip, &mut ext.bwd.ssm.d_skip]);
    let layer_cases = [
        ("mamba_layer", check_model_gradients(&m, &obj, DEFAULT_FD_EPS, samples, seed)?),
        ("inn_bimamba_layer", check_model_gradients(&inn, &obj, DEFAULT_FD_EPS, samples, seed)?),
        ("ext_bimamba_layer", check_model_gradients(&ext, &obj, DEFAULT_FD_EPS, samples, seed)?),
    ];
    for (name, r) in layer_cases {
        out.push(GradCase { name: name.to_string(), max_rel_err: r.max_rel_err, checked: r.checked });
    }

    let blocks = [
        ("transformer_ext_bimamba", BlockSpec { kind: LayerKind::Transformer, mixer: MixerKind::ExtBimamba, d_model: 4, n_heads: 2, d_ff: 8, ..Default::default() }),
        ("conformer_inn_bimamba", BlockSpec { kind: LayerKind::Conformer, mixer: MixerKind::InnBimamba, d_model: 4, n_heads: 2, d_ff: 8, conv_kernel: 3, ..Default::default() }),
        ("conformer_mhsa", BlockSpec { kind: LayerKind::Conformer, mixer: MixerKind::Mhsa, d_model: 4, n_heads: 2, d_ff: 8, conv_kernel: 3, ..Default::default() }),
    ];
    for (name, spec) in blocks {
        let params = LayerParams::init(&spec, &cfg, &mut rng);
        let obj = BlockLoss { spec: &spec, x: x.clone(), weights: Tensor::randn(&[2, 6, 4], &mut rng) };
        let r = check_model_gradients(&params, &obj, DEFAULT_FD_EPS, samples, seed)?;
        out.push(GradCase { name: name.to_string(), max_rel_err: r.max_rel_err, checked: r.checked });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_small_runs() {
        assert!(scan_equivalence(1, 5).unwrap().max_abs_diff < SCAN_TOL);
        assert!(lti_equivalence(1, 5).unwrap().max_abs_diff < LTI_TOL);
        let (a, b) = reversal_equivariance(1, 5).unwrap();
        assert!(a < REVERSAL_TOL && b < REVERSAL_TOL);
    }

    #[test]
    fn gradient_suite_covers_ops_and_layers() {
        let cases = gradient_suite(3, 40).unwrap();
        assert_eq!(cases.len(), 27 + 6);
        for c in &cases {
            assert!(c.max_rel_err < GRAD_TOL, "{c:?}");
            assert!(c.checked >= 1);
        }
    }
}
