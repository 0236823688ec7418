//! Unidirectional Mamba layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::numerics::{softplus_inv, Activation, NormKind};
use crate::params::{impl_parameters, seeded_rng, uniform_fan_in};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AInit {
    /// `A[e, n] = -(n + 1)`
    #[default]
    RealDiagonal,
    /// `A = -exp(g)`, `g ~ N(0, 1)`
    Random,
    /// `A[e, n] = -(n + 1)(1 + g)`, `g ~ N(0, sigma^2)`
    GaussianPerturbed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MambaConfig {
    pub d_model: usize,
    /// Expanded width is `expand * d_model`.
    pub expand: usize,
    pub d_state: usize,
    pub d_conv: usize,
    /// Low-rank reduction of the step-size projection.
    pub dt_reduction: usize,
    pub a_init: AInit,
    pub a_noise_sigma: f64,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            expand: 2,
            d_state: 16,
            d_conv: 4,
            dt_reduction: 16,
            a_init: AInit::RealDiagonal,
            a_noise_sigma: 0.1,
        }
    }
}

impl MambaConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Rank of the step-size projection, `ceil(E / r)`.
    pub fn dt_rank(&self) -> usize {
        self.d_inner().div_ceil(self.dt_reduction)
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_model", self.d_model),
            ("expand", self.expand),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("dt_reduction", self.dt_reduction),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.a_noise_sigma >= 0.0 && self.a_noise_sigma.is_finite()) {
            return Err(Error::Config(format!("a_noise_sigma must be finite and non-negative, got {}", self.a_noise_sigma)));
        }
        Ok(())
    }
}

/// Everything between the input projection and the gate: conv, step-size and
/// selection projections, and the state-space parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmBranch {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub w_1: Tensor,
    pub w_2: Tensor,
    pub delta_bias: Tensor,
    /// `A = -exp(a_log)`
    pub a_log: Tensor,
    pub d_skip: Tensor,
}

impl_parameters!(SsmBranch {
    conv_w,
    conv_b,
    w_b as "W_B",
    w_c as "W_C",
    w_1 as "W_1",
    w_2 as "W_2",
    delta_bias,
    a_log as "A_log",
    d_skip as "D_skip",
});

#[derive(Clone, Debug, PartialEq)]
pub struct MambaParams {
    pub norm_gain: Tensor,
    pub w_x: Tensor,
    pub w_z: Tensor,
    pub w_out: Tensor,
    pub ssm: SsmBranch,
}

impl_parameters!(MambaParams {
    norm_gain,
    w_x as "W_x",
    w_z as "W_z",
    w_out as "W_out",
    ssm suffix "",
});

fn init_a_log<R: Rng + ?Sized>(cfg: &MambaConfig, rng: &mut R) -> Tensor {
    let (e, n) = (cfg.d_inner(), cfg.d_state);
    let std = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(e * n);
    for _ in 0..e {
        for j in 0..n {
            let base = (j + 1) as f64;
            let mag = match cfg.a_init {
                AInit::RealDiagonal => base,
                AInit::Random => std.sample(rng).exp(),
                AInit::GaussianPerturbed => {
                    let g = cfg.a_noise_sigma * std.sample(rng);
                    base * (1.0 + g).max(1e-3)
                }
            };
            out.push(mag.ln());
        }
    }
    Tensor::from_raw(vec![e, n], out)
}

impl SsmBranch {
    pub fn init<R: Rng + ?Sized>(cfg: &MambaConfig, rng: &mut R) -> Self {
        let (e, n, k, r) = (cfg.d_inner(), cfg.d_state, cfg.d_conv, cfg.dt_rank());
        let conv_w = uniform_fan_in(&[e, k], k, rng);
        let conv_b = uniform_fan_in(&[e], k, rng);
        let w_b = uniform_fan_in(&[e, n], e, rng);
        let w_c = uniform_fan_in(&[e, n], e, rng);
        let w_1 = uniform_fan_in(&[e, r], e, rng);
        let w_2 = uniform_fan_in(&[r, e], r, rng);
        // step sizes log-uniform in [DT_MIN, DT_MAX] at zero input
        let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
        let delta_bias = Tensor::from_raw(vec![e], (0..e).map(|_| softplus_inv(rng.random_range(lo..hi).exp())).collect());
        let a_log = init_a_log(cfg, rng);
        Self { conv_w, conv_b, w_b, w_c, w_1, w_2, delta_bias, a_log, d_skip: Tensor::ones(&[e]) }
    }
}

impl MambaParams {
    pub fn init_with<R: Rng + ?Sized>(cfg: &MambaConfig, rng: &mut R) -> Self {
        let (d, e) = (cfg.d_model, cfg.d_inner());
        Self {
            norm_gain: Tensor::ones(&[d]),
            w_x: uniform_fan_in(&[d, e], d, rng),
            w_z: uniform_fan_in(&[d, e], d, rng),
            w_out: uniform_fan_in(&[e, d], e, rng),
            ssm: SsmBranch::init(cfg, rng),
        }
    }
}

/// Deterministic initialization from `seed`.
pub fn init_params(cfg: &MambaConfig, seed: u64) -> Result<MambaParams> {
    cfg.validate()?;
    Ok(MambaParams::init_with(cfg, &mut seeded_rng("mamba", seed)))
}

/// `x @ w` with `w` registered as a parameter.
pub(crate) fn linear<G: Graph>(g: &mut G, x: &G::T, w: &Tensor) -> Result<G::T> {
    let w = g.param(w);
    g.matmul(x, &w)
}

/// `x @ w + b`.
pub(crate) fn affine<G: Graph>(g: &mut G, x: &G::T, w: &Tensor, b: &Tensor) -> Result<G::T> {
    let y = linear(g, x, w)?;
    let b = g.param(b);
    g.add_bias(&y, &b)
}

/// Step sizes and selection matrices from the post-conv activation.
pub fn generate_ssm_params<G: Graph>(g: &mut G, xp: &G::T, p: &SsmBranch) -> Result<(G::T, G::T, G::T)> {
    let b_sel = linear(g, xp, &p.w_b)?;
    let c_sel = linear(g, xp, &p.w_c)?;
    let low = linear(g, xp, &p.w_1)?;
    let pre = affine(g, &low, &p.w_2, &p.delta_bias)?;
    let delta = g.activation(&pre, Activation::Softplus);
    Ok((delta, b_sel, c_sel))
}

/// Causal conv, SiLU, selective scan. `x` is the projected input `[B, L, E]`.
pub(crate) fn ssm_path<G: Graph>(g: &mut G, x: &G::T, p: &SsmBranch) -> Result<G::T> {
    let (w, b) = (g.param(&p.conv_w), g.param(&p.conv_b));
    let conv = g.conv1d(x, &w, &b, true)?;
    let xp = g.activation(&conv, Activation::Silu);
    let (delta, b_sel, c_sel) = generate_ssm_params(g, &xp, p)?;
    let a_log = g.param(&p.a_log);
    let a_mag = g.exp(&a_log);
    let a = g.scale(&a_mag, -1.0);
    let d = g.param(&p.d_skip);
    g.selective_scan(&xp, &delta, &a, &b_sel, &c_sel, &d)
}

pub(crate) fn rms_norm<G: Graph>(g: &mut G, h: &G::T, gain: &Tensor) -> Result<G::T> {
    let gain = g.param(gain);
    g.normalize(h, NormKind::Rms, &gain, None, NORM_EPS)
}

/// Projection, SSM path, SiLU gate and output projection, without norm or residual.
pub(crate) fn gated_path<G: Graph>(
    g: &mut G,
    hn: &G::T,
    w_x: &Tensor,
    w_z: &Tensor,
    w_out: &Tensor,
    ssm: &SsmBranch,
) -> Result<G::T> {
    let x = linear(g, hn, w_x)?;
    let z = linear(g, hn, w_z)?;
    let y = ssm_path(g, &x, ssm)?;
    let gate = g.activation(&z, Activation::Silu);
    let gated = g.mul(&y, &gate)?;
    linear(g, &gated, w_out)
}

/// `W_out(scan(SiLU(conv(norm(H) W_x))) * SiLU(norm(H) W_z))`, the layer without its residual.
pub fn mamba_branch<G: Graph>(g: &mut G, h: &G::T, p: &MambaParams) -> Result<G::T> {
    let hn = rms_norm(g, h, &p.norm_gain)?;
    gated_path(g, &hn, &p.w_x, &p.w_z, &p.w_out, &p.ssm)
}

/// `H + mamba_branch(H)`.
pub fn mamba_forward<G: Graph>(g: &mut G, h: &G::T, p: &MambaParams) -> Result<G::T> {
    let out = mamba_branch(g, h, p)?;
    g.add(&out, h)
}
