//! Bidirectional Mamba layers.
//!
//! The inner variant shares the input/output projections and the gate between
//! directions and duplicates only the SSM path. The external variant runs two
//! complete Mamba paths that share just the input norm. In both, the backward
//! direction processes the time-reversed sequence and its result is flipped
//! back before the directions are summed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::Result;
use crate::mamba::{gated_path, linear, rms_norm, ssm_path, MambaConfig, MambaParams, SsmBranch};
use crate::numerics::Activation;
use crate::params::{impl_parameters, seeded_rng, uniform_fan_in};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mamba,
    Inn,
    Ext,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnBiMambaParams {
    pub norm_gain: Tensor,
    pub w_x: Tensor,
    pub w_z: Tensor,
    pub w_out: Tensor,
    pub fwd: SsmBranch,
    pub bwd: SsmBranch,
}

impl_parameters!(InnBiMambaParams {
    norm_gain,
    w_x as "W_x",
    w_z as "W_z",
    w_out as "W_out",
    fwd suffix "_fwd",
    bwd suffix "_bwd",
});

/// One direction of the external variant.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionParams {
    pub w_x: Tensor,
    pub w_z: Tensor,
    pub w_out: Tensor,
    pub ssm: SsmBranch,
}

impl_parameters!(DirectionParams {
    w_x as "W_x",
    w_z as "W_z",
    w_out as "W_out",
    ssm suffix "",
});

#[derive(Clone, Debug, PartialEq)]
pub struct ExtBiMambaParams {
    pub norm_gain: Tensor,
    pub fwd: DirectionParams,
    pub bwd: DirectionParams,
}

impl_parameters!(ExtBiMambaParams {
    norm_gain,
    fwd suffix "_fwd",
    bwd suffix "_bwd",
});

impl DirectionParams {
    pub fn init<R: Rng + ?Sized>(cfg: &MambaConfig, rng: &mut R) -> Self {
        let (d, e) = (cfg.d_model, cfg.d_inner());
        Self {
            w_x: uniform_fan_in(&[d, e], d, rng),
            w_z: uniform_fan_in(&[d, e], d, rng),
            w_out: uniform_fan_in(&[e, d], e, rng),
            ssm: SsmBranch::init(cfg, rng),
        }
    }

    /// The unidirectional layer this direction amounts to, given the shared norm.
    pub fn as_mamba(&self, norm_gain: &Tensor) -> MambaParams {
        MambaParams {
            norm_gain: norm_gain.clone(),
            w_x: self.w_x.clone(),
            w_z: self.w_z.clone(),
            w_out: self.w_out.clone(),
            ssm: self.ssm.clone(),
        }
    }
}

impl InnBiMambaParams {
    pub fn init_with<R: Rng + ?Sized>(cfg: &MambaConfig, rng: &mut R) -> Self {
        let shared = MambaParams::init_with(cfg, rng);
        Self {
            norm_gain: shared.norm_gain,
            w_x: shared.w_x,
            w_z: shared.w_z,
            w_out: shared.w_out,
            fwd: shared.ssm,
            bwd: SsmBranch::init(cfg, rng),
        }
    }

    /// Same layer with the per-direction internals exchanged.
    pub fn swapped(&self) -> Self {
        Self { fwd: self.bwd.clone(), bwd: self.fwd.clone(), ..self.clone() }
    }
}

impl ExtBiMambaParams {
    pub fn init_with<R: Rng + ?Sized>(cfg: &MambaConfig, rng: &mut R) -> Self {
        Self {
            norm_gain: Tensor::ones(&[cfg.d_model]),
            fwd: DirectionParams::init(cfg, rng),
            bwd: DirectionParams::init(cfg, rng),
        }
    }

    pub fn swapped(&self) -> Self {
        Self { norm_gain: self.norm_gain.clone(), fwd: self.bwd.clone(), bwd: self.fwd.clone() }
    }
}

pub fn init_inn(cfg: &MambaConfig, seed: u64) -> Result<InnBiMambaParams> {
    cfg.validate()?;
    Ok(InnBiMambaParams::init_with(cfg, &mut seeded_rng("inn_bimamba", seed)))
}

pub fn init_ext(cfg: &MambaConfig, seed: u64) -> Result<ExtBiMambaParams> {
    cfg.validate()?;
    Ok(ExtBiMambaParams::init_with(cfg, &mut seeded_rng("ext_bimamba", seed)))
}

/// Shared projections and gate around two SSM paths; the backward path runs
/// on the reversed projection and is flipped back before gating. No residual.
pub fn inn_bimamba_branch<G: Graph>(g: &mut G, h: &G::T, p: &InnBiMambaParams) -> Result<G::T> {
    let hn = rms_norm(g, h, &p.norm_gain)?;
    let x = linear(g, &hn, &p.w_x)?;
    let z = linear(g, &hn, &p.w_z)?;
    let gate = g.activation(&z, Activation::Silu);

    let y_f = ssm_path(g, &x, &p.fwd)?;
    let x_rev = g.reverse_time(&x);
    let y_b_rev = ssm_path(g, &x_rev, &p.bwd)?;
    let y_b = g.reverse_time(&y_b_rev);

    let gated_f = g.mul(&y_f, &gate)?;
    let gated_b = g.mul(&y_b, &gate)?;
    let merged = g.add(&gated_f, &gated_b)?;
    linear(g, &merged, &p.w_out)
}

pub fn inn_bimamba_forward<G: Graph>(g: &mut G, h: &G::T, p: &InnBiMambaParams) -> Result<G::T> {
    let out = inn_bimamba_branch(g, h, p)?;
    g.add(&out, h)
}

/// Two independent Mamba paths over a shared norm, summed. No residual.
pub fn ext_bimamba_branch<G: Graph>(g: &mut G, h: &G::T, p: &ExtBiMambaParams) -> Result<G::T> {
    let hn = rms_norm(g, h, &p.norm_gain)?;
    let y_f = gated_path(g, &hn, &p.fwd.w_x, &p.fwd.w_z, &p.fwd.w_out, &p.fwd.ssm)?;
    let hn_rev = g.reverse_time(&hn);
    let y_b_rev = gated_path(g, &hn_rev, &p.bwd.w_x, &p.bwd.w_z, &p.bwd.w_out, &p.bwd.ssm)?;
    let y_b = g.reverse_time(&y_b_rev);
    g.add(&y_f, &y_b)
}

pub fn ext_bimamba_forward<G: Graph>(g: &mut G, h: &G::T, p: &ExtBiMambaParams) -> Result<G::T> {
    let out = ext_bimamba_branch(g, h, p)?;
    g.add(&out, h)
}

/// Learnable scalars of one SSM path.
fn branch_count(cfg: &MambaConfig) -> usize {
    let (e, n, k, r) = (cfg.d_inner(), cfg.d_state, cfg.d_conv, cfg.dt_rank());
    // conv_w, conv_b, W_B, W_C, W_1, W_2, delta_bias, A_log, D_skip
    e * k + e + 2 * e * n + 2 * e * r + e + e * n + e
}

/// Closed-form parameter count.
pub fn param_count(variant: Variant, cfg: &MambaConfig) -> usize {
    let (d, e) = (cfg.d_model, cfg.d_inner());
    let projections = 2 * d * e + e * d;
    match variant {
        Variant::Mamba => d + projections + branch_count(cfg),
        Variant::Inn => d + projections + 2 * branch_count(cfg),
        Variant::Ext => d + 2 * (projections + branch_count(cfg)),
    }
}
