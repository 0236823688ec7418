//! Transformer and Conformer layer shells with a pluggable sequence mixer,
//! plus a bare mixer-only layer.
//!
//! Wiring is pre-norm. Attention gets its own layer-norm and residual; the
//! Mamba variants already normalize and add their residual internally, so the
//! shell adds only the (optionally dropped-out) branch output.

mod layers;
mod mhsa;
mod model;

pub use layers::{
    conformer_layer_forward, conv_module_forward, ffn_forward, layer_forward, transformer_layer_forward, ConvModuleParams,
    FfnParams, LayerParams, MixerParams, NormParams,
};
pub use mhsa::{mhsa_forward, MhsaParams};
pub use model::{count_model_params, sinusoidal_pe, ModelDescription, ModelSpec, SequenceModel, SCHEMA_VERSION};

use serde::{Deserialize, Serialize};

use crate::bimamba::{param_count, Variant};
use crate::error::{Error, Result};
use crate::mamba::MambaConfig;
use crate::numerics::attended;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Transformer,
    Conformer,
    /// Mixer only, no feed-forward or conv sublayers.
    BareMamba,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Mhsa,
    Mamba,
    InnBimamba,
    ExtBimamba,
}

impl MixerKind {
    pub fn variant(self) -> Option<Variant> {
        match self {
            MixerKind::Mhsa => None,
            MixerKind::Mamba => Some(Variant::Mamba),
            MixerKind::InnBimamba => Some(Variant::Inn),
            MixerKind::ExtBimamba => Some(Variant::Ext),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockSpec {
    pub kind: LayerKind,
    pub mixer: MixerKind,
    pub causal: bool,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub use_macaron: bool,
    pub use_swish: bool,
    pub use_pe: bool,
    pub dropout_p: f64,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self {
            kind: LayerKind::Transformer,
            mixer: MixerKind::ExtBimamba,
            causal: false,
            d_model: 16,
            n_heads: 4,
            d_ff: 64,
            conv_kernel: 31,
            use_macaron: true,
            use_swish: true,
            use_pe: false,
            dropout_p: 0.0,
        }
    }
}

impl BlockSpec {
    pub fn validate(&self, mamba: &MambaConfig) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be at least 1".into()));
        }
        match self.mixer {
            MixerKind::Mhsa => {
                if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
                    return Err(Error::Config(format!(
                        "d_model {} is not divisible by n_heads {}",
                        self.d_model, self.n_heads
                    )));
                }
            }
            MixerKind::Mamba if !self.causal => {
                return Err(Error::Config("unidirectional mamba mixer is causal; set causal = true".into()));
            }
            MixerKind::InnBimamba | MixerKind::ExtBimamba if self.causal => {
                return Err(Error::Config("bidirectional mixers cannot be causal".into()));
            }
            _ => {}
        }
        if self.mixer != MixerKind::Mhsa {
            mamba.validate()?;
            if mamba.d_model != self.d_model {
                return Err(Error::Config(format!(
                    "mamba d_model {} differs from block d_model {}",
                    mamba.d_model, self.d_model
                )));
            }
        }
        if self.kind != LayerKind::BareMamba && self.d_ff == 0 {
            return Err(Error::Config("d_ff must be at least 1".into()));
        }
        if self.kind == LayerKind::Conformer {
            if self.conv_kernel == 0 {
                return Err(Error::Config("conv_kernel must be at least 1".into()));
            }
            if !self.causal && self.conv_kernel % 2 == 0 {
                return Err(Error::Config(format!("non-causal conv kernel must be odd, got {}", self.conv_kernel)));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p)));
        }
        if self.use_pe && self.d_model % 2 != 0 {
            return Err(Error::Config(format!("positional encoding needs an even d_model, got {}", self.d_model)));
        }
        Ok(())
    }
}

fn norm_count(d: usize) -> usize {
    2 * d
}

fn ffn_count(d: usize, d_ff: usize) -> usize {
    norm_count(d) + d * d_ff + d_ff + d_ff * d + d
}

fn conv_module_count(d: usize, k: usize) -> usize {
    norm_count(d) + d * 2 * d + 2 * d + d * k + d + norm_count(d) + d * d + d
}

fn mixer_count(spec: &BlockSpec, cfg: &MambaConfig) -> usize {
    let d = spec.d_model;
    match spec.mixer.variant() {
        None => norm_count(d) + 4 * (d * d + d),
        Some(v) => param_count(v, cfg),
    }
}

/// Closed-form learnable-scalar count of one layer.
pub fn layer_param_count(spec: &BlockSpec, cfg: &MambaConfig) -> usize {
    let d = spec.d_model;
    let mixer = mixer_count(spec, cfg);
    match spec.kind {
        LayerKind::BareMamba => mixer,
        LayerKind::Transformer => mixer + ffn_count(d, spec.d_ff),
        LayerKind::Conformer => {
            let ffns = if spec.use_macaron { 2 } else { 1 };
            mixer + ffns * ffn_count(d, spec.d_ff) + conv_module_count(d, spec.conv_kernel) + norm_count(d)
        }
    }
}

/// Closed-form multiply-accumulate count of one layer's forward over a
/// single sequence of length `len`. Only contractions are counted: matrix
/// products, convolution taps, scan updates and readouts, attention scores
/// and mixing.
pub fn count_macs(spec: &BlockSpec, cfg: &MambaConfig, len: usize) -> u64 {
    let (d, l) = (spec.d_model as u64, len as u64);
    let (e, n, k, r) = (cfg.d_inner() as u64, cfg.d_state as u64, cfg.d_conv as u64, cfg.dt_rank() as u64);
    // conv + parameter generation + scan
    let path = e * k + 2 * e * n + 2 * e * r + 3 * e * n;
    let mixer = match spec.mixer {
        MixerKind::Mhsa => {
            let pairs: usize = (0..len).map(|i| attended(i, len, spec.causal)).sum();
            4 * l * d * d + 2 * pairs as u64 * d
        }
        MixerKind::Mamba => l * (2 * d * e + path + e * d),
        MixerKind::InnBimamba => l * (2 * d * e + 2 * path + e * d),
        MixerKind::ExtBimamba => 2 * l * (2 * d * e + path + e * d),
    };
    let ffn = 2 * l * d * spec.d_ff as u64;
    match spec.kind {
        LayerKind::BareMamba => mixer,
        LayerKind::Transformer => mixer + ffn,
        LayerKind::Conformer => {
            let ffns = if spec.use_macaron { 2 } else { 1 };
            let conv = l * (2 * d * d + d * spec.conv_kernel as u64 + d * d);
            mixer + ffns * ffn + conv
        }
    }
}

#[cfg(test)]
mod tests;
