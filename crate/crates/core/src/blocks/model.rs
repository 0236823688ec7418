use serde::{Deserialize, Serialize};

use super::layers::{layer_forward, LayerParams};
use super::{layer_param_count, BlockSpec, LayerKind, MixerKind};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::mamba::{affine, AInit, MambaConfig};
use crate::params::{impl_parameters, seeded_rng, uniform_fan_in};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

/// Interleaved sinusoidal encoding: `pe[l, 2i] = sin(l w_i)`,
/// `pe[l, 2i+1] = cos(l w_i)`, `w_i = 10000^(-2i/D)`.
pub fn sinusoidal_pe(len: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even width, got {d}")));
    }
    let mut out = Vec::with_capacity(len * d);
    for l in 0..len {
        for i in 0..d / 2 {
            let w = 10000f64.powf(-2.0 * i as f64 / d as f64);
            let a = l as f64 * w;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Ok(Tensor::from_raw(vec![len, d], out))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub depth: usize,
    pub block: BlockSpec,
    pub mamba: MambaConfig,
    /// Mean over time before the head.
    pub pool: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("input_dim and output_dim must be at least 1".into()));
        }
        self.block.validate(&self.mamba)
    }
}

/// Input embedding, optional positional encoding, `depth` layers, optional
/// mean pooling and an output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel {
    pub spec: ModelSpec,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl_parameters!(SequenceModel { embed_w, embed_b, layers, head_w, head_b });

impl SequenceModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng("model", seed);
        let d = spec.block.d_model;
        let embed_w = uniform_fan_in(&[spec.input_dim, d], spec.input_dim, &mut rng);
        let embed_b = Tensor::zeros(&[d]);
        let layers = (0..spec.depth).map(|_| LayerParams::init(&spec.block, &spec.mamba, &mut rng)).collect();
        let head_w = uniform_fan_in(&[d, spec.output_dim], d, &mut rng);
        let head_b = Tensor::zeros(&[spec.output_dim]);
        Ok(Self { spec, embed_w, embed_b, layers, head_w, head_b })
    }

    /// `x: [B, L, input_dim]` to `[B, L, output_dim]`, or `[B, output_dim]` when pooled.
    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::T) -> Result<G::T> {
        let mut h = affine(g, x, &self.embed_w, &self.embed_b)?;
        if self.spec.block.use_pe {
            let (b, l, d) = g.value(&h).dims3()?;
            let pe = sinusoidal_pe(l, d)?;
            let tiled = Tensor::from_raw(vec![b, l, d], pe.data().repeat(b));
            let pe = g.input(tiled);
            h = g.add(&h, &pe)?;
        }
        for layer in &self.layers {
            h = layer_forward(g, &h, &self.spec.block, layer)?;
        }
        if self.spec.pool {
            h = g.mean_time(&h)?;
        }
        affine(g, &h, &self.head_w, &self.head_b)
    }
}

/// Closed-form learnable-scalar count of a [`SequenceModel`].
pub fn count_model_params(spec: &ModelSpec) -> usize {
    let d = spec.block.d_model;
    spec.input_dim * d + d + spec.depth * layer_param_count(&spec.block, &spec.mamba) + d * spec.output_dim + spec.output_dim
}

fn one() -> usize {
    1
}

/// Flat JSON model description. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescription {
    pub schema_version: u32,
    #[serde(default = "one")]
    pub depth: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub input_dim: usize,
    #[serde(default = "one")]
    pub output_dim: usize,
    #[serde(default)]
    pub pool: bool,

    pub kind: LayerKind,
    pub mixer: MixerKind,
    #[serde(default)]
    pub causal: bool,
    pub d_model: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::d_ff")]
    pub d_ff: usize,
    #[serde(default = "defaults::conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "defaults::yes")]
    pub use_macaron: bool,
    #[serde(default = "defaults::yes")]
    pub use_swish: bool,
    #[serde(default)]
    pub use_pe: bool,
    #[serde(default)]
    pub dropout_p: f64,

    #[serde(default = "defaults::expand")]
    pub expand: usize,
    #[serde(default = "defaults::d_state")]
    pub d_state: usize,
    #[serde(default = "defaults::d_conv")]
    pub d_conv: usize,
    #[serde(default = "defaults::dt_reduction")]
    pub dt_reduction: usize,
    #[serde(default)]
    pub a_init: AInit,
    #[serde(default = "defaults::a_noise_sigma")]
    pub a_noise_sigma: f64,
}

mod defaults {
    use crate::blocks::BlockSpec;
    use crate::mamba::MambaConfig;

    pub fn n_heads() -> usize {
        BlockSpec::default().n_heads
    }
    pub fn d_ff() -> usize {
        BlockSpec::default().d_ff
    }
    pub fn conv_kernel() -> usize {
        BlockSpec::default().conv_kernel
    }
    pub fn yes() -> bool {
        true
    }
    pub fn expand() -> usize {
        MambaConfig::default().expand
    }
    pub fn d_state() -> usize {
        MambaConfig::default().d_state
    }
    pub fn d_conv() -> usize {
        MambaConfig::default().d_conv
    }
    pub fn dt_reduction() -> usize {
        MambaConfig::default().dt_reduction
    }
    pub fn a_noise_sigma() -> f64 {
        MambaConfig::default().a_noise_sigma
    }
}

impl ModelDescription {
    pub fn from_json(text: &str) -> Result<Self> {
        let desc: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("model description: {e}")))?;
        if desc.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                desc.schema_version
            )));
        }
        desc.spec().validate()?;
        Ok(desc)
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            depth: self.depth,
            pool: self.pool,
            block: BlockSpec {
                kind: self.kind,
                mixer: self.mixer,
                causal: self.causal,
                d_model: self.d_model,
                n_heads: self.n_heads,
                d_ff: self.d_ff,
                conv_kernel: self.conv_kernel,
                use_macaron: self.use_macaron,
                use_swish: self.use_swish,
                use_pe: self.use_pe,
                dropout_p: self.dropout_p,
            },
            mamba: MambaConfig {
                d_model: self.d_model,
                expand: self.expand,
                d_state: self.d_state,
                d_conv: self.d_conv,
                dt_reduction: self.dt_reduction,
                a_init: self.a_init,
                a_noise_sigma: self.a_noise_sigma,
            },
        }
    }
}
