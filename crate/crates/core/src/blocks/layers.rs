use rand::Rng;

use super::mhsa::{mhsa_forward, MhsaParams};
use super::{BlockSpec, LayerKind, MixerKind, LN_EPS};
use crate::autodiff::Graph;
use crate::bimamba::{ext_bimamba_branch, inn_bimamba_branch, ExtBiMambaParams, InnBiMambaParams};
use crate::error::{Error, Result};
use crate::mamba::{affine, mamba_branch, MambaConfig, MambaParams};
use crate::numerics::{Activation, NormKind};
use crate::params::{impl_parameters, uniform_fan_in, Parameters};
use crate::tensor::Tensor;

/// Layer-norm gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl_parameters!(NormParams { gain, bias });

impl NormParams {
    pub fn new(d: usize) -> Self {
        Self { gain: Tensor::ones(&[d]), bias: Tensor::zeros(&[d]) }
    }
}

pub(crate) fn layer_norm<G: Graph>(g: &mut G, x: &G::T, p: &NormParams) -> Result<G::T> {
    let gain = g.param(&p.gain);
    let bias = g.param(&p.bias);
    g.normalize(x, NormKind::Layer, &gain, Some(&bias), LN_EPS)
}

/// Pre-norm position-wise feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub norm: NormParams,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

impl_parameters!(FfnParams { norm, w_1 as "W_1", b_1, w_2 as "W_2", b_2 });

impl FfnParams {
    pub fn init<R: Rng + ?Sized>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            norm: NormParams::new(d),
            w_1: uniform_fan_in(&[d, d_ff], d, rng),
            b_1: Tensor::zeros(&[d_ff]),
            w_2: uniform_fan_in(&[d_ff, d], d_ff, rng),
            b_2: Tensor::zeros(&[d]),
        }
    }
}

/// `W_2 act(W_1 LN(x) + b_1) + b_2`, without residual.
pub fn ffn_forward<G: Graph>(g: &mut G, x: &G::T, p: &FfnParams, act: Activation) -> Result<G::T> {
    let xn = layer_norm(g, x, &p.norm)?;
    let hidden = affine(g, &xn, &p.w_1, &p.b_1)?;
    let hidden = g.activation(&hidden, act);
    affine(g, &hidden, &p.w_2, &p.b_2)
}

/// Pointwise expansion with GLU, depthwise conv, norm, activation, pointwise projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvModuleParams {
    pub norm: NormParams,
    pub pw1_w: Tensor,
    pub pw1_b: Tensor,
    pub dw_w: Tensor,
    pub dw_b: Tensor,
    pub mid_norm: NormParams,
    pub pw2_w: Tensor,
    pub pw2_b: Tensor,
}

impl_parameters!(ConvModuleParams { norm, pw1_w, pw1_b, dw_w, dw_b, mid_norm, pw2_w, pw2_b });

impl ConvModuleParams {
    pub fn init<R: Rng + ?Sized>(d: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            norm: NormParams::new(d),
            pw1_w: uniform_fan_in(&[d, 2 * d], d, rng),
            pw1_b: Tensor::zeros(&[2 * d]),
            dw_w: uniform_fan_in(&[d, kernel], kernel, rng),
            dw_b: Tensor::zeros(&[d]),
            mid_norm: NormParams::new(d),
            pw2_w: uniform_fan_in(&[d, d], d, rng),
            pw2_b: Tensor::zeros(&[d]),
        }
    }
}

/// Conv module output, without residual.
pub fn conv_module_forward<G: Graph>(g: &mut G, x: &G::T, p: &ConvModuleParams, causal: bool, act: Activation) -> Result<G::T> {
    let xn = layer_norm(g, x, &p.norm)?;
    let wide = affine(g, &xn, &p.pw1_w, &p.pw1_b)?;
    let gated = g.glu(&wide)?;
    let (w, b) = (g.param(&p.dw_w), g.param(&p.dw_b));
    let conv = g.conv1d(&gated, &w, &b, causal)?;
    let conv = layer_norm(g, &conv, &p.mid_norm)?;
    let conv = g.activation(&conv, act);
    affine(g, &conv, &p.pw2_w, &p.pw2_b)
}

#[derive(Clone, Debug, PartialEq)]
pub enum MixerParams {
    Mhsa { norm: NormParams, attn: MhsaParams },
    Mamba(MambaParams),
    Inn(InnBiMambaParams),
    Ext(ExtBiMambaParams),
}

impl Parameters for MixerParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            MixerParams::Mhsa { norm, attn } => {
                norm.visit(&mut |n, t| f(format!("norm.{n}"), t));
                attn.visit(f);
            }
            MixerParams::Mamba(p) => p.visit(f),
            MixerParams::Inn(p) => p.visit(f),
            MixerParams::Ext(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            MixerParams::Mhsa { norm, attn } => {
                norm.visit_mut(&mut |n, t| f(format!("norm.{n}"), t));
                attn.visit_mut(f);
            }
            MixerParams::Mamba(p) => p.visit_mut(f),
            MixerParams::Inn(p) => p.visit_mut(f),
            MixerParams::Ext(p) => p.visit_mut(f),
        }
    }
}

impl MixerParams {
    pub fn init<R: Rng + ?Sized>(spec: &BlockSpec, cfg: &MambaConfig, rng: &mut R) -> Self {
        match spec.mixer {
            MixerKind::Mhsa => MixerParams::Mhsa { norm: NormParams::new(spec.d_model), attn: MhsaParams::init(spec.d_model, rng) },
            MixerKind::Mamba => MixerParams::Mamba(MambaParams::init_with(cfg, rng)),
            MixerKind::InnBimamba => MixerParams::Inn(InnBiMambaParams::init_with(cfg, rng)),
            MixerKind::ExtBimamba => MixerParams::Ext(ExtBiMambaParams::init_with(cfg, rng)),
        }
    }

    fn kind(&self) -> MixerKind {
        match self {
            MixerParams::Mhsa { .. } => MixerKind::Mhsa,
            MixerParams::Mamba(_) => MixerKind::Mamba,
            MixerParams::Inn(_) => MixerKind::InnBimamba,
            MixerParams::Ext(_) => MixerKind::ExtBimamba,
        }
    }

    /// Sublayer output before the residual.
    fn branch<G: Graph>(&self, g: &mut G, x: &G::T, spec: &BlockSpec) -> Result<G::T> {
        match self {
            MixerParams::Mhsa { norm, attn } => {
                let xn = layer_norm(g, x, norm)?;
                mhsa_forward(g, &xn, attn, spec.n_heads, spec.causal)
            }
            MixerParams::Mamba(p) => mamba_branch(g, x, p),
            MixerParams::Inn(p) => inn_bimamba_branch(g, x, p),
            MixerParams::Ext(p) => ext_bimamba_branch(g, x, p),
        }
    }
}

/// One layer. Transformer layers use `mixer` and `ffn`; Conformer layers add
/// `macaron_ffn` (when enabled), `conv` and `final_norm`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub mixer: MixerParams,
    pub macaron_ffn: Option<FfnParams>,
    pub conv: Option<ConvModuleParams>,
    pub ffn: Option<FfnParams>,
    pub final_norm: Option<NormParams>,
}

impl_parameters!(LayerParams { mixer, macaron_ffn, conv, ffn, final_norm });

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(spec: &BlockSpec, cfg: &MambaConfig, rng: &mut R) -> Self {
        let d = spec.d_model;
        let mixer = MixerParams::init(spec, cfg, rng);
        let conformer = spec.kind == LayerKind::Conformer;
        let macaron_ffn = (conformer && spec.use_macaron).then(|| FfnParams::init(d, spec.d_ff, rng));
        let conv = conformer.then(|| ConvModuleParams::init(d, spec.conv_kernel, rng));
        let ffn = (spec.kind != LayerKind::BareMamba).then(|| FfnParams::init(d, spec.d_ff, rng));
        let final_norm = conformer.then(|| NormParams::new(d));
        Self { mixer, macaron_ffn, conv, ffn, final_norm }
    }

    fn check(&self, spec: &BlockSpec) -> Result<()> {
        let conformer = spec.kind == LayerKind::Conformer;
        let ok = self.mixer.kind() == spec.mixer
            && self.macaron_ffn.is_some() == (conformer && spec.use_macaron)
            && self.conv.is_some() == conformer
            && self.ffn.is_some() == (spec.kind != LayerKind::BareMamba)
            && self.final_norm.is_some() == conformer;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("layer parameters do not match block spec {spec:?}")))
        }
    }
}

fn residual<G: Graph>(g: &mut G, x: &G::T, branch: &G::T, spec: &BlockSpec, weight: f64) -> Result<G::T> {
    let dropped = g.dropout(branch, spec.dropout_p);
    let scaled = if weight == 1.0 { dropped } else { g.scale(&dropped, weight) };
    g.add(x, &scaled)
}

fn mixer_sublayer<G: Graph>(g: &mut G, x: &G::T, spec: &BlockSpec, p: &LayerParams) -> Result<G::T> {
    let branch = p.mixer.branch(g, x, spec)?;
    residual(g, x, &branch, spec, 1.0)
}

fn expect_kind(spec: &BlockSpec, kind: LayerKind) -> Result<()> {
    if spec.kind == kind {
        Ok(())
    } else {
        Err(Error::Config(format!("expected a {kind:?} block, got {:?}", spec.kind)))
    }
}

/// `x = H + Mixer(H)`, then `x + FFN(x)` with a ReLU feed-forward.
pub fn transformer_layer_forward<G: Graph>(g: &mut G, h: &G::T, spec: &BlockSpec, p: &LayerParams) -> Result<G::T> {
    expect_kind(spec, LayerKind::Transformer)?;
    p.check(spec)?;
    let x = mixer_sublayer(g, h, spec, p)?;
    let ffn = p.ffn.as_ref().expect("checked");
    let y = ffn_forward(g, &x, ffn, Activation::Relu)?;
    residual(g, &x, &y, spec, 1.0)
}

/// Half FFN, mixer, conv module, half FFN, final layer-norm. Without macaron
/// the first FFN is dropped and the second gets full weight.
pub fn conformer_layer_forward<G: Graph>(g: &mut G, h: &G::T, spec: &BlockSpec, p: &LayerParams) -> Result<G::T> {
    expect_kind(spec, LayerKind::Conformer)?;
    p.check(spec)?;
    let act = if spec.use_swish { Activation::Swish } else { Activation::Relu };
    let mut x = h.clone();
    let ffn_weight = if let Some(f) = &p.macaron_ffn {
        let y = ffn_forward(g, &x, f, act)?;
        x = residual(g, &x, &y, spec, 0.5)?;
        0.5
    } else {
        1.0
    };
    x = mixer_sublayer(g, &x, spec, p)?;
    let y = conv_module_forward(g, &x, p.conv.as_ref().expect("checked"), spec.causal, act)?;
    x = residual(g, &x, &y, spec, 1.0)?;
    let y = ffn_forward(g, &x, p.ffn.as_ref().expect("checked"), act)?;
    x = residual(g, &x, &y, spec, ffn_weight)?;
    layer_norm(g, &x, p.final_norm.as_ref().expect("checked"))
}

/// Dispatches on `spec.kind`.
pub fn layer_forward<G: Graph>(g: &mut G, h: &G::T, spec: &BlockSpec, p: &LayerParams) -> Result<G::T> {
    match spec.kind {
        LayerKind::Transformer => transformer_layer_forward(g, h, spec, p),
        LayerKind::Conformer => conformer_layer_forward(g, h, spec, p),
        LayerKind::BareMamba => {
            p.check(spec)?;
            mixer_sublayer(g, h, spec, p)
        }
    }
}
