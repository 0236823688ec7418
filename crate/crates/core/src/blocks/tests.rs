use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::layer_norm;
use super::*;
use crate::autodiff::{check_model_gradients, Eager, Graph, Objective, Tape};
use crate::bimamba::ext_bimamba_forward;
use crate::numerics::{normalize, sigmoid, NormKind};
use crate::params::{seeded_rng, Parameters};
use crate::tensor::Tensor;

fn mcfg(d: usize) -> MambaConfig {
    MambaConfig { d_model: d, expand: 2, d_state: 3, d_conv: 3, dt_reduction: 4, ..Default::default() }
}

fn spec(kind: LayerKind, mixer: MixerKind) -> BlockSpec {
    BlockSpec {
        kind,
        mixer,
        causal: mixer == MixerKind::Mamba,
        d_model: 4,
        n_heads: 2,
        d_ff: 6,
        conv_kernel: 3,
        ..Default::default()
    }
}

fn layer(s: &BlockSpec, seed: u64) -> LayerParams {
    LayerParams::init(s, &mcfg(s.d_model), &mut seeded_rng("test-layer", seed))
}

fn input(seed: u64, b: usize, l: usize, d: usize) -> Tensor {
    Tensor::randn(&[b, l, d], &mut ChaCha8Rng::seed_from_u64(seed))
}

fn run(s: &BlockSpec, p: &LayerParams, h: &Tensor) -> Tensor {
    layer_forward(&mut Eager::new(), h, s, p).unwrap()
}

const ALL_MIXERS: [MixerKind; 4] = [MixerKind::Mhsa, MixerKind::Mamba, MixerKind::InnBimamba, MixerKind::ExtBimamba];
const ALL_KINDS: [LayerKind; 3] = [LayerKind::Transformer, LayerKind::Conformer, LayerKind::BareMamba];

fn mhsa(h: &Tensor, p: &MhsaParams, heads: usize, causal: bool) -> Tensor {
    mhsa_forward(&mut Eager::new(), h, p, heads, causal).unwrap()
}

fn random_mhsa(d: usize, seed: u64) -> MhsaParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MhsaParams::init(d, &mut rng);
    p.b_q = Tensor::randn(&[d], &mut rng);
    p.b_v = Tensor::randn(&[d], &mut rng);
    p.b_o = Tensor::randn(&[d], &mut rng);
    p
}

fn row_mat(v: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (rows, cols) = w.dims2().unwrap();
    (0..cols).map(|c| b.data()[c] + (0..rows).map(|r| v[r] * w.data()[r * cols + c]).sum::<f64>()).collect()
}

#[test]
fn mhsa_single_token_is_value_projection() {
    let p = random_mhsa(4, 1);
    let h = input(2, 3, 1, 4);
    let got = mhsa(&h, &p, 2, false);
    for b in 0..3 {
        let x = &h.data()[b * 4..(b + 1) * 4];
        let expect = row_mat(&row_mat(x, &p.w_v, &p.b_v), &p.w_o, &p.b_o);
        for j in 0..4 {
            assert!((got.data()[b * 4 + j] - expect[j]).abs() < 1e-13);
        }
    }
}

#[test]
fn mhsa_identical_tokens_give_identical_outputs() {
    let p = random_mhsa(4, 3);
    let tok = input(4, 1, 1, 4);
    let h = Tensor::from_raw(vec![1, 5, 4], tok.data().repeat(5));
    let y = mhsa(&h, &p, 2, false);
    for l in 1..5 {
        assert_eq!(y.data()[..4], y.data()[l * 4..(l + 1) * 4]);
    }
}

#[test]
fn mhsa_two_tokens_by_hand() {
    let d = 2;
    let eye = Tensor::eye(d);
    let zero = Tensor::zeros(&[d]);
    let p = MhsaParams {
        w_q: eye.clone(),
        b_q: zero.clone(),
        w_k: Tensor::from_raw(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]),
        b_k: zero.clone(),
        w_v: eye.clone(),
        b_v: zero.clone(),
        w_o: eye,
        b_o: zero,
    };
    let h = Tensor::from_raw(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let y = mhsa(&h, &p, 1, false);
    // keys (2,0), (0,1); scale 1/sqrt(2)
    let s = 1.0 / 2f64.sqrt();
    let w0 = sigmoid(2.0 * s - 0.0);
    let w1 = sigmoid(1.0 * s - 0.0);
    let expect = [w0, 1.0 - w0, 1.0 - w1, w1];
    for (g, e) in y.data().iter().zip(expect) {
        assert!((g - e).abs() < 1e-14);
    }
}

#[test]
fn mhsa_permutation_equivariant_and_causal_prefix() {
    let p = random_mhsa(4, 5);
    let h = input(6, 1, 5, 4);
    let perm = [3, 0, 4, 1, 2];
    let permute = |t: &Tensor| {
        Tensor::from_raw(vec![1, 5, 4], perm.iter().flat_map(|&i| t.data()[i * 4..(i + 1) * 4].to_vec()).collect())
    };
    let y = mhsa(&h, &p, 2, false);
    assert!(mhsa(&permute(&h), &p, 2, false).max_abs_diff(&permute(&y)).unwrap() < 1e-13);

    let mut h2 = h.clone();
    h2.data_mut()[4 * 4] += 1.0;
    let (a, b) = (mhsa(&h, &p, 2, true), mhsa(&h2, &p, 2, true));
    assert_eq!(a.data()[..16], b.data()[..16]);
    assert!(matches!(mhsa_forward(&mut Eager::new(), &h, &p, 3, false), Err(Error::Config(_))));
}

#[test]
fn spec_validation() {
    let m = mcfg(4);
    for mixer in ALL_MIXERS {
        for kind in ALL_KINDS {
            spec(kind, mixer).validate(&m).unwrap();
        }
    }
    let bad = [
        BlockSpec { causal: false, ..spec(LayerKind::Transformer, MixerKind::Mamba) },
        BlockSpec { causal: true, ..spec(LayerKind::Transformer, MixerKind::ExtBimamba) },
        BlockSpec { n_heads: 3, ..spec(LayerKind::Transformer, MixerKind::Mhsa) },
        BlockSpec { conv_kernel: 4, ..spec(LayerKind::Conformer, MixerKind::ExtBimamba) },
        BlockSpec { dropout_p: 1.0, ..spec(LayerKind::Transformer, MixerKind::Mhsa) },
        BlockSpec { d_model: 3, use_pe: true, n_heads: 1, ..spec(LayerKind::Transformer, MixerKind::Mhsa) },
    ];
    for s in bad {
        assert!(matches!(s.validate(&mcfg(s.d_model)), Err(Error::Config(_))), "{s:?}");
    }
    assert!(spec(LayerKind::Transformer, MixerKind::ExtBimamba).validate(&mcfg(8)).is_err());
    let causal_even = BlockSpec { conv_kernel: 4, ..spec(LayerKind::Conformer, MixerKind::Mamba) };
    causal_even.validate(&m).unwrap();
}

#[test]
fn wrong_kind_is_rejected() {
    let s = spec(LayerKind::Transformer, MixerKind::Mhsa);
    let p = layer(&s, 0);
    let h = input(1, 1, 3, 4);
    let conf = BlockSpec { kind: LayerKind::Conformer, ..s };
    assert!(conformer_layer_forward(&mut Eager::new(), &h, &conf, &p).is_err());
    assert!(transformer_layer_forward(&mut Eager::new(), &h, &s, &layer(&conf, 0)).is_err());
}

fn silence_outputs(p: &mut LayerParams) {
    let z = |t: &mut Tensor| *t = Tensor::zeros(t.shape());
    match &mut p.mixer {
        MixerParams::Mhsa { attn, .. } => {
            z(&mut attn.w_o);
            z(&mut attn.b_o);
        }
        MixerParams::Mamba(m) => z(&mut m.w_out),
        MixerParams::Inn(m) => z(&mut m.w_out),
        MixerParams::Ext(m) => {
            z(&mut m.fwd.w_out);
            z(&mut m.bwd.w_out);
        }
    }
    for f in [&mut p.macaron_ffn, &mut p.ffn].into_iter().flatten() {
        z(&mut f.w_2);
        z(&mut f.b_2);
    }
    if let Some(c) = &mut p.conv {
        z(&mut c.pw2_w);
        z(&mut c.pw2_b);
    }
}

#[test]
fn dead_sublayers_give_identity() {
    for mixer in ALL_MIXERS {
        for kind in [LayerKind::Transformer, LayerKind::BareMamba] {
            let s = spec(kind, mixer);
            let mut p = layer(&s, 1);
            silence_outputs(&mut p);
            let h = input(2, 2, 5, 4);
            assert_eq!(run(&s, &p, &h), h, "{kind:?} {mixer:?}");
        }
        // the conformer ends in a layer-norm, so the dead layer is that norm
        let s = spec(LayerKind::Conformer, mixer);
        let mut p = layer(&s, 1);
        silence_outputs(&mut p);
        let h = input(3, 2, 5, 4).map(|v| 10.0 * v);
        let normed = normalize(&h, NormKind::Layer, &Tensor::ones(&[4]), Some(&Tensor::zeros(&[4])), LN_EPS).unwrap();
        assert_eq!(run(&s, &p, &h), normed);
        let back = run(&s, &p, &normed);
        assert!(back.max_abs_diff(&normed).unwrap() < 1e-4);
    }
}

#[test]
fn transformer_is_mixer_then_ffn() {
    let s = spec(LayerKind::Transformer, MixerKind::ExtBimamba);
    let p = layer(&s, 4);
    let h = input(5, 2, 6, 4);
    let MixerParams::Ext(m) = &p.mixer else { unreachable!() };
    let g = &mut Eager::new();
    let x = ext_bimamba_forward(g, &h, m).unwrap();
    let y = ffn_forward(g, &x, p.ffn.as_ref().unwrap(), crate::numerics::Activation::Relu).unwrap();
    let expect = x.zip_map(&y, |a, b| a + b).unwrap();
    assert!(run(&s, &p, &h).max_abs_diff(&expect).unwrap() < 1e-14);
}

#[test]
fn causal_layers_are_prefix_stable() {
    for (kind, mixer) in [
        (LayerKind::Transformer, MixerKind::Mamba),
        (LayerKind::Transformer, MixerKind::Mhsa),
        (LayerKind::Conformer, MixerKind::Mamba),
    ] {
        let s = BlockSpec { causal: true, ..spec(kind, mixer) };
        let p = layer(&s, 7);
        let h = input(8, 1, 7, 4);
        let mut h2 = h.clone();
        for v in &mut h2.data_mut()[5 * 4..] {
            *v -= 0.7;
        }
        let (a, b) = (run(&s, &p, &h), run(&s, &p, &h2));
        assert_eq!(a.data()[..20], b.data()[..20], "{kind:?} {mixer:?}");
    }
}

#[test]
fn macaron_adds_exactly_one_ffn() {
    let on = spec(LayerKind::Conformer, MixerKind::ExtBimamba);
    let off = BlockSpec { use_macaron: false, ..on };
    let m = mcfg(4);
    let ffn = FfnParams::init(4, 6, &mut seeded_rng("x", 0)).num_scalars();
    assert_eq!(layer(&on, 0).num_scalars() - layer(&off, 0).num_scalars(), ffn);
    assert_eq!(layer_param_count(&on, &m) - layer_param_count(&off, &m), ffn);
}

#[test]
fn narrow_conv_module_by_hand() {
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = ConvModuleParams::init(d, 1, &mut rng);
    // pointwise: a = x, b = x (GLU then gives x * sigmoid(x)); output projection identity
    let mut pw1 = vec![0.0; d * 2 * d];
    for i in 0..d {
        pw1[i * 2 * d + i] = 1.0;
        pw1[i * 2 * d + d + i] = 1.0;
    }
    p.pw1_w = Tensor::from_raw(vec![d, 2 * d], pw1);
    p.pw2_w = Tensor::eye(d);
    p.dw_w = Tensor::from_raw(vec![d, 1], vec![0.5, -1.5, 2.0]);
    p.dw_b = Tensor::from_raw(vec![d], vec![0.1, 0.2, -0.3]);
    let h = input(10, 1, 4, d);
    let act = crate::numerics::Activation::Swish;
    let got = conv_module_forward(&mut Eager::new(), &h, &p, false, act).unwrap();
    let ln = |row: &[f64]| {
        let m = row.iter().sum::<f64>() / d as f64;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
        row.iter().map(|x| (x - m) / (v + LN_EPS).sqrt()).collect::<Vec<_>>()
    };
    for l in 0..4 {
        let xn = ln(&h.data()[l * d..(l + 1) * d]);
        let c: Vec<f64> = (0..d).map(|j| p.dw_w.data()[j] * xn[j] * sigmoid(xn[j]) + p.dw_b.data()[j]).collect();
        let cn = ln(&c);
        for j in 0..d {
            let expect = cn[j] * sigmoid(cn[j]);
            assert!((got.data()[l * d + j] - expect).abs() < 1e-13);
        }
    }
}

#[test]
fn positional_encoding() {
    let pe = sinusoidal_pe(50, 8).unwrap();
    assert_eq!(pe.data()[..8], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    for l in [1usize, 17, 49] {
        for i in 0..4 {
            let a = l as f64 / 10000f64.powf(2.0 * i as f64 / 8.0);
            assert!((pe.data()[l * 8 + 2 * i] - a.sin()).abs() < 1e-15);
            assert!((pe.data()[l * 8 + 2 * i + 1] - a.cos()).abs() < 1e-15);
        }
    }
    assert!(matches!(sinusoidal_pe(4, 5), Err(Error::Config(_))));
}

fn all_specs() -> Vec<BlockSpec> {
    let mut out = Vec::new();
    for kind in ALL_KINDS {
        for mixer in ALL_MIXERS {
            out.push(spec(kind, mixer));
        }
    }
    out.push(BlockSpec { use_macaron: false, ..spec(LayerKind::Conformer, MixerKind::Mhsa) });
    out.push(BlockSpec { causal: true, ..spec(LayerKind::Conformer, MixerKind::Mhsa) });
    out
}

#[test]
fn ledgers_match_enumeration() {
    for s in all_specs() {
        let m = mcfg(4);
        assert_eq!(layer(&s, 0).num_scalars(), layer_param_count(&s, &m), "{s:?}");
        let ms = ModelSpec { input_dim: 3, output_dim: 2, depth: 3, block: s, mamba: m, pool: false };
        let model = SequenceModel::new(ms, 1).unwrap();
        assert_eq!(model.layers.len(), 3);
        assert_eq!(model.num_scalars(), count_model_params(&ms));
    }
}

#[test]
fn mac_ledger_matches_counting_forward() {
    for s in all_specs() {
        let m = mcfg(4);
        for l in [1, 5, 12] {
            let mut g = Eager::new();
            g.input(Tensor::zeros(&[1]));
            layer_forward(&mut g, &input(1, 1, l, 4), &s, &layer(&s, 2)).unwrap();
            assert_eq!(g.macs(), count_macs(&s, &m, l), "{s:?} L={l}");
        }
    }
}

#[test]
fn mac_scaling() {
    let m = MambaConfig { d_model: 16, ..Default::default() };
    let bare = |mixer| BlockSpec { kind: LayerKind::BareMamba, mixer, causal: mixer == MixerKind::Mamba, d_model: 16, ..Default::default() };
    let mamba = bare(MixerKind::Mamba);
    assert_eq!(count_macs(&mamba, &m, 2048), 2 * count_macs(&mamba, &m, 1024));
    let att = bare(MixerKind::Mhsa);
    let ratio = count_macs(&att, &m, 16384) as f64 / count_macs(&att, &m, 8192) as f64;
    assert!(ratio > 3.99 && ratio < 4.0, "{ratio}");
    let (inn, ext) = (bare(MixerKind::InnBimamba), bare(MixerKind::ExtBimamba));
    let (d, e) = (16u64, 32u64);
    for l in [1u64, 64, 1000] {
        let diff = count_macs(&ext, &m, l as usize) - count_macs(&inn, &m, l as usize);
        assert_eq!(diff, l * (2 * d * e + e * d));
    }
}

#[test]
fn model_pooling_and_pe() {
    let block = BlockSpec { use_pe: true, ..spec(LayerKind::Transformer, MixerKind::Mhsa) };
    let ms = ModelSpec { input_dim: 2, output_dim: 3, depth: 2, block, mamba: mcfg(4), pool: true };
    let model = SequenceModel::new(ms, 5).unwrap();
    let x = input(11, 4, 6, 2);
    let y = model.forward(&mut Eager::new(), &x).unwrap();
    assert_eq!(y.shape(), [4, 3]);
    let unpooled = SequenceModel { spec: ModelSpec { pool: false, ..ms }, ..model.clone() };
    assert_eq!(unpooled.forward(&mut Eager::new(), &x).unwrap().shape(), [4, 6, 3]);
    let no_pe = SequenceModel { spec: ModelSpec { block: BlockSpec { use_pe: false, ..block }, ..ms }, ..model.clone() };
    assert!(no_pe.forward(&mut Eager::new(), &x).unwrap().max_abs_diff(&y).unwrap() > 1e-6);
}

#[test]
fn dropout_only_in_training() {
    let s = BlockSpec { dropout_p: 0.3, ..spec(LayerKind::Transformer, MixerKind::ExtBimamba) };
    let p = layer(&s, 3);
    let h = input(12, 1, 5, 4);
    let eval = run(&s, &p, &h);
    let mut tape = Tape::new();
    let hv = tape.input(h.clone());
    let y = layer_forward(&mut tape, &hv, &s, &p).unwrap();
    assert!(tape.get(y).unwrap().max_abs_diff(&eval).unwrap() < 1e-13);
    let mut train = Tape::new().training(ChaCha8Rng::seed_from_u64(1));
    let hv = train.input(h);
    let y = layer_forward(&mut train, &hv, &s, &p).unwrap();
    assert!(train.get(y).unwrap().max_abs_diff(&eval).unwrap() > 1e-6);
}

#[test]
fn description_parsing() {
    let text = r#"{"schema_version": 1, "depth": 2, "kind": "conformer", "mixer": "ext_bimamba", "d_model": 8, "d_state": 4}"#;
    let desc = ModelDescription::from_json(text).unwrap();
    let spec = desc.spec();
    assert_eq!(spec.mamba.d_model, 8);
    assert_eq!(spec.block.conv_kernel, 31);
    assert!(ModelDescription::from_json(&text.replace("\"depth\"", "\"depht\"")).is_err());
    assert!(ModelDescription::from_json(&text.replace("\"schema_version\": 1", "\"schema_version\": 2")).is_err());
    assert!(ModelDescription::from_json(&text.replace("ext_bimamba", "mamba")).is_err());
    let round = serde_json::to_string(&desc).unwrap();
    assert_eq!(ModelDescription::from_json(&round).unwrap(), desc);
}

struct LayerMse {
    spec: BlockSpec,
    h: Tensor,
    target: Tensor,
}

impl Objective<LayerParams> for LayerMse {
    fn loss<G: Graph>(&self, g: &mut G, p: &LayerParams) -> Result<G::T> {
        let h = g.input(self.h.clone());
        let t = g.input(self.target.clone());
        let y = layer_forward(g, &h, &self.spec, p)?;
        let d = g.sub(&y, &t)?;
        let sq = g.mul(&d, &d)?;
        Ok(g.mean(&sq))
    }
}

fn perturb_biases(p: &mut LayerParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut(&mut |name, t| {
        if name.ends_with("bias") || name.ends_with("b_1") || name.ends_with("b_2") || name.ends_with("_b") {
            *t = Tensor::randn(t.shape(), &mut rng).map(|v| 0.3 * v);
        }
    });
}

#[test]
fn layer_gradients_match_finite_differences() {
    for (i, s) in [
        spec(LayerKind::Transformer, MixerKind::Mhsa),
        BlockSpec { causal: true, ..spec(LayerKind::Transformer, MixerKind::Mhsa) },
        spec(LayerKind::Conformer, MixerKind::ExtBimamba),
        spec(LayerKind::Conformer, MixerKind::InnBimamba),
        BlockSpec { use_swish: false, use_macaron: false, ..spec(LayerKind::Conformer, MixerKind::Mamba) },
        spec(LayerKind::Transformer, MixerKind::Mamba),
    ]
    .into_iter()
    .enumerate()
    {
        let mut p = layer(&s, 40 + i as u64);
        perturb_biases(&mut p, i as u64);
        let obj = LayerMse { spec: s, h: input(50 + i as u64, 2, 5, 4), target: input(60 + i as u64, 2, 5, 4) };
        let r = check_model_gradients(&p, &obj, 1e-4, 300, i as u64).unwrap();
        assert!(r.max_rel_err < 1e-5, "{s:?}: {r:?}");
    }
}

#[test]
fn layer_norm_helper_uses_bias() {
    let mut p = NormParams::new(2);
    p.bias = Tensor::from_raw(vec![2], vec![1.0, -1.0]);
    let x = Tensor::from_raw(vec![1, 1, 2], vec![3.0, 3.0]);
    let y = layer_norm(&mut Eager::new(), &x, &p).unwrap();
    assert_eq!(y.data(), [1.0, -1.0]);
}
