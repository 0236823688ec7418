//! Toy spectral-mask denoiser over synthetic tone-plus-noise mixtures.
//!
//! Frames of compressed noisy magnitude go through a [`SequenceModel`]; a
//! per-bin affine skip from the input is added to its output before the
//! sigmoid so every bin keeps its own identity past the narrow model width.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::audio::{gen_noisy_mixture, interior, istft, power_law_compress, snr_db, Spectrogram, SpectralPair, BINS, HOP, WIN};
use crate::autodiff::{adam_step, grad_norm, value_and_grad, warmup_lr, AdamConfig, Eager, Graph, Objective, OptimState, Tape, TrainLogEntry};
use crate::blocks::{count_model_params, BlockSpec, LayerKind, MixerKind, ModelSpec, SequenceModel};
use crate::error::{Error, Result};
use crate::mamba::MambaConfig;
use crate::numerics::Activation;
use crate::params::{impl_parameters, seeded_rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    pub mixers: Vec<MixerKind>,
    pub d_model: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub d_state: usize,
    pub expand: usize,
    /// Feed-forward width of the reference (ext BiMamba) model; the others are
    /// solved to match its parameter count.
    pub reference_d_ff: usize,
    pub budget_tolerance: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub dur_s: f64,
    pub train_snr_db: (f64, f64),
    pub test_snr_db: f64,
    pub steps: u64,
    pub batch: usize,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub alpha: f64,
    pub min_improvement_db: f64,
    /// Allowed shortfall of the bidirectional model against the causal one.
    pub ordering_tolerance_db: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            mixers: vec![MixerKind::Mhsa, MixerKind::Mamba, MixerKind::ExtBimamba],
            d_model: 16,
            depth: 2,
            n_heads: 4,
            d_state: 16,
            expand: 2,
            reference_d_ff: 32,
            budget_tolerance: 0.05,
            n_train: 256,
            n_test: 32,
            dur_s: 1.0,
            train_snr_db: (-10.0, 20.0),
            test_snr_db: 0.0,
            steps: 2000,
            batch: 8,
            warmup_steps: 100,
            lr_scale: 1.0,
            alpha: 0.3,
            min_improvement_db: 5.0,
            ordering_tolerance_db: 0.3,
        }
    }
}

impl DenoiseConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("denoise config: {m}")));
        if self.mixers.is_empty() {
            return bad("at least one mixer is required");
        }
        if self.n_train == 0 || self.n_test == 0 || self.batch == 0 || self.steps == 0 || self.warmup_steps == 0 {
            return bad("n_train, n_test, batch, steps and warmup_steps must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.lr_scale > 0.0) {
            return bad("alpha must lie in (0, 1] and lr_scale must be positive");
        }
        if !(self.train_snr_db.0 <= self.train_snr_db.1) || !(self.budget_tolerance >= 0.0) {
            return bad("invalid SNR range or budget tolerance");
        }
        Ok(())
    }

    /// Non-causal everywhere except the unidirectional mamba mixer.
    pub fn model_spec(&self, mixer: MixerKind, d_ff: usize) -> ModelSpec {
        ModelSpec {
            input_dim: BINS,
            output_dim: BINS,
            depth: self.depth,
            pool: false,
            block: BlockSpec {
                kind: LayerKind::Transformer,
                mixer,
                causal: mixer == MixerKind::Mamba,
                d_model: self.d_model,
                n_heads: self.n_heads,
                d_ff,
                ..BlockSpec::default()
            },
            mamba: MambaConfig { d_model: self.d_model, expand: self.expand, d_state: self.d_state, ..MambaConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseModel {
    pub net: SequenceModel,
    /// `[BINS, 1]`
    pub bin_gain: Tensor,
    pub bin_bias: Tensor,
}

impl_parameters!(DenoiseModel { net suffix "", bin_gain, bin_bias });

impl DenoiseModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        Ok(Self { net: SequenceModel::new(spec, seed)?, bin_gain: Tensor::zeros(&[BINS, 1]), bin_bias: Tensor::zeros(&[BINS]) })
    }

    /// Mask in `(0, 1)` from compressed noisy magnitudes `[B, L, BINS]`.
    pub fn mask<G: Graph>(&self, g: &mut G, x: &G::T) -> Result<G::T> {
        let h = self.net.forward(g, x)?;
        let gain = g.param(&self.bin_gain);
        let bias = g.param(&self.bin_bias);
        let skip = g.conv1d(x, &gain, &bias, true)?;
        let z = g.add(&h, &skip)?;
        Ok(g.activation(&z, Activation::Sigmoid))
    }
}

pub fn denoise_param_count(spec: &ModelSpec) -> usize {
    count_model_params(spec) + 2 * BINS
}

/// Feed-forward width that brings `mixer` to `target` parameters, or an error
/// if no width lands within `tol`.
pub fn match_budget(cfg: &DenoiseConfig, mixer: MixerKind, target: usize, tol: f64) -> Result<usize> {
    let base = denoise_param_count(&cfg.model_spec(mixer, 0)) as f64;
    let per_unit = denoise_param_count(&cfg.model_spec(mixer, 1)) as f64 - base;
    let d_ff = ((target as f64 - base) / per_unit).round().max(1.0) as usize;
    let got = denoise_param_count(&cfg.model_spec(mixer, d_ff));
    let rel = (got as f64 - target as f64).abs() / target as f64;
    if rel > tol {
        return Err(Error::Config(format!("{mixer:?} cannot match {target} parameters within {tol} (closest {got})")));
    }
    Ok(d_ff)
}

/// Compressed-domain mask loss `mean((m^a * noisy^a - clean^a)^2)`.
struct MaskLoss {
    noisy_c: Tensor,
    clean_c: Tensor,
    alpha: f64,
}

impl Objective<DenoiseModel> for MaskLoss {
    fn loss<G: Graph>(&self, g: &mut G, m: &DenoiseModel) -> Result<G::T> {
        let x = g.input(self.noisy_c.clone());
        let mask = m.mask(g, &x)?;
        let mc = g.pow(&mask, self.alpha)?;
        let est = g.mul(&mc, &x)?;
        let target = g.input(self.clean_c.clone());
        let err = g.sub(&est, &target)?;
        let sq = g.mul(&err, &err)?;
        Ok(g.mean(&sq))
    }
}

fn stack(pairs: &[&SpectralPair], pick: impl Fn(&SpectralPair) -> &Tensor, alpha: f64) -> Result<Tensor> {
    let frames = pick(pairs[0]).shape()[0];
    let mut data = Vec::with_capacity(pairs.len() * frames * BINS);
    for p in pairs {
        data.extend_from_slice(power_law_compress(pick(p), alpha)?.data());
    }
    Ok(Tensor::from_raw(vec![pairs.len(), frames, BINS], data))
}

/// Interior time-domain SNR gain of `mask * noisy_mag` resynthesized with the noisy phase.
pub fn snr_improvement(pair: &SpectralPair, mask: &Tensor) -> Result<f64> {
    let mag = pair.noisy_mag.zip_map(mask, |n, m| n * m)?;
    let spec = Spectrogram::from_polar(&mag, &pair.phase, WIN, HOP)?;
    let est = istft(&spec, WIN, HOP)?;
    let range = interior(spec.frames, HOP);
    let clean = &pair.clean[range.clone()];
    Ok(snr_db(clean, &est[range.clone()]) - snr_db(clean, &pair.noisy[range]))
}

/// `clamp(clean / noisy, 0, 1)` per time-frequency point.
pub fn oracle_mask(pair: &SpectralPair) -> Result<Tensor> {
    pair.clean_mag.zip_map(&pair.noisy_mag, |c, n| if n > 0.0 { (c / n).clamp(0.0, 1.0) } else { 0.0 })
}

#[derive(Clone, Debug, Serialize)]
pub struct MixerOutcome {
    pub mixer: MixerKind,
    pub causal: bool,
    pub d_ff: usize,
    pub params: usize,
    pub final_train_loss: f64,
    pub test_snr_improvement_db: f64,
    #[serde(skip)]
    pub log: Vec<TrainLogEntry>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DenoiseOutcome {
    pub reference_params: usize,
    pub mixers: Vec<MixerOutcome>,
    pub identity_improvement_db: f64,
    pub oracle_improvement_db: f64,
}

impl DenoiseOutcome {
    pub fn improvement(&self, mixer: MixerKind) -> Option<f64> {
        self.mixers.iter().find(|m| m.mixer == mixer).map(|m| m.test_snr_improvement_db)
    }

    /// Both bidirectional and causal models clear the floor, and the
    /// bidirectional one is no worse than the causal one beyond the tolerance.
    /// `None` when either mixer was not trained.
    pub fn ordering_holds(&self, cfg: &DenoiseConfig) -> Option<bool> {
        let ext = self.improvement(MixerKind::ExtBimamba)?;
        let uni = self.improvement(MixerKind::Mamba)?;
        Some(ext > cfg.min_improvement_db && uni > cfg.min_improvement_db && ext >= uni - cfg.ordering_tolerance_db)
    }

    /// Budget spread relative to the reference model.
    pub fn max_budget_deviation(&self) -> f64 {
        let r = self.reference_params as f64;
        self.mixers.iter().map(|m| (m.params as f64 - r).abs() / r).fold(0.0, f64::max)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn train_one(cfg: &DenoiseConfig, mixer: MixerKind, d_ff: usize, train: &[SpectralPair], test: &[SpectralPair], seed: u64) -> Result<MixerOutcome> {
    let spec = cfg.model_spec(mixer, d_ff);
    let mut model = DenoiseModel::new(spec, seed)?;
    let mut opt = OptimState::new(&model, AdamConfig::default());
    // same batch order for every mixer
    let mut rng = seeded_rng("denoise-batches", seed);
    let batch = cfg.batch.min(train.len());
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        let picked: Vec<&SpectralPair> = sample(&mut rng, train.len(), batch).into_iter().map(|i| &train[i]).collect();
        let obj = MaskLoss {
            noisy_c: stack(&picked, |p| &p.noisy_mag, cfg.alpha)?,
            clean_c: stack(&picked, |p| &p.clean_mag, cfg.alpha)?,
            alpha: cfg.alpha,
        };
        let (loss, grads) = value_and_grad(&model, &obj, &mut Tape::new())
            .map_err(|e| Error::Evaluation(format!("{mixer:?} step {step}: {e}")))?;
        let lr = cfg.lr_scale * warmup_lr(step, cfg.d_model, cfg.warmup_steps)?;
        adam_step(&mut model, &grads, &mut opt, lr)?;
        log.push(TrainLogEntry { step, lr, loss, grad_norm: grad_norm(&grads), wall_ms: t0.elapsed().as_secs_f64() * 1e3 });
    }
    let gains = test
        .iter()
        .map(|p| {
            let x = power_law_compress(&p.noisy_mag, cfg.alpha)?;
            let (l, b) = x.dims2()?;
            let mask = model.mask(&mut Eager::new(), &x.reshape(&[1, l, b])?)?;
            snr_improvement(p, &mask.reshape(&[l, b])?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MixerOutcome {
        mixer,
        causal: spec.block.causal,
        d_ff,
        params: denoise_param_count(&spec),
        final_train_loss: log.last().map_or(f64::NAN, |e| e.loss),
        test_snr_improvement_db: mean(gains.into_iter()),
        log,
    })
}

/// Trains one model per mixer at a matched parameter budget and scores each
/// on held-out mixtures at the test SNR.
pub fn run_denoise_experiment(cfg: &DenoiseConfig, seed: u64) -> Result<DenoiseOutcome> {
    cfg.validate()?;
    let mut rng = seeded_rng("denoise-data", seed);
    let train = (0..cfg.n_train)
        .map(|_| {
            let snr = rng.random_range(cfg.train_snr_db.0..=cfg.train_snr_db.1);
            gen_noisy_mixture(rng.random(), snr, cfg.dur_s)
        })
        .collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.n_test).map(|_| gen_noisy_mixture(rng.random(), cfg.test_snr_db, cfg.dur_s)).collect::<Result<Vec<_>>>()?;

    let reference_params = denoise_param_count(&cfg.model_spec(MixerKind::ExtBimamba, cfg.reference_d_ff));
    let mut mixers = Vec::with_capacity(cfg.mixers.len());
    for &mixer in &cfg.mixers {
        let d_ff = if mixer == MixerKind::ExtBimamba {
            cfg.reference_d_ff
        } else {
            match_budget(cfg, mixer, reference_params, cfg.budget_tolerance)?
        };
        mixers.push(train_one(cfg, mixer, d_ff, &train, &test, seed)?);
    }
    let identity = test.iter().map(|p| snr_improvement(p, &Tensor::ones(p.noisy_mag.shape()))).collect::<Result<Vec<_>>>()?;
    let oracle = test.iter().map(|p| snr_improvement(p, &oracle_mask(p)?)).collect::<Result<Vec<_>>>()?;
    Ok(DenoiseOutcome {
        reference_params,
        mixers,
        identity_improvement_db: mean(identity.into_iter()),
        oracle_improvement_db: mean(oracle.into_iter()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiseConfig {
        DenoiseConfig { d_model: 4, depth: 1, n_heads: 2, d_state: 2, reference_d_ff: 8, n_train: 3, n_test: 1, dur_s: 0.5, steps: 2, batch: 2, ..Default::default() }
    }

    #[test]
    fn budgets_match_reference() {
        let cfg = DenoiseConfig::default();
        let target = denoise_param_count(&cfg.model_spec(MixerKind::ExtBimamba, cfg.reference_d_ff));
        for mixer in [MixerKind::Mhsa, MixerKind::Mamba, MixerKind::InnBimamba] {
            let d_ff = match_budget(&cfg, mixer, target, 0.05).unwrap();
            let got = denoise_param_count(&cfg.model_spec(mixer, d_ff));
            assert!((got as f64 - target as f64).abs() / (target as f64) < 0.05);
        }
        assert!(match_budget(&cfg, MixerKind::ExtBimamba, 100, 0.05).is_err());
    }

    #[test]
    fn param_count_matches_enumeration() {
        let spec = tiny().model_spec(MixerKind::Mhsa, 8);
        let m = DenoiseModel::new(spec, 0).unwrap();
        use crate::params::Parameters;
        assert_eq!(m.num_scalars(), denoise_param_count(&spec));
    }

    #[test]
    fn forced_identity_mask_gives_zero_gain() {
        let pair = gen_noisy_mixture(3, 0.0, 0.5).unwrap();
        let mut m = DenoiseModel::new(tiny().model_spec(MixerKind::ExtBimamba, 8), 1).unwrap();
        m.net.head_w = Tensor::zeros(m.net.head_w.shape());
        m.bin_bias = Tensor::full(&[BINS], 40.0);
        let x = power_law_compress(&pair.noisy_mag, 0.3).unwrap();
        let (l, b) = x.dims2().unwrap();
        let mask = m.mask(&mut Eager::new(), &x.reshape(&[1, l, b]).unwrap()).unwrap();
        assert!(snr_improvement(&pair, &mask.reshape(&[l, b]).unwrap()).unwrap().abs() < 1e-9);
    }

    #[test]
    fn oracle_mask_beats_passthrough() {
        let pair = gen_noisy_mixture(4, 0.0, 1.0).unwrap();
        let m = oracle_mask(&pair).unwrap();
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(snr_improvement(&pair, &m).unwrap() > 5.0);
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let cfg = tiny();
        let a = run_denoise_experiment(&cfg, 9).unwrap();
        let b = run_denoise_experiment(&cfg, 9).unwrap();
        assert_eq!(a.mixers.len(), 3);
        for (x, y) in a.mixers.iter().zip(&b.mixers) {
            assert_eq!(x.test_snr_improvement_db, y.test_snr_improvement_db);
            assert_eq!(x.log.len(), 2);
        }
        assert!(a.identity_improvement_db.abs() < 1e-9);
        assert!(a.oracle_improvement_db > a.identity_improvement_db);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = DenoiseConfig { alpha: 0.0, ..tiny() };
        assert!(matches!(run_denoise_experiment(&cfg, 0), Err(Error::Config(_))));
        let cfg = DenoiseConfig { mixers: vec![], ..tiny() };
        assert!(run_denoise_experiment(&cfg, 0).is_err());
    }
}
