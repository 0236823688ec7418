//! Two-class 2-D classification with and without a feed-forward sublayer.
//!
//! Each point becomes a length-2 sequence (one coordinate per step), embedded
//! by a shared `Linear(1 -> D)`, mixed by one external BiMamba layer, mean
//! pooled and mapped to a logit.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::report::GridPoint;
use crate::autodiff::{adam_step, eager_loss, value_and_grad, AdamConfig, Eager, Graph, Objective, OptimState, Tape};
use crate::blocks::{BlockSpec, LayerKind, MixerKind, ModelSpec, SequenceModel};
use crate::error::{Error, Result};
use crate::mamba::MambaConfig;
use crate::numerics::sigmoid;
use crate::params::seeded_rng;
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Gaussians,
    Spirals,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Gaussians => "gaussians",
            DatasetKind::Spirals => "spirals",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset2D {
    /// `[M, 2]`
    pub points: Tensor,
    pub labels: Vec<u8>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const GAUSSIAN_CENTER: f64 = 2.0;
pub const GAUSSIAN_VARIANCE: f64 = 0.5;
pub const SPIRAL_NOISE: f64 = 0.2;
pub const TEST_FRACTION: f64 = 0.2;

/// `n / 2` points per class, split per class into train and test.
pub fn gen_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset2D> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::Domain(format!("dataset size must be even and at least 2, got {n}")));
    }
    let mut rng = seeded_rng(kind.name(), seed);
    let half = n / 2;
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    match kind {
        DatasetKind::Gaussians => {
            let noise = Normal::new(0.0, GAUSSIAN_VARIANCE.sqrt()).expect("valid std");
            for (label, c) in [(0u8, -GAUSSIAN_CENTER), (1, GAUSSIAN_CENTER)] {
                for _ in 0..half {
                    pts.push(c + noise.sample(&mut rng));
                    pts.push(c + noise.sample(&mut rng));
                    labels.push(label);
                }
            }
        }
        DatasetKind::Spirals => {
            let noise = Normal::new(0.0, SPIRAL_NOISE).expect("valid std");
            for (label, sign) in [(0u8, 1.0), (1, -1.0)] {
                for _ in 0..half {
                    let theta = rng.random_range(0.0..=3.0 * PI);
                    let r = theta / (3.0 * PI);
                    pts.push(sign * r * theta.cos() + noise.sample(&mut rng));
                    pts.push(sign * r * theta.sin() + noise.sample(&mut rng));
                    labels.push(label);
                }
            }
        }
    }
    let per_class_test = (half as f64 * TEST_FRACTION).round() as usize;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..2 {
        let mut idx: Vec<usize> = (class * half..(class + 1) * half).collect();
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..per_class_test]);
        train.extend_from_slice(&idx[per_class_test..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(Dataset2D { points: Tensor::from_raw(vec![n, 2], pts), labels, train, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryConfig {
    pub n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_state: usize,
    pub expand: usize,
    pub depth: usize,
    pub grid: usize,
    pub margin: f64,
    /// Consecutive seeds per arm in a study.
    pub seeds: usize,
    pub min_gaussian_accuracy: f64,
    /// Required median spiral accuracy gain from adding the feed-forward sublayer.
    pub min_spiral_gap: f64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self { n: 800, epochs: 100, lr: 0.01, d_model: 16, d_ff: 64, d_state: 16, expand: 2, depth: 1, grid: 100, margin: 0.1, seeds: 5, min_gaussian_accuracy: 0.95, min_spiral_gap: 0.10 }
    }
}

impl BoundaryConfig {
    pub fn model_spec(&self, with_ffn: bool) -> ModelSpec {
        ModelSpec {
            input_dim: 1,
            output_dim: 1,
            depth: self.depth,
            pool: true,
            block: BlockSpec {
                kind: if with_ffn { LayerKind::Transformer } else { LayerKind::BareMamba },
                mixer: MixerKind::ExtBimamba,
                causal: false,
                d_model: self.d_model,
                d_ff: self.d_ff,
                ..BlockSpec::default()
            },
            mamba: MambaConfig {
                d_model: self.d_model,
                expand: self.expand,
                d_state: self.d_state,
                ..MambaConfig::default()
            },
        }
    }
}

/// Points as `[M, 2, 1]` sequences.
fn as_sequences(points: &Tensor, idx: &[usize]) -> Tensor {
    let data = idx.iter().flat_map(|&i| points.data()[2 * i..2 * i + 2].iter().copied()).collect();
    Tensor::from_raw(vec![idx.len(), 2, 1], data)
}

struct BceLoss {
    x: Tensor,
    y: Tensor,
}

impl Objective<SequenceModel> for BceLoss {
    fn loss<G: Graph>(&self, g: &mut G, m: &SequenceModel) -> Result<G::T> {
        let x = g.input(self.x.clone());
        let y = g.input(self.y.clone());
        let logits = m.forward(g, &x)?;
        g.bce_with_logits(&logits, &y)
    }
}

fn logits(model: &SequenceModel, x: Tensor) -> Result<Vec<f64>> {
    Ok(model.forward(&mut Eager::new(), &x)?.into_data())
}

fn accuracy(model: &SequenceModel, ds: &Dataset2D, idx: &[usize]) -> Result<f64> {
    let z = logits(model, as_sequences(&ds.points, idx))?;
    let hits = idx.iter().zip(&z).filter(|(&i, &z)| (z > 0.0) == (ds.labels[i] == 1)).count();
    Ok(hits as f64 / idx.len() as f64)
}

#[derive(Clone, Debug)]
pub struct BoundaryRun {
    pub kind: DatasetKind,
    pub with_ffn: bool,
    pub seed: u64,
    pub params: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub losses: Vec<f64>,
    pub grid: Vec<GridPoint>,
}

/// Grid axes spanning the data bounding box plus `margin` of its extent on each side.
pub fn grid_axes(points: &Tensor, size: usize, margin: f64) -> (Vec<f64>, Vec<f64>) {
    let axis = |c: usize| {
        let vals = points.data().iter().skip(c).step_by(2);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let pad = margin * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        (0..size).map(|i| lo + (hi - lo) * i as f64 / (size - 1).max(1) as f64).collect::<Vec<_>>()
    };
    (axis(0), axis(1))
}

/// Full-batch training with Adam, then test accuracy and a decision grid.
pub fn run_boundary_experiment(kind: DatasetKind, with_ffn: bool, seed: u64, cfg: &BoundaryConfig) -> Result<BoundaryRun> {
    if cfg.grid < 2 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("boundary run needs grid >= 2, epochs >= 1 and lr > 0".into()));
    }
    let ds = gen_dataset(kind, cfg.n, seed)?;
    let spec = cfg.model_spec(with_ffn);
    let mut model = SequenceModel::new(spec, seed)?;
    let obj = BceLoss {
        x: as_sequences(&ds.points, &ds.train),
        y: Tensor::from_raw(vec![ds.train.len(), 1], ds.train.iter().map(|&i| ds.labels[i] as f64).collect()),
    };
    let mut opt = OptimState::new(&model, AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grads) = value_and_grad(&model, &obj, &mut Tape::new())
            .map_err(|e| Error::Evaluation(format!("{} epoch {epoch}: {e}", kind.name())))?;
        losses.push(loss);
        adam_step(&mut model, &grads, &mut opt, cfg.lr)?;
    }
    let last = eager_loss(&model, &obj, ScanMode::Sequential)?;
    if !last.is_finite() {
        return Err(Error::Evaluation(format!("{} training diverged", kind.name())));
    }
    losses.push(last);

    let (xs, ys) = grid_axes(&ds.points, cfg.grid, cfg.margin);
    let mut coords = Vec::with_capacity(2 * cfg.grid * cfg.grid);
    for &y in &ys {
        for &x in &xs {
            coords.push(x);
            coords.push(y);
        }
    }
    let n_grid = cfg.grid * cfg.grid;
    let z = logits(&model, Tensor::from_raw(vec![n_grid, 2, 1], coords.clone()))?;
    let grid = z
        .iter()
        .enumerate()
        .map(|(i, &z)| GridPoint { x: coords[2 * i], y: coords[2 * i + 1], pred: (z > 0.0) as u8, score: sigmoid(z) })
        .collect();

    Ok(BoundaryRun {
        kind,
        with_ffn,
        seed,
        params: crate::blocks::count_model_params(&spec),
        train_accuracy: accuracy(&model, &ds, &ds.train)?,
        test_accuracy: accuracy(&model, &ds, &ds.test)?,
        losses,
        grid,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmSummary {
    pub kind: DatasetKind,
    pub with_ffn: bool,
    pub params: usize,
    pub test_accuracy: Vec<f64>,
    pub median_test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct BoundaryStudy {
    pub runs: Vec<BoundaryRun>,
    pub arms: Vec<ArmSummary>,
    pub gaussians_ok: bool,
    pub spiral_gap: f64,
    pub spiral_gap_ok: bool,
}

/// Both datasets, with and without the feed-forward sublayer, over
/// `cfg.seeds` consecutive seeds starting at `seed`.
pub fn run_boundary_study(cfg: &BoundaryConfig, seed: u64) -> Result<BoundaryStudy> {
    if cfg.seeds == 0 {
        return Err(Error::Config("boundary study needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    let mut arms = Vec::new();
    for kind in [DatasetKind::Gaussians, DatasetKind::Spirals] {
        for with_ffn in [false, true] {
            let arm: Vec<BoundaryRun> = (0..cfg.seeds as u64)
                .map(|s| run_boundary_experiment(kind, with_ffn, seed.wrapping_add(s), cfg))
                .collect::<Result<_>>()?;
            let acc: Vec<f64> = arm.iter().map(|r| r.test_accuracy).collect();
            arms.push(ArmSummary { kind, with_ffn, params: arm[0].params, median_test_accuracy: median(&acc), test_accuracy: acc });
            runs.extend(arm);
        }
    }
    let med = |k: DatasetKind, f: bool| arms.iter().find(|a| a.kind == k && a.with_ffn == f).map_or(f64::NAN, |a| a.median_test_accuracy);
    let gaussians_ok = med(DatasetKind::Gaussians, false) >= cfg.min_gaussian_accuracy && med(DatasetKind::Gaussians, true) >= cfg.min_gaussian_accuracy;
    let spiral_gap = med(DatasetKind::Spirals, true) - med(DatasetKind::Spirals, false);
    Ok(BoundaryStudy { runs, arms, gaussians_ok, spiral_gap, spiral_gap_ok: spiral_gap >= cfg.min_spiral_gap })
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
