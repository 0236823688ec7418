//! Analytical MACs and single-threaded wall-clock scaling of mixer layers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Eager;
use crate::blocks::{count_macs, layer_forward, BlockSpec, LayerKind, LayerParams, MixerKind};
use crate::error::{Error, Result};
use crate::mamba::MambaConfig;
use crate::params::seeded_rng;
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub mixers: Vec<MixerKind>,
    pub lengths: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_state: usize,
    pub expand: usize,
    pub reps: usize,
    pub warmups: usize,
    /// Also time the mamba layer with the chunked parallel scan on the full pool.
    pub parallel_row: bool,
    pub parallel_chunk: usize,
    /// Accepted log-log slope ranges.
    pub attention_slope: (f64, f64),
    pub scan_slope: (f64, f64),
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mixers: vec![MixerKind::Mhsa, MixerKind::Mamba],
            lengths: vec![1024, 2048, 4096, 8192, 16384],
            d_model: 16,
            n_heads: 4,
            d_state: 16,
            expand: 2,
            reps: 5,
            warmups: 2,
            parallel_row: true,
            parallel_chunk: 256,
            attention_slope: (1.7, 2.3),
            scan_slope: (0.8, 1.3),
        }
    }
}

pub const MIN_REPS: usize = 5;
pub const MIN_POINTS: usize = 4;
pub const MIN_SPAN: usize = 16;

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("bench config: {m}")));
        if self.mixers.is_empty() {
            return bad("no mixers".into());
        }
        if self.reps < MIN_REPS {
            return bad(format!("reps must be at least {MIN_REPS}"));
        }
        if self.lengths.len() < MIN_POINTS || self.lengths.windows(2).any(|w| w[0] >= w[1]) || self.lengths[0] == 0 {
            return bad(format!("lengths must be {MIN_POINTS}+ strictly ascending positive values"));
        }
        if self.lengths[self.lengths.len() - 1] < MIN_SPAN * self.lengths[0] {
            return bad(format!("lengths must span at least {MIN_SPAN}x"));
        }
        if self.parallel_chunk == 0 {
            return bad("parallel_chunk must be positive".into());
        }
        Ok(())
    }

    /// A bare layer: the mixer alone, no FFN.
    pub fn block(&self, mixer: MixerKind) -> (BlockSpec, MambaConfig) {
        let spec = BlockSpec {
            kind: LayerKind::BareMamba,
            mixer,
            causal: mixer == MixerKind::Mamba,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ..BlockSpec::default()
        };
        let cfg = MambaConfig { d_model: self.d_model, expand: self.expand, d_state: self.d_state, ..MambaConfig::default() };
        (spec, cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mixer: MixerKind,
    pub len: usize,
    pub macs: u64,
    /// Median over `reps` timed forwards.
    pub wall_ms: f64,
    pub reps: usize,
    pub warmups: usize,
    /// Interquartile range over median of the timed reps.
    pub iqr_ratio: f64,
    pub slope_group: String,
    pub skipped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares fit of `log(t)` on `log(len)`.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < MIN_POINTS {
        return Err(Error::Domain(format!("slope fit needs at least {MIN_POINTS} points, got {}", points.len())));
    }
    if points.iter().any(|&(l, t)| !(l > 0.0 && t > 0.0 && l.is_finite() && t.is_finite())) {
        return Err(Error::Domain("slope fit needs positive finite lengths and times".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Domain("slope fit on degenerate (constant) data".into()));
    }
    let slope = sxy / sxx;
    Ok(SlopeFit { slope, intercept: my - slope * mx, r2: sxy * sxy / (sxx * syy) })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and IQR/median of a sample.
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let med = quantile(&s, 0.5);
    (med, (quantile(&s, 0.75) - quantile(&s, 0.25)) / med)
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub rows: Vec<BenchRow>,
    pub slopes: BTreeMap<String, SlopeFit>,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mixer,L,macs,wall_ms,reps,slope_group\n");
        for r in &self.rows {
            let mixer = serde_json::to_value(r.mixer).expect("mixer name");
            let ms = if r.skipped { String::new() } else { r.wall_ms.to_string() };
            writeln!(out, "{},{},{},{},{},{}", mixer.as_str().unwrap_or("?"), r.len, r.macs, ms, r.reps, r.slope_group).unwrap();
        }
        out
    }
}

/// MACs of one bare layer per length; deterministic, no timing.
pub fn mac_table(cfg: &BenchConfig) -> BTreeMap<String, Vec<(usize, u64)>> {
    cfg.mixers
        .iter()
        .map(|&m| {
            let (spec, mc) = cfg.block(m);
            let name = serde_json::to_value(m).expect("mixer name").as_str().unwrap_or("?").to_string();
            (name, cfg.lengths.iter().map(|&l| (l, count_macs(&spec, &mc, l))).collect())
        })
        .collect()
}

fn working_set_ok(spec: &BlockSpec, cfg: &MambaConfig, len: usize) -> bool {
    // a few live activations of width E*N per step is the dominant footprint
    let per_step = (cfg.d_inner() * cfg.d_state).max(spec.d_model) * 8;
    let mut probe: Vec<f64> = Vec::new();
    probe.try_reserve_exact(len.saturating_mul(per_step)).is_ok()
}

fn time_row(spec: &BlockSpec, mc: &MambaConfig, len: usize, mode: ScanMode, cfg: &BenchConfig, seed: u64, group: &str) -> Result<BenchRow> {
    let macs = count_macs(spec, mc, len);
    let mut row = BenchRow {
        mixer: spec.mixer,
        len,
        macs,
        wall_ms: f64::NAN,
        reps: cfg.reps,
        warmups: cfg.warmups,
        iqr_ratio: f64::NAN,
        slope_group: group.to_string(),
        skipped: true,
    };
    if !working_set_ok(spec, mc, len) {
        return Ok(row);
    }
    let mut rng = seeded_rng("bench", seed);
    let params = LayerParams::init(spec, mc, &mut rng);
    let x = Tensor::randn(&[1, len, spec.d_model], &mut rng);
    let mut samples = Vec::with_capacity(cfg.reps);
    for rep in 0..cfg.warmups + cfg.reps {
        let mut g = Eager::with_scan_mode(mode);
        let t0 = Instant::now();
        let y = layer_forward(&mut g, &x, spec, &params)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(&y);
        if rep >= cfg.warmups {
            samples.push(ms);
        }
    }
    let (med, iqr) = median_iqr(&samples);
    row.wall_ms = med;
    row.iqr_ratio = iqr;
    row.skipped = false;
    Ok(row)
}

/// Times every (mixer, length) pair on one thread, plus an optional labeled
/// parallel-scan row set on the caller's pool.
pub fn time_scaling(cfg: &BenchConfig, seed: u64) -> Result<CostReport> {
    cfg.validate()?;
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut rows = Vec::new();
    for &m in &cfg.mixers {
        let (spec, mc) = cfg.block(m);
        spec.validate(&mc)?;
        let group = serde_json::to_value(m)?.as_str().unwrap_or("?").to_string();
        for &len in &cfg.lengths {
            rows.push(single.install(|| time_row(&spec, &mc, len, ScanMode::Sequential, cfg, seed, &group))?);
        }
    }
    if cfg.parallel_row {
        let (spec, mc) = cfg.block(MixerKind::Mamba);
        for &len in &cfg.lengths {
            rows.push(time_row(&spec, &mc, len, ScanMode::Parallel { chunk: cfg.parallel_chunk }, cfg, seed, "mamba_parallel_scan")?);
        }
    }
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.skipped) {
        groups.entry(r.slope_group.clone()).or_default().push((r.len as f64, r.wall_ms));
    }
    let slopes = groups.into_iter().filter_map(|(k, pts)| fit_slope(&pts).ok().map(|f| (k, f))).collect();
    Ok(CostReport { rows, slopes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_laws() {
        let quad: Vec<(f64, f64)> = [64.0, 128.0, 256.0, 512.0, 1024.0].iter().map(|&l| (l, 3e-6 * l * l)).collect();
        let f = fit_slope(&quad).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-9 && (f.r2 - 1.0).abs() < 1e-12);
        let lin: Vec<(f64, f64)> = quad.iter().map(|&(l, _)| (l, 0.5 * l)).collect();
        assert!((fit_slope(&lin).unwrap().slope - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_fits_rejected() {
        let flat = [(1.0, 2.0), (2.0, 2.0), (4.0, 2.0), (8.0, 2.0)];
        assert!(matches!(fit_slope(&flat), Err(Error::Domain(_))));
        let same_x = [(4.0, 1.0), (4.0, 2.0), (4.0, 3.0), (4.0, 5.0)];
        assert!(fit_slope(&same_x).is_err());
        assert!(fit_slope(&flat[..3]).is_err());
        assert!(fit_slope(&[(1.0, 0.0), (2.0, 1.0), (3.0, 2.0), (4.0, 3.0)]).is_err());
    }

    #[test]
    fn median_and_iqr() {
        let (m, r) = median_iqr(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(m, 3.0);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(BenchConfig::default().validate().is_ok());
        assert!(BenchConfig { reps: 4, ..Default::default() }.validate().is_err());
        assert!(BenchConfig { lengths: vec![16, 32, 64, 128], ..Default::default() }.validate().is_err());
        assert!(BenchConfig { lengths: vec![16, 64, 32, 256], ..Default::default() }.validate().is_err());
        assert!(BenchConfig { lengths: vec![16, 32, 64], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn small_run_rows_and_csv() {
        let cfg = BenchConfig { lengths: vec![8, 16, 32, 128], d_model: 8, n_heads: 2, d_state: 4, ..Default::default() };
        let rep = time_scaling(&cfg, 1).unwrap();
        assert_eq!(rep.rows.len(), 12);
        assert!(rep.rows.iter().all(|r| !r.skipped && r.reps == 5 && r.warmups == 2 && r.wall_ms > 0.0));
        let table = mac_table(&cfg);
        assert_eq!(table["mamba"][1].1, 2 * table["mamba"][0].1);
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.starts_with("mixer,L,macs,wall_ms,reps,slope_group\nmhsa,8,"));
        assert!(rep.slopes.contains_key("mamba_parallel_scan"));
    }

    #[test]
    fn mac_ratio_grows_with_length() {
        let cfg = BenchConfig::default();
        let t = mac_table(&cfg);
        let ratios: Vec<f64> = t["mhsa"].iter().zip(&t["mamba"]).map(|(a, b)| a.1 as f64 / b.1 as f64).collect();
        assert!(ratios.windows(2).all(|w| w[1] > w[0]));
    }
}
