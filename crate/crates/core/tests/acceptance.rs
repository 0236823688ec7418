//! One test per acceptance criterion. Each prints a single PASS/FAIL line.
//! Tests hold a shared lock so the timing-sensitive ones run alone.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use bimamba::autodiff::{DEFAULT_FD_EPS, MIN_FD_SAMPLES};
use bimamba::bench::{mac_table, time_scaling, BenchConfig};
use bimamba::bimamba::{init_ext, init_inn, param_count, Variant};
use bimamba::experiments::audio::{interior, istft, stft, HOP, WIN};
use bimamba::experiments::{run_boundary_study, run_denoise_experiment, BoundaryConfig, DenoiseConfig};
use bimamba::mamba::{init_params, MambaConfig};
use bimamba::params::Parameters;
use bimamba::ssm::{lti_apply, lti_kernel, selective_scan_parallel, selective_scan_sequential, SsmInputs};
use bimamba::verify::{gradient_suite, random_ssm_inputs, reversal_equivariance};
use bimamba::Tensor;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!("[criterion {id:>2}] {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn within(t: Duration, limit_s: u64) -> bool {
    t <= Duration::from_secs(limit_s)
}

#[test]
fn criterion_01_scan_equivalence() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let l = *[1usize, 2, 3, 16, 257, 1024].choose(&mut rng).unwrap();
        let e = *[1usize, 4, 16].choose(&mut rng).unwrap();
        let n = *[1usize, 4, 16].choose(&mut rng).unwrap();
        let inp = random_ssm_inputs(&mut rng, 1, l, e, n);
        let seq = selective_scan_sequential(&inp).unwrap();
        for chunk in [1, 2, 7, 64, l] {
            worst = worst.max(selective_scan_parallel(&inp, chunk).unwrap().max_abs_diff(&seq).unwrap());
        }
    }
    let t = t0.elapsed();
    let pass = worst < 1e-10 && within(t, 60);
    report(1, "scan equivalence", pass, format!("max diff {worst:.3e} (< 1e-10), {t:.1?} (< 60 s)"));
    assert!(pass);
}

#[test]
fn criterion_02_lti_equivalence() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (l, e, n) = (rng.random_range(1..=128), rng.random_range(1..=8), rng.random_range(1..=8));
        let dt: Vec<f64> = (0..e).map(|_| rng.random_range(0.01..0.5)).collect();
        let a = Tensor::uniform(&[e, n], -2.0, -0.05, &mut rng);
        let bv = Tensor::randn(&[n], &mut rng);
        let cv = Tensor::randn(&[n], &mut rng);
        let u = Tensor::randn(&[1, l, e], &mut rng);
        let inp = SsmInputs {
            u: u.clone(),
            delta: Tensor::from_raw(vec![1, l, e], dt.repeat(l)),
            a: a.clone(),
            b_sel: Tensor::from_raw(vec![1, l, n], bv.data().repeat(l)),
            c_sel: Tensor::from_raw(vec![1, l, n], cv.data().repeat(l)),
            d: Tensor::zeros(&[e]),
        };
        let abar: Vec<f64> = (0..e * n).map(|i| (dt[i / n] * a.data()[i]).exp()).collect();
        let bbar: Vec<f64> = (0..e * n).map(|i| dt[i / n] * bv.data()[i % n]).collect();
        let k = lti_kernel(&Tensor::from_raw(vec![e, n], abar), &Tensor::from_raw(vec![e, n], bbar), &cv, l).unwrap();
        let conv = lti_apply(&u, &k).unwrap();
        worst = worst.max(conv.max_abs_diff(&selective_scan_sequential(&inp).unwrap()).unwrap());
    }
    let pass = worst < 1e-8;
    report(2, "LTI convolution vs recurrence", pass, format!("max diff {worst:.3e} over 50 instances (< 1e-8)"));
    assert!(pass);
}

#[test]
fn criterion_03_gradient_suite() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    assert_eq!((DEFAULT_FD_EPS, MIN_FD_SAMPLES), (1e-4, 200));
    let cases = gradient_suite(303, 200).unwrap();
    let t = t0.elapsed();
    let names: Vec<&str> = cases.iter().map(|c| c.name.as_str()).collect();
    let covered = ["inn_bimamba_layer", "ext_bimamba_layer", "selective_scan", "attention_full", "conv1d_causal"]
        .iter()
        .all(|n| names.contains(n));
    let worst = cases.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let enough = cases.iter().all(|c| c.checked >= 200);
    let pass = covered && enough && worst.max_rel_err < 1e-5 && within(t, 300);
    report(
        3,
        "gradient suite",
        pass,
        format!(
            "{} cases, >= 200 coords each: {enough}, worst {} {:.3e} (< 1e-5), {t:.1?} (< 300 s)",
            cases.len(),
            worst.name,
            worst.max_rel_err
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_reversal_equivariance() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (inn, ext) = reversal_equivariance(404, 50).unwrap();
    let pass = inn < 1e-10 && ext < 1e-10;
    report(4, "bidirectional reversal symmetry", pass, format!("inn {inn:.3e}, ext {ext:.3e} over 50 instances (< 1e-10)"));
    assert!(pass);
}

#[test]
fn criterion_05_parameter_ledgers() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut pass = true;
    let mut checked = 0;
    for i in 0..20 {
        let cfg = MambaConfig {
            d_model: rng.random_range(1..=24),
            expand: rng.random_range(1..=3),
            d_state: rng.random_range(1..=16),
            d_conv: rng.random_range(1..=5),
            dt_reduction: rng.random_range(1..=16),
            ..Default::default()
        };
        let uni = init_params(&cfg, i).unwrap().num_scalars();
        let inn = init_inn(&cfg, i).unwrap().num_scalars();
        let ext = init_ext(&cfg, i).unwrap().num_scalars();
        pass &= uni == param_count(Variant::Mamba, &cfg);
        pass &= inn == param_count(Variant::Inn, &cfg);
        pass &= ext == param_count(Variant::Ext, &cfg);
        pass &= ext > inn && inn > uni;
        checked += 1;
    }
    let d = MambaConfig::default();
    let defaults = [Variant::Mamba, Variant::Inn, Variant::Ext].map(|v| param_count(v, &d));
    report(5, "parameter ledgers", pass, format!("{checked} configs exact and ordered; default counts {defaults:?}"));
    assert!(pass);
}

#[test]
fn criterion_06_complexity_scaling() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let cfg = BenchConfig { parallel_row: false, ..Default::default() };
    assert_eq!(cfg.lengths, [1024, 2048, 4096, 8192, 16384]);
    let cost = time_scaling(&cfg, 606).unwrap();
    let t = t0.elapsed();
    let macs = mac_table(&cfg);
    let ratios: Vec<f64> = macs["mhsa"].iter().zip(&macs["mamba"]).map(|(a, b)| a.1 as f64 / b.1 as f64).collect();
    let increasing = ratios.windows(2).all(|w| w[1] > w[0]);
    let att = cost.slopes.get("mhsa").map_or(f64::NAN, |f| f.slope);
    let scan = cost.slopes.get("mamba").map_or(f64::NAN, |f| f.slope);
    let pass = (1.7..=2.3).contains(&att) && (0.8..=1.3).contains(&scan) && increasing && within(t, 600);
    let iqr = cost.rows.iter().map(|r| r.iqr_ratio).fold(0.0, f64::max);
    report(
        6,
        "complexity scaling",
        pass,
        format!(
            "mhsa slope {att:.3} in [1.7, 2.3], mamba slope {scan:.3} in [0.8, 1.3], MACs ratio increasing {increasing}, {t:.1?} (< 600 s); worst IQR/median {iqr:.3}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_decision_boundary() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let cfg = BoundaryConfig::default();
    assert_eq!((cfg.n, cfg.epochs, cfg.lr, cfg.grid, cfg.seeds), (800, 100, 0.01, 100, 5));
    let study = run_boundary_study(&cfg, 0).unwrap();
    let t = t0.elapsed();
    let grids_ok = study.runs.iter().all(|r| r.grid.len() == 10000);
    let split_ok = study.runs.iter().all(|r| r.losses.len() == 101);
    let pass = study.gaussians_ok && study.spiral_gap >= 0.10 && grids_ok && split_ok && within(t, 600);
    let med: Vec<String> =
        study.arms.iter().map(|a| format!("{}{} {:.3}", a.kind.name(), if a.with_ffn { "+ffn" } else { "" }, a.median_test_accuracy)).collect();
    report(
        7,
        "decision-boundary study",
        pass,
        format!(
            "medians [{}]; gaussians >= 0.95: {}; spiral gap {:.3} (>= 0.10, operationalized threshold); 10000-row grids {grids_ok}; {t:.1?} (< 600 s)",
            med.join(", "),
            study.gaussians_ok,
            study.spiral_gap
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_denoiser_ordering() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let cfg = DenoiseConfig::default();
    assert_eq!((cfg.test_snr_db, cfg.budget_tolerance), (0.0, 0.05));
    let out = run_denoise_experiment(&cfg, 0).unwrap();
    let t = t0.elapsed();
    let ext = out.improvement(bimamba::blocks::MixerKind::ExtBimamba).unwrap();
    let uni = out.improvement(bimamba::blocks::MixerKind::Mamba).unwrap();
    let budget = out.max_budget_deviation();
    let pass = budget <= 0.05 && ext >= uni - 0.3 && ext > 5.0 && uni > 5.0 && within(t, 1200);
    let all: Vec<String> = out.mixers.iter().map(|m| format!("{:?} {:.2} dB ({} params)", m.mixer, m.test_snr_improvement_db, m.params)).collect();
    report(
        8,
        "toy denoiser ordering",
        pass,
        format!(
            "[{}]; budget spread {:.3} (<= 0.05); ext >= mamba - 0.3 and both > 5 dB; oracle {:.2} dB; {t:.1?} (< 1200 s)",
            all.join(", "),
            budget,
            out.oracle_improvement_db
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_stft_round_trip() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.random_range(WIN..8 * WIN);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = stft(&x, WIN, HOP).unwrap();
        let y = istft(&s, WIN, HOP).unwrap();
        for n in interior(s.frames, HOP) {
            worst = worst.max((x[n] - y[n]).abs());
        }
    }
    let pass = worst < 1e-8;
    report(9, "STFT round trip", pass, format!("interior max err {worst:.3e} over 100 signals (< 1e-8)"));
    assert!(pass);
}

fn run_cli(args: &[&str], out: &Path) -> (i32, Vec<u8>) {
    let status = Command::new(env!("CARGO_BIN_EXE_bimamba"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("BIMAMBA_THREADS", "1")
        .output()
        .unwrap();
    let report = fs::read(out.join("report.json")).unwrap_or_default();
    (status.status.code().unwrap_or(-1), report)
}

#[test]
fn criterion_10_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = |name: &str, text: &str| {
        let path = p.join(name);
        fs::write(&path, text).unwrap();
        path.to_str().unwrap().to_string()
    };
    let bench = cfg("bench.json", r#"{"schema_version": 1, "lengths": [16, 32, 64, 256], "d_model": 8, "n_heads": 2, "d_state": 4}"#);
    let boundary = cfg("boundary.json", r#"{"schema_version": 1, "n": 40, "epochs": 3, "d_model": 4, "d_ff": 8, "d_state": 4, "grid": 10, "seeds": 2}"#);
    let denoise = cfg(
        "denoise.json",
        r#"{"schema_version": 1, "d_model": 4, "depth": 1, "n_heads": 2, "d_state": 2, "reference_d_ff": 8, "n_train": 3, "n_test": 1, "dur_s": 0.5, "steps": 3, "batch": 2}"#,
    );
    let model = cfg("model.json", r#"{"schema_version": 1, "kind": "transformer", "mixer": "ext_bimamba", "d_model": 16, "depth": 2}"#);
    let gradcheck = cfg("grad.json", r#"{"schema_version": 1, "samples": 200}"#);
    let equiv = cfg("equiv.json", r#"{"schema_version": 1, "scan_instances": 20, "lti_instances": 10, "reversal_instances": 10}"#);
    let src_grid = p.join("src");
    run_cli(&["boundary", "--config", &boundary, "--seed", "3"], &src_grid);
    assert!(src_grid.join("grid_spirals_ffn.csv").exists());
    let export = cfg("export.json", r#"{"schema_version": 1, "grid_csv": "src/grid_spirals_ffn.csv", "pixel_scale": 2}"#);

    let commands: [(&str, &str); 7] = [
        ("gradcheck", &gradcheck),
        ("equiv", &equiv),
        ("bench", &bench),
        ("boundary", &boundary),
        ("denoise", &denoise),
        ("paramcount", &model),
        ("export-grid", &export),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, config) in commands {
        let a = run_cli(&[name, "--config", config, "--seed", "7"], &p.join(format!("{name}_a")));
        let b = run_cli(&[name, "--config", config, "--seed", "7"], &p.join(format!("{name}_b")));
        let same = !a.1.is_empty() && a.1 == b.1;
        let seeded = String::from_utf8_lossy(&a.1).contains("\"seed\": 7");
        pass &= same && seeded;
        detail.push(format!("{name} {} (exit {})", if same && seeded { "identical" } else { "DIFFERS" }, a.0));
    }
    report(10, "determinism", pass, detail.join(", "));
    assert!(pass);
}
