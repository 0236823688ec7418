//! Short-time Fourier frontend and synthetic noisy mixtures.

use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::seeded_rng;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: f64 = 16000.0;
pub const WIN: usize = 512;
pub const HOP: usize = 256;
pub const BINS: usize = WIN / 2 + 1;

/// Periodic square-root Hann window; its square overlap-adds to one at half-window hop.
pub fn sqrt_hann(win: usize) -> Vec<f64> {
    (0..win).map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos()).sqrt()).collect()
}

/// One-sided complex spectrogram, row-major `[frames, bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub win: usize,
    pub hop: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.win / 2 + 1
    }

    pub fn magnitude(&self) -> Tensor {
        Tensor::from_raw(vec![self.frames, self.bins()], self.data.iter().map(|c| c.norm()).collect())
    }

    pub fn phase(&self) -> Tensor {
        Tensor::from_raw(vec![self.frames, self.bins()], self.data.iter().map(|c| c.arg()).collect())
    }

    pub fn from_polar(mag: &Tensor, phase: &Tensor, win: usize, hop: usize) -> Result<Self> {
        mag.expect_same_shape(phase)?;
        let (frames, bins) = mag.dims2()?;
        if bins != win / 2 + 1 {
            return Err(dim_err!("{bins} bins do not match window {win}"));
        }
        let data = mag.data().iter().zip(phase.data()).map(|(&m, &p)| Complex64::from_polar(m, p)).collect();
        Ok(Self { win, hop, frames, data })
    }
}

fn check_frame_params(win: usize, hop: usize) -> Result<()> {
    if win == 0 || win % 2 != 0 || hop == 0 || hop > win {
        return Err(Error::Config(format!("invalid frame parameters win={win}, hop={hop}")));
    }
    Ok(())
}

/// Uncentered STFT with a sqrt-Hann window: `1 + (len - win) / hop` frames.
pub fn stft(x: &[f64], win: usize, hop: usize) -> Result<Spectrogram> {
    check_frame_params(win, hop)?;
    if x.len() < win {
        return Err(Error::Domain(format!("signal of {} samples is shorter than the {win}-sample window", x.len())));
    }
    let frames = 1 + (x.len() - win) / hop;
    let bins = win / 2 + 1;
    let window = sqrt_hann(win);
    let fft = FftPlanner::new().plan_fft_forward(win);
    let mut buf = vec![Complex64::new(0.0, 0.0); win];
    let mut data = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let seg = &x[f * hop..f * hop + win];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram { win, hop, frames, data })
}

/// Windowed overlap-add inverse; output length `(frames - 1) * hop + win`.
/// Samples in [`interior`] are reconstructed exactly.
pub fn istft(spec: &Spectrogram, win: usize, hop: usize) -> Result<Vec<f64>> {
    check_frame_params(win, hop)?;
    if spec.win != win || spec.hop != hop || spec.data.len() != spec.frames * spec.bins() {
        return Err(Error::Config(format!(
            "spectrogram was built with win={}, hop={}; asked to invert with win={win}, hop={hop}",
            spec.win, spec.hop
        )));
    }
    let bins = spec.bins();
    let window = sqrt_hann(win);
    let ifft = FftPlanner::new().plan_fft_inverse(win);
    let mut out = vec![0.0; (spec.frames.max(1) - 1) * hop + win];
    let mut buf = vec![Complex64::new(0.0, 0.0); win];
    for f in 0..spec.frames {
        let row = &spec.data[f * bins..(f + 1) * bins];
        buf[..bins].copy_from_slice(row);
        for k in bins..win {
            buf[k] = row[win - k].conj();
        }
        ifft.process(&mut buf);
        let scale = 1.0 / win as f64;
        for n in 0..win {
            out[f * hop + n] += buf[n].re * scale * window[n];
        }
    }
    Ok(out)
}

/// Samples covered by two frames, where overlap-add is exact.
pub fn interior(frames: usize, hop: usize) -> Range<usize> {
    hop..frames * hop
}

/// Elementwise `mag^alpha`.
pub fn power_law_compress(mag: &Tensor, alpha: f64) -> Result<Tensor> {
    crate::autodiff::check_pow(mag, alpha)?;
    Ok(mag.map(|v| v.powf(alpha)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureMeta {
    pub snr_db: f64,
    pub seed: u64,
}

/// Clean and noisy magnitudes with the noisy phase, plus the waveforms they came from.
#[derive(Clone, Debug)]
pub struct SpectralPair {
    pub noisy_mag: Tensor,
    pub clean_mag: Tensor,
    pub phase: Tensor,
    pub meta: MixtureMeta,
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
}

/// Sum of three amplitude-modulated sinusoids at random frequencies.
fn am_tones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for _ in 0..3 {
        let freq = rng.random_range(150.0..4000.0);
        let amp = rng.random_range(0.3..1.0);
        let rate = rng.random_range(1.0..8.0);
        let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64 / SAMPLE_RATE;
            *v += amp * (1.0 + 0.5 * (2.0 * PI * rate * t + p1).sin()) * (2.0 * PI * freq * t + p2).sin();
        }
    }
    x
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `10 log10(|clean|^2 / |clean - est|^2)`.
pub fn snr_db(clean: &[f64], est: &[f64]) -> f64 {
    let err: f64 = clean.iter().zip(est).map(|(c, e)| (c - e) * (c - e)).sum();
    10.0 * (energy(clean) / err).log10()
}

/// Clean tones plus white Gaussian noise scaled to exactly `snr_db`.
pub fn gen_noisy_mixture(seed: u64, snr_db: f64, dur_s: f64) -> Result<SpectralPair> {
    if !(dur_s >= 0.5) || !snr_db.is_finite() {
        return Err(Error::Domain(format!("mixture needs dur_s >= 0.5 and a finite SNR, got {dur_s}, {snr_db}")));
    }
    let mut rng = seeded_rng("mixture", seed);
    let n = (dur_s * SAMPLE_RATE).round() as usize;
    let clean = am_tones(n, &mut rng);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let gain = (energy(&clean) / energy(&raw) / 10f64.powf(snr_db / 10.0)).sqrt();
    let noisy: Vec<f64> = clean.iter().zip(&raw).map(|(c, r)| c + gain * r).collect();
    let cs = stft(&clean, WIN, HOP)?;
    let ns = stft(&noisy, WIN, HOP)?;
    Ok(SpectralPair {
        noisy_mag: ns.magnitude(),
        clean_mag: cs.magnitude(),
        phase: ns.phase(),
        meta: MixtureMeta { snr_db, seed },
        clean,
        noisy,
    })
}
