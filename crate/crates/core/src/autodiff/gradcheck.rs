//! Central finite-difference gradient checking.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{eager_loss, value_and_grad, Objective, Tape};
use crate::error::{dim_err, Error, Result};
use crate::params::{flatten, unflatten, Parameters};
use crate::ssm::ScanMode;

pub const DEFAULT_FD_EPS: f64 = 1e-4;
pub const MIN_FD_SAMPLES: usize = 200;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `grad` (analytic, one entry per coordinate of `theta`) against
/// central differences of `f` on `samples` random coordinates, or all of them
/// if there are fewer.
///
/// Relative error is `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn finite_diff_check<F>(mut f: F, theta: &[f64], grad: &[f64], eps: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    if grad.len() != theta.len() {
        return Err(dim_err!("gradient has {} entries for {} parameters", grad.len(), theta.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<usize> = if samples >= theta.len() {
        (0..theta.len()).collect()
    } else {
        let mut c = index::sample(&mut rng, theta.len(), samples).into_vec();
        c.sort_unstable();
        c
    };

    let mut eval = |x: &[f64]| -> Result<f64> {
        let v = f(x)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("objective returned {v}")))
        }
    };

    let mut work = theta.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_index: 0, checked: coords.len() };
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = eval(&work)?;
        work[i] = orig - eps;
        let minus = eval(&work)?;
        work[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let ad = grad[i];
        let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Reverse-mode gradients of `obj` on the tape against central differences
/// of the eager evaluation, on `samples` random coordinates.
pub fn check_model_gradients<P, O>(params: &P, obj: &O, eps: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    O: Objective<P>,
{
    let (_, grads) = value_and_grad(params, obj, &mut Tape::new())?;
    let flat_grad: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let theta = flatten(params);
    let mut work = params.clone();
    finite_diff_check(
        |x| {
            unflatten(&mut work, x)?;
            eager_loss(&work, obj, ScanMode::Sequential)
        },
        &theta,
        &flat_grad,
        eps,
        samples,
        seed,
    )
}
