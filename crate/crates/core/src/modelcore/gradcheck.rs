//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{DetectorParams, Grads};
use crate::error::{Error, Result};

/// Gradients below this magnitude are compared in absolute terms.
const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the loss is not differentiable there.
    pub skipped_kinks: usize,
}

/// Compares `loss_fn`'s analytic gradient with central differences at up to
/// `max_coords` sampled scalar coordinates.
///
/// A coordinate is treated as sitting on a kink (and skipped) when the
/// forward and backward one-sided slopes disagree by more than
/// `kink_tol * max(|slope|, 1)`.
pub fn grad_check<F>(
    loss_fn: F,
    params: &DetectorParams,
    epsilon: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&DetectorParams) -> Result<(f64, Grads)>,
{
    grad_check_with(loss_fn, params, epsilon, max_coords, seed, 1e-3)
}

pub fn grad_check_with<F>(
    loss_fn: F,
    params: &DetectorParams,
    epsilon: f64,
    max_coords: usize,
    seed: u64,
    kink_tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&DetectorParams) -> Result<(f64, Grads)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config("grad_check epsilon must be positive".into()));
    }
    let (f0, analytic) = loss_fn(params)?;
    if !f0.is_finite() {
        return Err(Error::Divergence(format!("loss is not finite: {f0}")));
    }

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, p)| (0..p.data.len()).map(move |i| (name.clone(), i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let eval = |p: &DetectorParams| -> Result<f64> {
        let (v, _) = loss_fn(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Divergence(format!("loss is not finite: {v}")))
        }
    };
    for &ci in &chosen {
        let (name, i) = &coords[ci];
        let original = probe.get(name).data[*i];
        probe.get_mut(name).data[*i] = original + epsilon;
        let fp = eval(&probe)?;
        probe.get_mut(name).data[*i] = original - epsilon;
        let fm = eval(&probe)?;
        probe.get_mut(name).data[*i] = original;

        let forward = (fp - f0) / epsilon;
        let backward = (f0 - fm) / epsilon;
        if (forward - backward).abs() > kink_tol * forward.abs().max(backward.abs()).max(1.0) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * epsilon);
        let a = analytic.get(name)[*i];
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / denom);
        report.checked += 1;
    }
    Ok(report)
}
