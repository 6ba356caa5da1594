//! Central finite-difference checks of analytic gradients.

use crate::error::{bail, Result};

use super::rng::Rng;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    /// Perturbation size.
    pub h: f32,
    /// Coordinates sampled per parameter tensor.
    pub samples: usize,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Denominator floor as a fraction of the largest numeric gradient seen in
    /// the same tensor, so near-zero coordinates are judged on the tensor's scale.
    pub floor: f64,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { h: 1e-3, samples: 64, tol: 1e-3, floor: 1e-2, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub groups: Vec<GroupError>,
    pub tol: f64,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

/// Compares `analytic[i]` to central differences of `loss` around `params`.
///
/// `loss` must be a deterministic function of the parameter values. The
/// error of a coordinate is `|analytic − numeric| / max(|numeric|, floor)`,
/// and each tensor reports its worst sampled coordinate.
pub fn finite_diff_check<F>(
    names: &[&str],
    params: &mut [Tensor],
    analytic: &[Tensor],
    mut loss: F,
    cfg: &CheckConfig,
) -> Result<CheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if names.len() != params.len() || analytic.len() != params.len() {
        bail!(Shape, "gradcheck: {} names, {} params, {} grads", names.len(), params.len(), analytic.len());
    }
    let mut rng = Rng::new(cfg.seed);
    let mut groups = Vec::with_capacity(params.len());
    for gi in 0..params.len() {
        if analytic[gi].dims() != params[gi].dims() {
            bail!(Shape, "gradcheck {}: grad {:?} vs param {:?}", names[gi], analytic[gi].dims(), params[gi].dims());
        }
        let n = params[gi].numel();
        let coords: Vec<usize> = if n <= cfg.samples {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(cfg.samples);
            all.sort_unstable();
            all
        };
        let mut pairs = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = params[gi].data()[c];
            let up = orig + cfg.h;
            let down = orig - cfg.h;
            params[gi].data_mut()[c] = up;
            let lp = loss(params)?;
            params[gi].data_mut()[c] = down;
            let lm = loss(params)?;
            params[gi].data_mut()[c] = orig;
            // divide by the step actually representable in f32
            let numeric = (lp - lm) / (up as f64 - down as f64);
            pairs.push((analytic[gi].data()[c] as f64, numeric));
        }
        let scale = pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
        let floor = (cfg.floor * scale).max(1e-12);
        let max_rel_err = pairs.iter().map(|&(a, n)| (a - n).abs() / n.abs().max(floor)).fold(0.0, f64::max);
        groups.push(GroupError { name: names[gi].to_string(), max_rel_err, coords: coords.len() });
    }
    Ok(CheckReport { groups, tol: cfg.tol })
}
