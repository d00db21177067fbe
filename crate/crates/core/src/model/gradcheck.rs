//! Central-difference verification of end-to-end gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossWeights, Stage, Targets, ToyModel};
use crate::error::Result;
use crate::graph::{FrozenBand, Tape};
use crate::tensor::Tensor;

/// Signed-square-root inputs closer to zero than this are held fixed.
pub const SQRT_ZERO_BAND: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub h: f64,
    pub min_coordinates: usize,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { h: 1e-6, min_coordinates: 200, tolerance: 1e-5, denominator_floor: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub checks: Vec<CoordinateCheck>,
    /// Signed-square-root coordinates inside the zero band.
    pub sqrt_band_excluded: usize,
    pub h: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `grad` against central differences of `loss` at `coords` of `x`.
pub fn check_coordinates(
    name: &str,
    x: &Tensor,
    grad: &Tensor,
    coords: &[usize],
    cfg: &GradCheckConfig,
    mut loss: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Vec<CoordinateCheck>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let base = x.data()[i];
        probe.data_mut()[i] = base + cfg.h;
        let up = loss(&probe)?;
        probe.data_mut()[i] = base - cfg.h;
        let down = loss(&probe)?;
        probe.data_mut()[i] = base;
        let numeric = (up - down) / (2.0 * cfg.h);
        let analytic = grad.data()[i];
        out.push(CoordinateCheck {
            tensor: name.to_string(),
            index: i,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, cfg.denominator_floor),
        });
    }
    Ok(out)
}

fn frozen_bands(sqrt_inputs: &[Tensor]) -> (Vec<FrozenBand>, usize) {
    let mut excluded = 0;
    let bands = sqrt_inputs
        .iter()
        .map(|x| {
            let mask: Vec<bool> = x.data().iter().map(|v| v.abs() < SQRT_ZERO_BAND).collect();
            excluded += mask.iter().filter(|&&m| m).count();
            let values = x.data().iter().map(|v| v.signum() * v.abs().sqrt()).collect();
            FrozenBand { mask, values }
        })
        .collect();
    (bands, excluded)
}

fn total_loss(
    model: &ToyModel,
    image: &Tensor,
    targets: &Targets,
    weights: LossWeights,
    bands: &[FrozenBand],
) -> Result<f64> {
    let mut tape = Tape::with_frozen_bands(bands.to_vec());
    let x = tape.constant(image.clone());
    let vars = model.record(&mut tape, x, Stage::Full)?;
    Ok(model.record_loss(&mut tape, &vars, targets, Stage::Full, weights)?.1.total)
}

/// Compares analytic parameter and input gradients of the full objective
/// with central differences on a stratified sample of coordinates.
pub fn grad_check(
    model: &ToyModel,
    image: &Tensor,
    targets: &Targets,
    weights: LossWeights,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut probe = Tape::new();
    let x = probe.constant(image.clone());
    model.record(&mut probe, x, Stage::Full)?;
    let (bands, sqrt_band_excluded) = frozen_bands(probe.sqrt_inputs());

    let mut tape = Tape::with_frozen_bands(bands.clone());
    let x = tape.input(image.clone());
    let vars = model.record(&mut tape, x, Stage::Full)?;
    let (root, _) = model.record_loss(&mut tape, &vars, targets, Stage::Full, weights)?;
    let grads = tape.backward(root)?;
    let mut param_grads: Vec<Option<Tensor>> = vec![None; model.params().len()];
    for (slot, g) in tape.param_grads(&grads) {
        param_grads[slot] = Some(g);
    }
    let image_grad = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(image.shape().to_vec()));

    let total: usize = model.params().num_scalars() + image.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pick = |n: usize| -> Vec<usize> {
        let k = ((cfg.min_coordinates * n).div_ceil(total)).clamp(2, n);
        (0..k).map(|_| rng.gen_range(0..n)).collect()
    };

    let mut checks = Vec::new();
    let mut work = model.clone();
    for slot in 0..model.params().len() {
        let value = model.params().value(slot).clone();
        let grad = param_grads[slot].clone().unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let coords = pick(value.len());
        let name = model.params().name(slot).to_string();
        checks.extend(check_coordinates(&name, &value, &grad, &coords, cfg, |p| {
            *work.params_mut().value_mut(slot) = p.clone();
            let l = total_loss(&work, image, targets, weights, &bands);
            *work.params_mut().value_mut(slot) = value.clone();
            l
        })?);
    }
    let coords = pick(image.len());
    checks.extend(check_coordinates("image", image, &image_grad, &coords, cfg, |img| {
        total_loss(model, img, targets, weights, &bands)
    })?);

    let worst = checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).cloned();
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        coordinates_checked: checks.len(),
        max_rel_error,
        worst,
        checks,
        sqrt_band_excluded,
        h: cfg.h,
        tolerance: cfg.tolerance,
        passed: max_rel_error < cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_quadratic_are_exact() {
        let x = Tensor::vector((0..50).map(|i| i as f64 * 0.01 - 0.25).collect()).unwrap();
        let c = Tensor::vector((0..50).map(|i| (i % 3) as f64 + 1.0).collect()).unwrap();
        let loss = |t: &Tensor| Ok(t.dot(&c).unwrap() + 0.5 * t.dot(t).unwrap());
        let grad = x.add(&c).unwrap();
        let coords: Vec<usize> = (0..50).collect();
        let cfg = GradCheckConfig::default();
        let checks = check_coordinates("x", &x, &grad, &coords, &cfg, loss).unwrap();
        let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let wrong = Tensor::vector(vec![2.0, 5.0]).unwrap();
        let checks =
            check_coordinates("x", &x, &wrong, &[0, 1], &GradCheckConfig::default(), |t| Ok(t.dot(t).unwrap()))
                .unwrap();
        assert!(checks[1].rel_error > 0.1);
    }
}
