//! Training objectives: multi-label attribute BCE, visibility-masked landmark
//! heatmap regression and ID cross-entropy. Each comes with its gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores are clamped into `[SCORE_CLAMP, 1 − SCORE_CLAMP]` before the logs.
pub const SCORE_CLAMP: f64 = 1e-7;

/// Ground-truth attribute presence bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeTarget {
    bits: Vec<bool>,
}

impl AttributeTarget {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Argument("attribute target needs at least one attribute".into()));
        }
        Ok(AttributeTarget { bits })
    }

    /// Accepts 0/1 values and rejects anything else.
    pub fn from_values(values: &[u8]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Argument(format!("attribute label {other} is not 0/1"))),
            })
            .collect::<Result<_>>()?;
        Self::new(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Landmark supervision: per-landmark heatmaps, visibility and the
/// ground-truth `(row, col)` in heatmap cells.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkTarget {
    heatmaps: Tensor,
    visibility: Vec<bool>,
    coords: Vec<(f64, f64)>,
}

impl LandmarkTarget {
    pub fn new(heatmaps: Tensor, visibility: Vec<bool>, coords: Vec<(f64, f64)>) -> Result<Self> {
        let (m, _, _) = heatmaps.dims3()?;
        if visibility.len() != m || coords.len() != m {
            return Err(Error::shape(format!(
                "landmark target: {m} heatmaps, {} visibility flags, {} coordinates",
                visibility.len(),
                coords.len()
            )));
        }
        if heatmaps.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Argument("ground-truth heatmaps must be non-negative".into()));
        }
        Ok(LandmarkTarget { heatmaps, visibility, coords })
    }

    /// Unit-height Gaussian of width `sigma` (in cells) at each visible
    /// landmark, all-zero maps for invisible ones.
    pub fn from_coords(
        coords: Vec<(f64, f64)>,
        visibility: Vec<bool>,
        size: (usize, usize),
        sigma: f64,
    ) -> Result<Self> {
        if coords.len() != visibility.len() || coords.is_empty() {
            return Err(Error::shape("landmark coordinates and visibility must match and be nonempty"));
        }
        if sigma <= 0.0 {
            return Err(Error::Argument("heatmap sigma must be positive".into()));
        }
        let (h, w) = size;
        let mut data = Vec::with_capacity(coords.len() * h * w);
        for (&(r0, c0), &vis) in coords.iter().zip(&visibility) {
            for r in 0..h {
                for c in 0..w {
                    data.push(if vis {
                        let d2 = (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2);
                        (-d2 / (2.0 * sigma * sigma)).exp()
                    } else {
                        0.0
                    });
                }
            }
        }
        let heatmaps = Tensor::new(vec![coords.len(), h, w], data)?;
        Self::new(heatmaps, visibility, coords)
    }

    pub fn heatmaps(&self) -> &Tensor {
        &self.heatmaps
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visibility
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn num_landmarks(&self) -> usize {
        self.visibility.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdTarget {
    pub gt: usize,
    pub num_classes: usize,
}

impl IdTarget {
    pub fn new(gt: usize, num_classes: usize) -> Result<Self> {
        if gt >= num_classes {
            return Err(Error::Argument(format!("class {gt} out of range 0..{num_classes}")));
        }
        Ok(IdTarget { gt, num_classes })
    }
}

/// Attribute loss value plus how many scores needed clamping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BceLoss {
    pub value: f64,
    pub clamped: usize,
}

fn check_scores(scores: &[f64], target: &AttributeTarget) -> Result<()> {
    if scores.len() != target.len() {
        return Err(Error::shape(format!("{} attribute scores for {} labels", scores.len(), target.len())));
    }
    if scores.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Argument("attribute scores must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy over the `N` attributes.
pub fn attribute_bce_loss(scores: &[f64], target: &AttributeTarget) -> Result<BceLoss> {
    check_scores(scores, target)?;
    let mut clamped = 0;
    let mut total = 0.0;
    for (&x, &y) in scores.iter().zip(target.bits()) {
        let xc = x.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        if xc != x {
            clamped += 1;
        }
        total -= if y { xc.ln() } else { (1.0 - xc).ln() };
    }
    Ok(BceLoss { value: total / scores.len() as f64, clamped })
}

/// Gradient with respect to the scores; zero where the clamp is active.
pub fn attribute_bce_grad(scores: &[f64], target: &AttributeTarget) -> Result<Vec<f64>> {
    check_scores(scores, target)?;
    let n = scores.len() as f64;
    Ok(scores
        .iter()
        .zip(target.bits())
        .map(|(&x, &y)| {
            if !(SCORE_CLAMP..=1.0 - SCORE_CLAMP).contains(&x) {
                0.0
            } else if y {
                -1.0 / (x * n)
            } else {
                1.0 / ((1.0 - x) * n)
            }
        })
        .collect())
}

fn check_heatmaps(pred: &Tensor, target: &LandmarkTarget) -> Result<(usize, usize)> {
    if pred.shape() != target.heatmaps.shape() {
        return Err(Error::shape(format!(
            "predicted heatmaps {:?} vs target {:?}",
            pred.shape(),
            target.heatmaps.shape()
        )));
    }
    let (m, h, w) = pred.dims3()?;
    Ok((m, h * w))
}

fn landmark_residual_norms(pred: &Tensor, target: &LandmarkTarget) -> Result<Vec<f64>> {
    let (_, plane) = check_heatmaps(pred, target)?;
    Ok(pred
        .data()
        .chunks(plane)
        .zip(target.heatmaps.data().chunks(plane))
        .map(|(x, y)| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect())
}

/// `Σ_m v_m·‖X_m − Y_m‖` with the Frobenius norm per heatmap.
pub fn landmark_loss(pred: &Tensor, target: &LandmarkTarget) -> Result<f64> {
    let norms = landmark_residual_norms(pred, target)?;
    Ok(norms.iter().zip(&target.visibility).filter(|(_, &v)| v).map(|(n, _)| n).sum())
}

/// Gradient of [`landmark_loss`]; defined as zero for a heatmap that matches
/// its target exactly.
pub fn landmark_loss_grad(pred: &Tensor, target: &LandmarkTarget) -> Result<Tensor> {
    let norms = landmark_residual_norms(pred, target)?;
    let (_, plane) = check_heatmaps(pred, target)?;
    let mut out = Vec::with_capacity(pred.len());
    for (m, (x, y)) in pred.data().chunks(plane).zip(target.heatmaps.data().chunks(plane)).enumerate() {
        let n = norms[m];
        if !target.visibility[m] || n == 0.0 {
            out.extend(std::iter::repeat_n(0.0, plane));
        } else {
            out.extend(x.iter().zip(y).map(|(a, b)| (a - b) / n));
        }
    }
    Tensor::new(pred.shape().to_vec(), out)
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// `−log softmax(x)[gt]`, evaluated through a shifted log-sum-exp.
pub fn id_cross_entropy(logits: &[f64], target: IdTarget) -> Result<f64> {
    check_logits(logits, target)?;
    Ok(log_sum_exp(logits) - logits[target.gt])
}

pub fn id_cross_entropy_grad(logits: &[f64], target: IdTarget) -> Result<Vec<f64>> {
    check_logits(logits, target)?;
    let lse = log_sum_exp(logits);
    Ok(logits.iter().enumerate().map(|(i, &v)| (v - lse).exp() - if i == target.gt { 1.0 } else { 0.0 }).collect())
}

fn check_logits(logits: &[f64], target: IdTarget) -> Result<()> {
    if logits.len() != target.num_classes {
        return Err(Error::shape(format!("{} logits for {} classes", logits.len(), target.num_classes)));
    }
    if target.gt >= logits.len() {
        return Err(Error::Argument(format!("class {} out of range", target.gt)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{seeded_tensor, seeded_vec};

    #[test]
    fn bce_analytic_values() {
        let one = AttributeTarget::from_values(&[1]).unwrap();
        assert!((attribute_bce_loss(&[0.5], &one).unwrap().value - 2f64.ln()).abs() < 1e-12);
        let two = AttributeTarget::from_values(&[1, 0]).unwrap();
        assert!((attribute_bce_loss(&[0.5, 0.5], &two).unwrap().value - 2f64.ln()).abs() < 1e-12);

        let sat = attribute_bce_loss(&[1.0], &one).unwrap();
        assert!(sat.value <= 1.1e-7);
        assert_eq!(sat.clamped, 1);
        assert!(attribute_bce_loss(&[0.9999999999], &one).unwrap().value <= 1.1e-7);
        assert!(AttributeTarget::from_values(&[2]).is_err());
        assert!(matches!(attribute_bce_loss(&[0.5, 0.5], &one), Err(Error::Shape(_))));
    }

    #[test]
    fn landmark_values() {
        let target =
            LandmarkTarget::new(Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap(), vec![true], vec![(0.0, 0.0)])
                .unwrap();
        let pred = Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(landmark_loss(&pred, &target).unwrap(), 5.0);
        assert_eq!(landmark_loss(target.heatmaps(), &target).unwrap(), 0.0);

        let hidden = LandmarkTarget::new(target.heatmaps().clone(), vec![false], vec![(0.0, 0.0)]).unwrap();
        assert_eq!(landmark_loss(&pred, &hidden).unwrap(), 0.0);
    }

    #[test]
    fn landmark_ignores_invisible_maps() {
        let target =
            LandmarkTarget::from_coords(vec![(2.0, 3.0), (5.0, 1.0), (0.0, 0.0)], vec![true, false, true], (8, 8), 1.0)
                .unwrap();
        let pred = seeded_tensor(&[3, 8, 8], 4);
        let base = landmark_loss(&pred, &target).unwrap();
        let mut data = pred.data().to_vec();
        for v in &mut data[64..128] {
            *v += 10.0;
        }
        let moved = Tensor::new(vec![3, 8, 8], data).unwrap();
        assert_eq!(landmark_loss(&moved, &target).unwrap(), base);
    }

    #[test]
    fn gaussian_heatmaps() {
        let t = LandmarkTarget::from_coords(vec![(2.0, 3.0), (1.0, 1.0)], vec![true, false], (6, 6), 1.0).unwrap();
        assert_eq!(t.heatmaps().get(&[0, 2, 3]), 1.0);
        assert!((t.heatmaps().get(&[0, 2, 4]) - (-0.5f64).exp()).abs() < 1e-15);
        assert!(t.heatmaps().data()[36..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_values() {
        let t = IdTarget::new(3, 10).unwrap();
        assert!((id_cross_entropy(&[0.7; 10], t).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut x = vec![0.0; 10];
        x[3] = 50.0;
        assert!(id_cross_entropy(&x, t).unwrap() <= 1e-20);
        let t2 = IdTarget::new(0, 2).unwrap();
        let v = id_cross_entropy(&[1.0, 0.0], t2).unwrap();
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.313262).abs() < 1e-6);
        assert!(IdTarget::new(2, 2).is_err());
        let shifted: Vec<f64> = seeded_vec(6, 1).iter().map(|v| v + 123.0).collect();
        let t6 = IdTarget::new(4, 6).unwrap();
        assert!(
            (id_cross_entropy(&shifted, t6).unwrap() - id_cross_entropy(&seeded_vec(6, 1), t6).unwrap()).abs() < 1e-10
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        let check = |analytic: &[f64], f: &dyn Fn(&[f64]) -> f64, x: &[f64]| {
            for i in 0..x.len() {
                let (mut p, mut m) = (x.to_vec(), x.to_vec());
                p[i] += h;
                m[i] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
                assert!((fd - analytic[i]).abs() / denom < 1e-5, "{i}: {fd} vs {}", analytic[i]);
            }
        };

        let scores: Vec<f64> = seeded_vec(5, 2).iter().map(|v| 0.5 + 0.4 * v).collect();
        let t = AttributeTarget::from_values(&[1, 0, 0, 1, 1]).unwrap();
        check(&attribute_bce_grad(&scores, &t).unwrap(), &|x| attribute_bce_loss(x, &t).unwrap().value, &scores);

        let logits = seeded_vec(7, 3);
        let id = IdTarget::new(2, 7).unwrap();
        check(&id_cross_entropy_grad(&logits, id).unwrap(), &|x| id_cross_entropy(x, id).unwrap(), &logits);

        let target = LandmarkTarget::from_coords(vec![(1.0, 2.0), (3.0, 0.0)], vec![true, true], (4, 4), 1.0).unwrap();
        let pred = seeded_tensor(&[2, 4, 4], 5);
        check(
            landmark_loss_grad(&pred, &target).unwrap().data(),
            &|x| landmark_loss(&Tensor::new(vec![2, 4, 4], x.to_vec()).unwrap(), &target).unwrap(),
            pred.data(),
        );
        let exact = landmark_loss_grad(target.heatmaps(), &target).unwrap();
        assert!(exact.data().iter().all(|&v| v == 0.0));
    }
}
