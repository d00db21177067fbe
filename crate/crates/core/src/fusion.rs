//! Spatial fusion of the two weighted feature maps and the finalization
//! chain that turns the fused map into the global representation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sketch::{self, make_sketch_params, SketchParams};
use crate::tensor::{global_avg_pool, l2_normalize, linear_apply, signed_sqrt, Tensor};

/// Upper bound on `C_a·C_l` for the explicit bilinear mode.
pub const FULL_BILINEAR_LIMIT: usize = 65_536;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Compact bilinear pooling at every location.
    Cbp,
    Concat,
    Mul,
    Sum,
    /// Explicit outer product per location.
    FullBilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d: usize,
    /// `(H, W)` of the grid both maps are resampled to.
    pub target_spatial: (usize, usize),
    pub fusion_mode: FusionMode,
    pub out_dim: usize,
    pub eps: f64,
    /// Draw an independent sketch pair for every grid location instead of
    /// one pair shared by all locations.
    pub per_location_sketch: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d: 256,
            target_spatial: (8, 8),
            fusion_mode: FusionMode::Cbp,
            out_dim: 128,
            eps: 1e-12,
            per_location_sketch: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.out_dim < 1 {
            return Err(Error::Config("d and out_dim must be positive".into()));
        }
        if self.target_spatial.0 < 1 || self.target_spatial.1 < 1 {
            return Err(Error::Config("fusion grid extents must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("l2 guard eps must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of the fused map for the given branch widths.
    pub fn fused_channels(&self, c_a: usize, c_l: usize) -> Result<usize> {
        Ok(match self.fusion_mode {
            FusionMode::Cbp => self.d,
            FusionMode::Concat => c_a + c_l,
            FusionMode::Mul | FusionMode::Sum => c_a,
            FusionMode::FullBilinear => {
                let n = c_a * c_l;
                if n > FULL_BILINEAR_LIMIT {
                    return Err(Error::Config(format!(
                        "full bilinear fusion needs C_a·C_l <= {FULL_BILINEAR_LIMIT}, got {n}"
                    )));
                }
                n
            }
        })
    }
}

/// Sketch pairs used by spatial CBP: either one pair shared by every grid
/// location or one pair per location (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct SketchBank {
    attribute: Vec<SketchParams>,
    landmark: Vec<SketchParams>,
}

impl SketchBank {
    pub fn shared(c_a: usize, c_l: usize, d: usize, seed: u64) -> Result<Self> {
        Ok(SketchBank {
            attribute: vec![make_sketch_params(c_a, d, seed)?],
            landmark: vec![make_sketch_params(c_l, d, seed.wrapping_add(1))?],
        })
    }

    pub fn per_location(c_a: usize, c_l: usize, d: usize, grid: (usize, usize), seed: u64) -> Result<Self> {
        let n = grid.0 * grid.1;
        let mut attribute = Vec::with_capacity(n);
        let mut landmark = Vec::with_capacity(n);
        for loc in 0..n as u64 {
            let base = seed.wrapping_add(2 * loc);
            attribute.push(make_sketch_params(c_a, d, base)?);
            landmark.push(make_sketch_params(c_l, d, base.wrapping_add(1))?);
        }
        Ok(SketchBank { attribute, landmark })
    }

    pub fn from_pair(attribute: SketchParams, landmark: SketchParams) -> Result<Self> {
        if attribute.d() != landmark.d() {
            return Err(Error::shape("sketch pair dimensions differ"));
        }
        Ok(SketchBank { attribute: vec![attribute], landmark: vec![landmark] })
    }

    pub fn for_config(c_a: usize, c_l: usize, config: &FusionConfig, seed: u64) -> Result<Self> {
        if config.per_location_sketch {
            Self::per_location(c_a, c_l, config.d, config.target_spatial, seed)
        } else {
            Self::shared(c_a, c_l, config.d, seed)
        }
    }

    pub fn d(&self) -> usize {
        self.attribute[0].d()
    }

    pub fn is_shared(&self) -> bool {
        self.attribute.len() == 1
    }

    pub fn pair_at(&self, location: usize) -> (&SketchParams, &SketchParams) {
        if self.is_shared() {
            (&self.attribute[0], &self.landmark[0])
        } else {
            (&self.attribute[location], &self.landmark[location])
        }
    }

    fn check(&self, c_a: usize, c_l: usize, locations: usize) -> Result<()> {
        if self.attribute[0].input_dim() != c_a || self.landmark[0].input_dim() != c_l {
            return Err(Error::shape(format!(
                "sketches expect {}/{} channels, maps have {c_a}/{c_l}",
                self.attribute[0].input_dim(),
                self.landmark[0].input_dim()
            )));
        }
        if !self.is_shared() && self.attribute.len() != locations {
            return Err(Error::shape(format!(
                "{} per-location sketches for {locations} locations",
                self.attribute.len()
            )));
        }
        Ok(())
    }
}

fn check_spatial(va: &Tensor, vl: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (c_a, h, w) = va.dims3()?;
    let (c_l, hl, wl) = vl.dims3()?;
    if (h, w) != (hl, wl) {
        return Err(Error::shape(format!("fusion inputs must share a grid: {h}x{w} vs {hl}x{wl}")));
    }
    Ok((c_a, c_l, h, w))
}

fn fiber(x: &Tensor, c: usize, plane: usize, loc: usize) -> Vec<f64> {
    (0..c).map(|ch| x.data()[ch * plane + loc]).collect()
}

/// Compact bilinear pooling of the local fibers at every grid location,
/// with one sketch pair shared by all of them.
pub fn spatial_cbp(va: &Tensor, vl: &Tensor, params1: &SketchParams, params2: &SketchParams) -> Result<Tensor> {
    spatial_cbp_bank(va, vl, &SketchBank::from_pair(params1.clone(), params2.clone())?)
}

pub fn spatial_cbp_bank(va: &Tensor, vl: &Tensor, bank: &SketchBank) -> Result<Tensor> {
    let (c_a, c_l, h, w) = check_spatial(va, vl)?;
    let plane = h * w;
    bank.check(c_a, c_l, plane)?;
    let d = bank.d();
    let mut out = vec![0.0; d * plane];
    for loc in 0..plane {
        let (p1, p2) = bank.pair_at(loc);
        let f = sketch::cbp_vector(&fiber(va, c_a, plane, loc), &fiber(vl, c_l, plane, loc), p1, p2)?;
        for (t, v) in f.into_iter().enumerate() {
            out[t * plane + loc] = v;
        }
    }
    Tensor::from_op(vec![d, h, w], out, "spatial_cbp")
}

pub fn spatial_cbp_backward(
    grad_out: &Tensor,
    va: &Tensor,
    vl: &Tensor,
    bank: &SketchBank,
) -> Result<(Tensor, Tensor)> {
    let (c_a, c_l, h, w) = check_spatial(va, vl)?;
    let plane = h * w;
    bank.check(c_a, c_l, plane)?;
    if grad_out.shape() != [bank.d(), h, w] {
        return Err(Error::shape("spatial_cbp_backward: cotangent shape mismatch"));
    }
    let mut ga = vec![0.0; c_a * plane];
    let mut gl = vec![0.0; c_l * plane];
    for loc in 0..plane {
        let (p1, p2) = bank.pair_at(loc);
        let up = fiber(grad_out, bank.d(), plane, loc);
        let (g1, g2) = sketch::cbp_gradient(&up, &fiber(va, c_a, plane, loc), &fiber(vl, c_l, plane, loc), p1, p2)?;
        for (ch, v) in g1.into_iter().enumerate() {
            ga[ch * plane + loc] = v;
        }
        for (ch, v) in g2.into_iter().enumerate() {
            gl[ch * plane + loc] = v;
        }
    }
    Ok((
        Tensor::from_op(va.shape().to_vec(), ga, "spatial_cbp_backward")?,
        Tensor::from_op(vl.shape().to_vec(), gl, "spatial_cbp_backward")?,
    ))
}

/// Explicit per-location outer product: channel `i·C_l + j` holds
/// `va[i]·vl[j]`.
pub fn full_bilinear(va: &Tensor, vl: &Tensor) -> Result<Tensor> {
    let (c_a, c_l, h, w) = check_spatial(va, vl)?;
    if c_a * c_l > FULL_BILINEAR_LIMIT {
        return Err(Error::Config(format!("full bilinear fusion needs C_a·C_l <= {FULL_BILINEAR_LIMIT}")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(c_a * c_l * plane);
    for a in va.data().chunks(plane) {
        for l in vl.data().chunks(plane) {
            out.extend(a.iter().zip(l).map(|(x, y)| x * y));
        }
    }
    Tensor::from_op(vec![c_a * c_l, h, w], out, "full_bilinear")
}

pub fn full_bilinear_backward(grad_out: &Tensor, va: &Tensor, vl: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c_a, c_l, h, w) = check_spatial(va, vl)?;
    let plane = h * w;
    if grad_out.shape() != [c_a * c_l, h, w] {
        return Err(Error::shape("full_bilinear_backward: cotangent shape mismatch"));
    }
    let (a, l, g) = (va.data(), vl.data(), grad_out.data());
    let mut ga = vec![0.0; c_a * plane];
    let mut gl = vec![0.0; c_l * plane];
    for i in 0..c_a {
        for j in 0..c_l {
            let gch = &g[(i * c_l + j) * plane..(i * c_l + j + 1) * plane];
            for p in 0..plane {
                ga[i * plane + p] += gch[p] * l[j * plane + p];
                gl[j * plane + p] += gch[p] * a[i * plane + p];
            }
        }
    }
    Ok((
        Tensor::from_op(va.shape().to_vec(), ga, "full_bilinear_backward")?,
        Tensor::from_op(vl.shape().to_vec(), gl, "full_bilinear_backward")?,
    ))
}

/// Non-CBP fusions. `adapter` is the `(W: [C_a,C_l,1,1], b: [C_a])` channel
/// map applied to the landmark map before `Mul`/`Sum`.
pub fn fuse_alternative(
    va: &Tensor,
    vl: &Tensor,
    mode: FusionMode,
    adapter: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    let (c_a, c_l, _, _) = check_spatial(va, vl)?;
    match mode {
        FusionMode::Concat => Tensor::concat(&[va, vl]),
        FusionMode::FullBilinear => full_bilinear(va, vl),
        FusionMode::Mul | FusionMode::Sum => {
            let mapped = match adapter {
                Some((w, b)) => crate::model::conv::conv2d(vl, w, Some(b), 0)?,
                None if c_a == c_l => vl.clone(),
                None => {
                    return Err(Error::Config(format!(
                        "{mode:?} fusion needs equal channels or an adapter ({c_a} vs {c_l})"
                    )))
                }
            };
            if mapped.shape() != va.shape() {
                return Err(Error::Config("adapter output does not match the attribute map".into()));
            }
            if mode == FusionMode::Mul {
                va.mul(&mapped)
            } else {
                va.add(&mapped)
            }
        }
        FusionMode::Cbp => Err(Error::Config("use spatial_cbp for CBP fusion".into())),
    }
}

/// Global average pooling, signed square root and l2 normalization: the
/// part of finalization before the fully connected layer.
pub fn finalize_pre_fc(fused: &Tensor, eps: f64) -> Result<Tensor> {
    l2_normalize(&signed_sqrt(&global_avg_pool(fused)?)?, eps)
}

/// `FC(l2(signed_sqrt(GAP(F))))`.
pub fn finalize_representation(fused: &Tensor, fc_w: &Tensor, fc_b: &Tensor, eps: f64) -> Result<Tensor> {
    linear_apply(fc_w, fc_b, &finalize_pre_fc(fused, eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::outer_sketch_oracle;
    use crate::testutil::seeded_tensor;

    #[test]
    fn full_size_grid_shape() {
        let va = seeded_tensor(&[1536, 8, 8], 1);
        let vl = seeded_tensor(&[256, 8, 8], 2);
        let bank = SketchBank::shared(1536, 256, 2048, 3).unwrap();
        let f = spatial_cbp_bank(&va, &vl, &bank).unwrap();
        assert_eq!(f.shape(), [2048, 8, 8]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let va = seeded_tensor(&[6, 3, 3], 1);
        let bank = SketchBank::shared(6, 4, 16, 9).unwrap();
        let f = spatial_cbp_bank(&va, &Tensor::zeros(vec![4, 3, 3]), &bank).unwrap();
        assert!(f.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn single_location_is_cbp_vector() {
        let va = seeded_tensor(&[8, 1, 1], 3);
        let vl = seeded_tensor(&[6, 1, 1], 4);
        let p1 = make_sketch_params(8, 16, 10).unwrap();
        let p2 = make_sketch_params(6, 16, 11).unwrap();
        let f = spatial_cbp(&va, &vl, &p1, &p2).unwrap();
        let v = sketch::cbp_vector(va.data(), vl.data(), &p1, &p2).unwrap();
        assert_eq!(f.shape(), [16, 1, 1]);
        for (a, b) in f.data().iter().zip(&v) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn every_location_matches_oracle() {
        let (c_a, c_l, h, w) = (5, 3, 3, 4);
        let va = seeded_tensor(&[c_a, h, w], 5);
        let vl = seeded_tensor(&[c_l, h, w], 6);
        for bank in
            [SketchBank::shared(c_a, c_l, 8, 1).unwrap(), SketchBank::per_location(c_a, c_l, 8, (h, w), 1).unwrap()]
        {
            let f = spatial_cbp_bank(&va, &vl, &bank).unwrap();
            for loc in 0..h * w {
                let (p1, p2) = bank.pair_at(loc);
                let o =
                    outer_sketch_oracle(&fiber(&va, c_a, h * w, loc), &fiber(&vl, c_l, h * w, loc), p1, p2).unwrap();
                for t in 0..8 {
                    assert!((f.data()[t * h * w + loc] - o[t]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn spatial_permutation_commutes() {
        let (h, w) = (2, 3);
        let va = seeded_tensor(&[4, h, w], 7);
        let vl = seeded_tensor(&[3, h, w], 8);
        let bank = SketchBank::shared(4, 3, 8, 2).unwrap();
        let perm = [5, 3, 0, 1, 4, 2];
        let permute = |x: &Tensor| {
            let (c, _, _) = x.dims3().unwrap();
            let mut out = Vec::new();
            for ch in 0..c {
                out.extend(perm.iter().map(|&p| x.data()[ch * h * w + p]));
            }
            Tensor::new(x.shape().to_vec(), out).unwrap()
        };
        let f = spatial_cbp_bank(&va, &vl, &bank).unwrap();
        let fp = spatial_cbp_bank(&permute(&va), &permute(&vl), &bank).unwrap();
        assert!(fp.max_abs_diff(&permute(&f)) < 1e-15);
    }

    #[test]
    fn concat_sum_and_errors() {
        let a = Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap();
        let l = Tensor::new(vec![3, 1, 1], vec![3.0, 4.0, 5.0]).unwrap();
        let c = fuse_alternative(&a, &l, FusionMode::Concat, None).unwrap();
        assert_eq!(c.shape(), [5, 1, 1]);
        assert_eq!(c.data(), [1.0, 2.0, 3.0, 4.0, 5.0]);

        let eye = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero_b = Tensor::zeros(vec![2]);
        let zl = Tensor::zeros(vec![2, 1, 1]);
        assert_eq!(fuse_alternative(&a, &zl, FusionMode::Sum, Some((&eye, &zero_b))).unwrap(), a);
        assert!(matches!(fuse_alternative(&a, &l, FusionMode::Mul, None), Err(Error::Config(_))));
        let wrong_grid = Tensor::zeros(vec![2, 2, 1]);
        assert!(matches!(fuse_alternative(&a, &wrong_grid, FusionMode::Concat, None), Err(Error::Shape(_))));
    }

    #[test]
    fn full_bilinear_sketched_equals_spatial_cbp() {
        let (h, w) = (2, 2);
        let va = seeded_tensor(&[3, h, w], 9);
        let vl = seeded_tensor(&[3, h, w], 10);
        let p1 = make_sketch_params(3, 8, 20).unwrap();
        let p2 = make_sketch_params(3, 8, 21).unwrap();
        let full = full_bilinear(&va, &vl).unwrap();
        assert_eq!(full.shape(), [9, h, w]);
        let cbp = spatial_cbp(&va, &vl, &p1, &p2).unwrap();
        for loc in 0..h * w {
            let mut sketched = [0.0; 8];
            for i in 0..3 {
                for j in 0..3 {
                    let s = f64::from(p1.signs()[i]) * f64::from(p2.signs()[j]);
                    sketched[(p1.hashes()[i] + p2.hashes()[j]) % 8] += s * full.data()[(i * 3 + j) * h * w + loc];
                }
            }
            for t in 0..8 {
                assert!((sketched[t] - cbp.data()[t * h * w + loc]).abs() < 1e-10);
            }
        }
        let big = Tensor::zeros(vec![300, 1, 1]);
        assert!(matches!(full_bilinear(&big, &big), Err(Error::Config(_))));
    }

    #[test]
    fn finalize_cases() {
        let f = Tensor::new(vec![2, 1, 2], vec![4.0, 4.0, 9.0, 9.0]).unwrap();
        let pre = finalize_pre_fc(&f, 1e-12).unwrap();
        assert!((pre.norm2() - 1.0).abs() < 1e-15);
        assert!((pre.data()[0] / pre.data()[1] - 2.0 / 3.0).abs() < 1e-15);

        let fused = seeded_tensor(&[6, 2, 2], 11);
        let eye = Tensor::new(vec![6, 6], (0..36).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let out = finalize_representation(&fused, &eye, &Tensor::zeros(vec![6]), 1e-12).unwrap();
        assert!((out.norm2() - 1.0).abs() < 1e-12);

        let scaled = finalize_pre_fc(&fused.scale(37.5).unwrap(), 1e-12).unwrap();
        assert!(scaled.max_abs_diff(&finalize_pre_fc(&fused, 1e-12).unwrap()) < 1e-12);
    }

    #[test]
    fn full_size_finalize_length() {
        let fused = seeded_tensor(&[2048, 8, 8], 12);
        let w = Tensor::zeros(vec![2048, 2048]);
        let b = Tensor::zeros(vec![2048]);
        assert_eq!(finalize_representation(&fused, &w, &b, 1e-12).unwrap().shape(), [2048]);
    }
}
