//! Count sketch projection and compact bilinear pooling.
//!
//! A sketch draws, for every input coordinate `l`, a sign `s[l] ∈ {+1,−1}` and
//! a bucket `p[l] ∈ [0, d)` (0-based). Projecting accumulates `s[l]·x[l]` into
//! bucket `p[l]`. The sketch of an outer product `x1 ⊗ x2` under the combined
//! hash `(p1[i] + p2[j]) mod d` and sign `s1[i]·s2[j]` equals the circular
//! convolution of the two individual sketches, which is how [`cbp_vector`]
//! computes it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{circular_convolve, circular_convolve_backward};

/// Serialized form of a sketch. Signs and buckets are regenerated from the
/// seed, never stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SketchSpec {
    pub input_dim: usize,
    pub d: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SketchParams {
    signs: Vec<i8>,
    hashes: Vec<usize>,
    d: usize,
    seed: u64,
}

/// Draws the sign and bucket vectors for a `C → d` sketch from `seed`.
pub fn make_sketch_params(input_dim: usize, d: usize, seed: u64) -> Result<SketchParams> {
    if input_dim < 1 || d < 1 {
        return Err(Error::Argument(format!("sketch needs C >= 1 and d >= 1, got C={input_dim}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut signs = Vec::with_capacity(input_dim);
    let mut hashes = Vec::with_capacity(input_dim);
    for _ in 0..input_dim {
        signs.push(if rng.gen::<bool>() { 1 } else { -1 });
        hashes.push(rng.gen_range(0..d));
    }
    Ok(SketchParams { signs, hashes, d, seed })
}

impl SketchParams {
    pub fn from_spec(spec: SketchSpec) -> Result<Self> {
        make_sketch_params(spec.input_dim, spec.d, spec.seed)
    }

    pub fn spec(&self) -> SketchSpec {
        SketchSpec { input_dim: self.input_dim(), d: self.d, seed: self.seed }
    }

    pub fn input_dim(&self) -> usize {
        self.signs.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn hashes(&self) -> &[usize] {
        &self.hashes
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::shape(format!("sketch expects input length {}, got {len}", self.input_dim())));
        }
        Ok(())
    }
}

/// Count sketch `y[t] = Σ_{l: p[l]=t} s[l]·x[l]`.
pub fn project(x: &[f64], params: &SketchParams) -> Result<Vec<f64>> {
    params.check_input(x.len())?;
    let mut y = vec![0.0; params.d];
    for ((&v, &s), &p) in x.iter().zip(&params.signs).zip(&params.hashes) {
        y[p] += f64::from(s) * v;
    }
    Ok(y)
}

/// Transpose of [`project`]: `grad_x[l] = s[l]·grad_y[p[l]]`.
pub fn project_backward(grad_y: &[f64], params: &SketchParams) -> Result<Vec<f64>> {
    if grad_y.len() != params.d {
        return Err(Error::shape(format!("sketch cotangent length {} != d = {}", grad_y.len(), params.d)));
    }
    Ok(params.signs.iter().zip(&params.hashes).map(|(&s, &p)| f64::from(s) * grad_y[p]).collect())
}

fn check_pair(params1: &SketchParams, params2: &SketchParams) -> Result<usize> {
    if params1.d != params2.d {
        return Err(Error::shape(format!("sketch dimensions differ: {} vs {}", params1.d, params2.d)));
    }
    Ok(params1.d)
}

/// Compact bilinear pooling of two vectors: the convolution of their sketches.
pub fn cbp_vector(x1: &[f64], x2: &[f64], params1: &SketchParams, params2: &SketchParams) -> Result<Vec<f64>> {
    check_pair(params1, params2)?;
    circular_convolve(&project(x1, params1)?, &project(x2, params2)?)
}

/// Explicit `O(C1·C2)` count sketch of the outer product `x1 ⊗ x2`.
pub fn outer_sketch_oracle(x1: &[f64], x2: &[f64], params1: &SketchParams, params2: &SketchParams) -> Result<Vec<f64>> {
    let d = check_pair(params1, params2)?;
    params1.check_input(x1.len())?;
    params2.check_input(x2.len())?;
    let mut out = vec![0.0; d];
    for (i, &a) in x1.iter().enumerate() {
        let (s1, p1) = (f64::from(params1.signs[i]), params1.hashes[i]);
        for (j, &b) in x2.iter().enumerate() {
            let (s2, p2) = (f64::from(params2.signs[j]), params2.hashes[j]);
            out[(p1 + p2) % d] += s1 * s2 * a * b;
        }
    }
    Ok(out)
}

/// Gradients of `<upstream, cbp_vector(x1, x2)>` with respect to both inputs.
pub fn cbp_gradient(
    upstream: &[f64],
    x1: &[f64],
    x2: &[f64],
    params1: &SketchParams,
    params2: &SketchParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = check_pair(params1, params2)?;
    if upstream.len() != d {
        return Err(Error::shape(format!("cbp cotangent length {} != d = {d}", upstream.len())));
    }
    let y1 = project(x1, params1)?;
    let y2 = project(x2, params2)?;
    let (g1, g2) = circular_convolve_backward(upstream, &y1, &y2)?;
    Ok((project_backward(&g1, params1)?, project_backward(&g2, params2)?))
}
