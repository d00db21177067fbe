//! Channel-wise co-attention.
//!
//! Each branch gets a two-layer gate `α = act(W2·relu(W1·v + b1) + b2)` whose
//! input `v` is the concatenated global descriptors of both branches (joint
//! guidance) or the branch's own descriptor (separate guidance).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::{Activation, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Sigmoid,
    Softmax,
}

impl WeightMode {
    pub fn activation(self) -> Activation {
        match self {
            WeightMode::Sigmoid => Activation::Sigmoid,
            WeightMode::Softmax => Activation::Softmax,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    #[default]
    Joint,
    Separate,
}

/// Hidden width used when none is configured.
pub fn default_hidden(c_a: usize, c_l: usize) -> usize {
    (c_a + c_l).div_ceil(16).max(1)
}

/// One gating MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GateParams {
    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(GateParams {
            w1: uniform_fan_in(rng, vec![hidden, input])?,
            b1: Tensor::zeros(vec![hidden]),
            w2: uniform_fan_in(rng, vec![output, hidden])?,
            b2: Tensor::zeros(vec![output]),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let [k, _] = self.w1.shape()[..] else { return Err(Error::shape("W1 must be 2-D")) };
        let [c, k2] = self.w2.shape()[..] else { return Err(Error::shape("W2 must be 2-D")) };
        if k < 1 || k2 != k || self.b1.shape() != [k] || self.b2.shape() != [c] {
            return Err(Error::shape("inconsistent gate parameter shapes"));
        }
        Ok(())
    }
}

/// `U(−1/√fan_in, 1/√fan_in)` with `fan_in` the product of all but the
/// leading extent.
pub(crate) fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Result<Tensor> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoAttentionParams {
    pub attribute: GateParams,
    pub landmark: GateParams,
    pub weight_mode: WeightMode,
    pub guidance_mode: GuidanceMode,
}

impl CoAttentionParams {
    /// Seeded initialization; `hidden` defaults to [`default_hidden`].
    pub fn init(
        c_a: usize,
        c_l: usize,
        hidden: Option<(usize, usize)>,
        weight_mode: WeightMode,
        guidance_mode: GuidanceMode,
        seed: u64,
    ) -> Result<Self> {
        if c_a < 1 || c_l < 1 {
            return Err(Error::Config("attention needs at least one channel per branch".into()));
        }
        let (k_a, k_l) = hidden.unwrap_or((default_hidden(c_a, c_l), default_hidden(c_a, c_l)));
        if k_a < 1 || k_l < 1 {
            return Err(Error::Config("attention hidden width must be at least 1".into()));
        }
        let (in_a, in_l) = match guidance_mode {
            GuidanceMode::Joint => (c_a + c_l, c_a + c_l),
            GuidanceMode::Separate => (c_a, c_l),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(CoAttentionParams {
            attribute: GateParams::init(&mut rng, in_a, k_a, c_a)?,
            landmark: GateParams::init(&mut rng, in_l, k_l, c_l)?,
            weight_mode,
            guidance_mode,
        })
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.attribute.output_dim(), self.landmark.output_dim())
    }

    fn validate(&self) -> Result<()> {
        self.attribute.validate()?;
        self.landmark.validate()?;
        let (c_a, c_l) = self.channels();
        let expected = match self.guidance_mode {
            GuidanceMode::Joint => (c_a + c_l, c_a + c_l),
            GuidanceMode::Separate => (c_a, c_l),
        };
        if (self.attribute.input_dim(), self.landmark.input_dim()) != expected {
            return Err(Error::shape("gate input widths do not match the guidance mode"));
        }
        Ok(())
    }
}

/// Gate variables on a tape, in the order `[W1, b1, W2, b2]`.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn gate(tape: &mut Tape, v: Var, p: GateVars, mode: WeightMode) -> Result<Var> {
    let h = tape.linear(p.w1, p.b1, v)?;
    let h = tape.act(h, Activation::Relu)?;
    let z = tape.linear(p.w2, p.b2, h)?;
    tape.act(z, mode.activation())
}

/// Records the co-attention weights of `va`/`vl` on `tape`.
pub fn co_attention_on_tape(
    tape: &mut Tape,
    va: Var,
    vl: Var,
    gates: (GateVars, GateVars),
    weight_mode: WeightMode,
    guidance_mode: GuidanceMode,
) -> Result<(Var, Var)> {
    let ga = tape.gap(va)?;
    let gl = tape.gap(vl)?;
    let (in_a, in_l) = match guidance_mode {
        GuidanceMode::Joint => {
            let joint = tape.concat(&[ga, gl])?;
            (joint, joint)
        }
        GuidanceMode::Separate => (ga, gl),
    };
    Ok((gate(tape, in_a, gates.0, weight_mode)?, gate(tape, in_l, gates.1, weight_mode)?))
}

fn gate_inputs(tape: &mut Tape, g: &GateParams) -> GateVars {
    GateVars {
        w1: tape.constant(g.w1.clone()),
        b1: tape.constant(g.b1.clone()),
        w2: tape.constant(g.w2.clone()),
        b2: tape.constant(g.b2.clone()),
    }
}

/// Per-channel weights `(α_a, α_l)` for the two feature maps.
pub fn co_attention_weights(va: &Tensor, vl: &Tensor, params: &CoAttentionParams) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    let (c_a, c_l) = params.channels();
    if va.dims3()?.0 != c_a || vl.dims3()?.0 != c_l {
        return Err(Error::shape(format!(
            "attention expects {c_a}/{c_l} channels, got {:?} and {:?}",
            va.shape(),
            vl.shape()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(va.clone());
    let l = tape.constant(vl.clone());
    let gates = (gate_inputs(&mut tape, &params.attribute), gate_inputs(&mut tape, &params.landmark));
    let (alpha_a, alpha_l) = co_attention_on_tape(&mut tape, a, l, gates, params.weight_mode, params.guidance_mode)?;
    Ok((tape.value(alpha_a).clone(), tape.value(alpha_l).clone()))
}

/// `out[c,·,·] = alpha[c]·v[c,·,·]`.
pub fn apply_channel_weights(v: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let (c, h, w) = v.dims3()?;
    if alpha.shape() != [c] {
        return Err(Error::shape(format!("{} channel weights for {c} channels", alpha.len())));
    }
    let plane = h * w;
    let data = v.data().chunks(plane).zip(alpha.data()).flat_map(|(row, &a)| row.iter().map(move |&x| a * x)).collect();
    Tensor::from_op(v.shape().to_vec(), data, "apply_channel_weights")
}

/// Returns `(grad_v, grad_alpha)`.
pub fn apply_channel_weights_backward(grad_out: &Tensor, v: &Tensor, alpha: &Tensor) -> Result<(Tensor, Tensor)> {
    if grad_out.shape() != v.shape() {
        return Err(Error::shape("apply_channel_weights_backward: cotangent shape mismatch"));
    }
    let gv = apply_channel_weights(grad_out, alpha)?;
    let plane = v.len() / alpha.len();
    let ga = grad_out
        .data()
        .chunks(plane)
        .zip(v.data().chunks(plane))
        .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect();
    Ok((gv, Tensor::from_op(alpha.shape().to_vec(), ga, "apply_channel_weights_backward")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, seeded_tensor};

    fn params(mode: WeightMode, guidance: GuidanceMode) -> CoAttentionParams {
        CoAttentionParams::init(4, 3, Some((4, 4)), mode, guidance, 17).unwrap()
    }

    #[test]
    fn zero_maps_give_neutral_weights() {
        let va = Tensor::zeros(vec![4, 2, 2]);
        let vl = Tensor::zeros(vec![3, 5, 5]);
        let (a, l) = co_attention_weights(&va, &vl, &params(WeightMode::Sigmoid, GuidanceMode::Joint)).unwrap();
        assert!(a.data().iter().chain(l.data()).all(|&v| v == 0.5));
        let (a, _) = co_attention_weights(&va, &vl, &params(WeightMode::Softmax, GuidanceMode::Joint)).unwrap();
        assert_eq!(a.data(), [0.25; 4]);
    }

    #[test]
    fn weight_ranges() {
        let va = seeded_tensor(&[4, 3, 3], 1);
        let vl = seeded_tensor(&[3, 6, 6], 2);
        let (a, l) = co_attention_weights(&va, &vl, &params(WeightMode::Sigmoid, GuidanceMode::Joint)).unwrap();
        assert!(a.data().iter().chain(l.data()).all(|&v| v > 0.0 && v < 1.0));
        let (a, l) = co_attention_weights(&va, &vl, &params(WeightMode::Softmax, GuidanceMode::Joint)).unwrap();
        assert!((a.sum() - 1.0).abs() < 1e-12 && (l.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guidance_modes_differ_in_mutual_dependence() {
        let va = seeded_tensor(&[4, 3, 3], 3);
        let vl = seeded_tensor(&[3, 6, 6], 4);
        let vl2 = vl.add(&seeded_tensor(&[3, 6, 6], 5)).unwrap();
        let joint = params(WeightMode::Sigmoid, GuidanceMode::Joint);
        let (a1, _) = co_attention_weights(&va, &vl, &joint).unwrap();
        let (a2, _) = co_attention_weights(&va, &vl2, &joint).unwrap();
        assert!(a1.max_abs_diff(&a2) > 1e-6);
        let sep = params(WeightMode::Sigmoid, GuidanceMode::Separate);
        let (s1, _) = co_attention_weights(&va, &vl, &sep).unwrap();
        let (s2, _) = co_attention_weights(&va, &vl2, &sep).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn default_hidden_width() {
        assert_eq!(default_hidden(64, 32), 6);
        assert_eq!(default_hidden(1536, 256), 112);
        assert_eq!(default_hidden(1, 1), 1);
        let p = CoAttentionParams::init(64, 32, None, WeightMode::Sigmoid, GuidanceMode::Joint, 0).unwrap();
        assert_eq!(p.attribute.w1.shape(), [6, 96]);
        assert_eq!(p.landmark.w2.shape(), [32, 6]);
        assert!(p.attribute.b1.data().iter().all(|&b| b == 0.0));
        let bound = 1.0 / 96f64.sqrt();
        assert!(p.attribute.w1.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn shape_errors() {
        let p = params(WeightMode::Sigmoid, GuidanceMode::Joint);
        let r = co_attention_weights(&Tensor::zeros(vec![5, 2, 2]), &Tensor::zeros(vec![3, 2, 2]), &p);
        assert!(matches!(r, Err(Error::Shape(_))));
        let r = apply_channel_weights(&Tensor::zeros(vec![2, 1, 1]), &Tensor::zeros(vec![3]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn channel_weight_cases() {
        let v = seeded_tensor(&[2, 3, 3], 6);
        assert_eq!(apply_channel_weights(&v, &Tensor::full(vec![2], 1.0)).unwrap(), v);
        assert!(apply_channel_weights(&v, &Tensor::zeros(vec![2])).unwrap().data().iter().all(|&x| x == 0.0));
        let ones = Tensor::full(vec![2, 2, 2], 1.0);
        let out = apply_channel_weights(&ones, &Tensor::vector(vec![2.0, 0.5]).unwrap()).unwrap();
        assert_eq!(out.data(), [2.0, 2.0, 2.0, 2.0, 0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn channel_weight_gradients() {
        let v = seeded_tensor(&[3, 2, 2], 7);
        let a = seeded_tensor(&[3], 8);
        let g = seeded_tensor(&[3, 2, 2], 9);
        let (gv, ga) = apply_channel_weights_backward(&g, &v, &a).unwrap();
        fd_check(&v, |t| apply_channel_weights(t, &a).unwrap(), &g, |_| gv.clone());
        fd_check(&a, |t| apply_channel_weights(&v, t).unwrap(), &g, |_| ga.clone());
    }

    #[test]
    fn attention_gradients_match_fd() {
        for (mode, guidance) in [
            (WeightMode::Sigmoid, GuidanceMode::Joint),
            (WeightMode::Softmax, GuidanceMode::Joint),
            (WeightMode::Sigmoid, GuidanceMode::Separate),
        ] {
            let mut p = params(mode, guidance);
            p.attribute.b1 = seeded_tensor(&[p.attribute.b1.len()], 20);
            p.landmark.b1 = seeded_tensor(&[p.landmark.b1.len()], 21);
            let va = seeded_tensor(&[4, 2, 2], 10);
            let vl = seeded_tensor(&[3, 3, 3], 11);
            let ga = seeded_tensor(&[4], 12);
            let gl = seeded_tensor(&[3], 13);
            let objective = |va: &Tensor, vl: &Tensor| -> Tensor {
                let (a, l) = co_attention_weights(va, vl, &p).unwrap();
                Tensor::vector(vec![a.dot(&ga).unwrap() + l.dot(&gl).unwrap()]).unwrap()
            };
            let mut tape = Tape::new();
            let a = tape.input(va.clone());
            let l = tape.input(vl.clone());
            let gates = (gate_inputs(&mut tape, &p.attribute), gate_inputs(&mut tape, &p.landmark));
            let (xa, xl) = co_attention_on_tape(&mut tape, a, l, gates, mode, guidance).unwrap();
            let ca = tape.constant(ga.clone());
            let cl = tape.constant(gl.clone());
            let pa = tape.mul(xa, ca).unwrap();
            let pl = tape.mul(xl, cl).unwrap();
            let cat = tape.concat(&[pa, pl]).unwrap();
            let sum_w = tape.constant(Tensor::new(vec![1, 7], vec![1.0; 7]).unwrap());
            let sum_b = tape.constant(Tensor::zeros(vec![1]));
            let root = tape.linear(sum_w, sum_b, cat).unwrap();
            let grads = tape.backward(root).unwrap();
            let one = Tensor::vector(vec![1.0]).unwrap();
            fd_check(&va, |t| objective(t, &vl), &one, |_| grads.get(a).unwrap().clone());
            if guidance == GuidanceMode::Joint {
                fd_check(&vl, |t| objective(&va, t), &one, |_| grads.get(l).unwrap().clone());
            }
        }
    }
}
