//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every recorded node keeps its forward value; [`Tape::backward`] walks the
//! nodes in reverse and calls the per-op backward functions of the library.

use std::sync::Arc;

use crate::attention::{apply_channel_weights, apply_channel_weights_backward};
use crate::error::{Error, Result};
use crate::fusion::{full_bilinear, full_bilinear_backward, spatial_cbp_backward, spatial_cbp_bank, SketchBank};
use crate::losses::{
    attribute_bce_grad, attribute_bce_loss, id_cross_entropy, id_cross_entropy_grad, landmark_loss, landmark_loss_grad,
    AttributeTarget, IdTarget, LandmarkTarget,
};
use crate::model::conv::{circular_pad, circular_pad_backward, conv2d, conv2d_backward};
use crate::tensor::{
    activate, activate_backward, avg_pool2d, avg_pool2d_backward, global_avg_pool, global_avg_pool_backward,
    l2_normalize, l2_normalize_backward, linear_apply, linear_apply_backward, resample_spatial,
    resample_spatial_backward, signed_sqrt, signed_sqrt_backward, Activation, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coordinates of one signed-square-root call held at fixed output values.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBand {
    pub mask: Vec<bool>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    CircularPad { x: Var, pad: usize },
    AvgPool { x: Var, k: usize },
    Resample { x: Var },
    Gap { x: Var },
    Linear { w: Var, b: Var, x: Var },
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Act { x: Var, mode: Activation },
    SignedSqrt { x: Var, frozen: Option<Vec<bool>> },
    L2Norm { x: Var, eps: f64 },
    ChannelScale { v: Var, alpha: Var },
    SpatialCbp { a: Var, l: Var, bank: Arc<SketchBank> },
    FullBilinear { a: Var, l: Var },
    Bce { x: Var, target: AttributeTarget },
    Landmark { x: Var, target: LandmarkTarget },
    CrossEntropy { x: Var, target: IdTarget },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    freeze: Option<Vec<FrozenBand>>,
    sqrt_calls: usize,
    sqrt_inputs: Vec<Tensor>,
    bce_clamped: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Holds signed-square-root coordinates at the given values; the `i`-th
    /// band applies to the `i`-th signed-square-root call.
    pub fn with_frozen_bands(bands: Vec<FrozenBand>) -> Self {
        Tape { freeze: Some(bands), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Inputs seen by every signed-square-root call so far.
    pub fn sqrt_inputs(&self) -> &[Tensor] {
        &self.sqrt_inputs
    }

    /// Attribute scores that hit the BCE clamp.
    pub fn bce_clamped(&self) -> usize {
        self.bce_clamped
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// A trainable leaf tagged with its slot in a parameter store.
    pub fn param(&mut self, slot: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(slot), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let value = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), pad)?;
        let needs = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, needs))
    }

    pub fn circular_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let value = circular_pad(self.value(x), pad)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::CircularPad { x, pad }, needs))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = avg_pool2d(self.value(x), (k, k), (k, k))?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::AvgPool { x, k }, needs))
    }

    pub fn resample(&mut self, x: Var, to: (usize, usize)) -> Result<Var> {
        let value = resample_spatial(self.value(x), to)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Resample { x }, needs))
    }

    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let value = global_avg_pool(self.value(x))?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Gap { x }, needs))
    }

    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let value = linear_apply(self.value(w), self.value(b), self.value(x))?;
        let needs = self.needs(&[w, b, x]);
        Ok(self.push(value, Op::Linear { w, b, x }, needs))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&values)?;
        let needs = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn act(&mut self, x: Var, mode: Activation) -> Result<Var> {
        let value = activate(self.value(x), mode)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Act { x, mode }, needs))
    }

    pub fn signed_sqrt(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x).clone();
        let mut value = signed_sqrt(&input)?;
        let call = self.sqrt_calls;
        self.sqrt_calls += 1;
        let frozen = match self.freeze.as_ref().and_then(|bands| bands.get(call)) {
            Some(band) => {
                if band.mask.len() != value.len() || band.values.len() != value.len() {
                    return Err(Error::shape("frozen band does not match signed-sqrt input"));
                }
                let mut data = value.into_data();
                for ((v, &m), &held) in data.iter_mut().zip(&band.mask).zip(&band.values) {
                    if m {
                        *v = held;
                    }
                }
                value = Tensor::from_op(input.shape().to_vec(), data, "signed_sqrt")?;
                Some(band.mask.clone())
            }
            None => None,
        };
        self.sqrt_inputs.push(input);
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::SignedSqrt { x, frozen }, needs))
    }

    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let value = l2_normalize(self.value(x), eps)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::L2Norm { x, eps }, needs))
    }

    pub fn channel_scale(&mut self, v: Var, alpha: Var) -> Result<Var> {
        let value = apply_channel_weights(self.value(v), self.value(alpha))?;
        let needs = self.needs(&[v, alpha]);
        Ok(self.push(value, Op::ChannelScale { v, alpha }, needs))
    }

    pub fn spatial_cbp(&mut self, a: Var, l: Var, bank: Arc<SketchBank>) -> Result<Var> {
        let value = spatial_cbp_bank(self.value(a), self.value(l), &bank)?;
        let needs = self.needs(&[a, l]);
        Ok(self.push(value, Op::SpatialCbp { a, l, bank }, needs))
    }

    pub fn full_bilinear(&mut self, a: Var, l: Var) -> Result<Var> {
        let value = full_bilinear(self.value(a), self.value(l))?;
        let needs = self.needs(&[a, l]);
        Ok(self.push(value, Op::FullBilinear { a, l }, needs))
    }

    pub fn bce(&mut self, x: Var, target: AttributeTarget) -> Result<Var> {
        let loss = attribute_bce_loss(self.value(x).data(), &target)?;
        self.bce_clamped += loss.clamped;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::vector(vec![loss.value])?, Op::Bce { x, target }, needs))
    }

    pub fn landmark(&mut self, x: Var, target: LandmarkTarget) -> Result<Var> {
        let value = landmark_loss(self.value(x), &target)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::vector(vec![value])?, Op::Landmark { x, target }, needs))
    }

    pub fn cross_entropy(&mut self, x: Var, target: IdTarget) -> Result<Var> {
        let value = id_cross_entropy(self.value(x).data(), target)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::vector(vec![value])?, Op::CrossEntropy { x, target }, needs))
    }

    /// `Σ wᵢ·xᵢ` over equally shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Argument("weighted sum of no terms".into()));
        };
        let mut acc = Tensor::zeros(self.value(first).shape().to_vec());
        for &(v, w) in terms {
            acc = acc.add(&self.value(v).scale(w)?)?;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = self.needs(&vars);
        Ok(self.push(acc, Op::WeightedSum(terms.to_vec()), needs))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward needs a scalar root"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut out: Vec<(Var, Tensor)> = Vec::new();
            self.node_backward(node, &g, &mut out)?;
            for (v, gv) in out {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                grads[v.0] = Some(match grads[v.0].take() {
                    Some(prev) => prev.add(&gv)?,
                    None => gv,
                });
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of parameter leaves as `(slot, grad)` in node order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(usize, Tensor)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(slot) => grads.grads.get(i).and_then(|g| g.clone()).map(|g| (slot, g)),
                _ => None,
            })
            .collect()
    }

    fn node_backward(&self, node: &Node, g: &Tensor, out: &mut Vec<(Var, Tensor)>) -> Result<()> {
        let val = |v: Var| self.value(v);
        let scalar = g.data()[0];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, pad } => {
                let (gx, gw, gb) = conv2d_backward(g, val(*x), val(*w), *pad)?;
                out.push((*x, gx));
                out.push((*w, gw));
                if let Some(b) = b {
                    out.push((*b, gb));
                }
            }
            Op::CircularPad { x, pad } => {
                out.push((*x, circular_pad_backward(g, val(*x).shape(), *pad)?));
            }
            Op::AvgPool { x, k } => {
                out.push((*x, avg_pool2d_backward(g, val(*x).shape(), (*k, *k), (*k, *k))?));
            }
            Op::Resample { x } => out.push((*x, resample_spatial_backward(g, val(*x).shape())?)),
            Op::Gap { x } => out.push((*x, global_avg_pool_backward(g, val(*x).shape())?)),
            Op::Linear { w, b, x } => {
                let (gw, gb, gx) = linear_apply_backward(g, val(*w), val(*b), val(*x))?;
                out.push((*w, gw));
                out.push((*b, gb));
                out.push((*x, gx));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    let slice = g.data()[offset..offset + n].to_vec();
                    out.push((p, Tensor::from_parts(val(p).shape().to_vec(), slice)));
                    offset += n;
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.mul(val(*b))?));
                out.push((*b, g.mul(val(*a))?));
            }
            Op::Act { x, mode } => out.push((*x, activate_backward(&node.value, g, *mode)?)),
            Op::SignedSqrt { x, frozen } => {
                let mut gx = signed_sqrt_backward(val(*x), g)?;
                if let Some(mask) = frozen {
                    let mut data = gx.into_data();
                    for (v, &m) in data.iter_mut().zip(mask) {
                        if m {
                            *v = 0.0;
                        }
                    }
                    gx = Tensor::from_parts(val(*x).shape().to_vec(), data);
                }
                out.push((*x, gx));
            }
            Op::L2Norm { x, eps } => out.push((*x, l2_normalize_backward(val(*x), g, *eps)?)),
            Op::ChannelScale { v, alpha } => {
                let (gv, ga) = apply_channel_weights_backward(g, val(*v), val(*alpha))?;
                out.push((*v, gv));
                out.push((*alpha, ga));
            }
            Op::SpatialCbp { a, l, bank } => {
                let (ga, gl) = spatial_cbp_backward(g, val(*a), val(*l), bank)?;
                out.push((*a, ga));
                out.push((*l, gl));
            }
            Op::FullBilinear { a, l } => {
                let (ga, gl) = full_bilinear_backward(g, val(*a), val(*l))?;
                out.push((*a, ga));
                out.push((*l, gl));
            }
            Op::Bce { x, target } => {
                let gx = attribute_bce_grad(val(*x).data(), target)?;
                out.push((*x, Tensor::from_op(val(*x).shape().to_vec(), gx, "bce")?.scale(scalar)?));
            }
            Op::Landmark { x, target } => {
                out.push((*x, landmark_loss_grad(val(*x), target)?.scale(scalar)?));
            }
            Op::CrossEntropy { x, target } => {
                let gx = id_cross_entropy_grad(val(*x).data(), *target)?;
                out.push((*x, Tensor::from_op(val(*x).shape().to_vec(), gx, "ce")?.scale(scalar)?));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    out.push((v, g.scale(w)?));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::seeded_tensor;

    fn scalar_fd(x: &Tensor, f: impl Fn(&Tensor) -> f64, analytic: &Tensor) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.data().to_vec();
            let mut m = x.data().to_vec();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&Tensor::new(x.shape().to_vec(), p).unwrap())
                - f(&Tensor::new(x.shape().to_vec(), m).unwrap()))
                / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4) < 1e-5, "{i}: {a} vs {fd}");
        }
    }

    fn pipeline(x: &Tensor, w: &Tensor, tape: &mut Tape) -> (Var, Var, Var) {
        let xv = tape.input(x.clone());
        let wv = tape.input(w.clone());
        let c = tape.conv2d(xv, wv, None, 1).unwrap();
        let r = tape.act(c, Activation::Sigmoid).unwrap();
        let p = tape.avg_pool(r, 2).unwrap();
        let s = tape.signed_sqrt(p).unwrap();
        let g = tape.gap(s).unwrap();
        let n = tape.l2_normalize(g, 1e-12).unwrap();
        let t = tape.constant(Tensor::vector(vec![0.3, -0.2, 0.5]).unwrap());
        let m = tape.mul(n, t).unwrap();
        let ce = tape.cross_entropy(m, IdTarget::new(1, 3).unwrap()).unwrap();
        let sum = tape.weighted_sum(&[(ce, 2.0), (ce, -0.5)]).unwrap();
        (xv, wv, sum)
    }

    #[test]
    fn composite_gradient_matches_fd() {
        let x = seeded_tensor(&[2, 4, 4], 1);
        let w = seeded_tensor(&[3, 2, 3, 3], 2);
        let mut tape = Tape::new();
        let (xv, wv, root) = pipeline(&x, &w, &mut tape);
        let grads = tape.backward(root).unwrap();
        let run = |x: &Tensor, w: &Tensor| {
            let mut t = Tape::new();
            let (_, _, r) = pipeline(x, w, &mut t);
            t.value(r).data()[0]
        };
        scalar_fd(&x, |x| run(x, &w), grads.get(xv).unwrap());
        scalar_fd(&w, |w| run(&x, w), grads.get(wv).unwrap());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = tape.input(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let m = tape.mul(a, b).unwrap();
        let ce = tape.cross_entropy(m, IdTarget::new(0, 2).unwrap()).unwrap();
        let grads = tape.backward(ce).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().shape(), [2]);
    }

    #[test]
    fn frozen_band_holds_values_and_zeroes_gradient() {
        let band = FrozenBand { mask: vec![true, false], values: vec![7.0, 0.0] };
        let mut tape = Tape::with_frozen_bands(vec![band]);
        let x = tape.input(Tensor::vector(vec![4.0, 9.0]).unwrap());
        let s = tape.signed_sqrt(x).unwrap();
        assert_eq!(tape.value(s).data(), [7.0, 3.0]);
        let ce = tape.cross_entropy(s, IdTarget::new(0, 2).unwrap()).unwrap();
        let grads = tape.backward(ce).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data()[0], 0.0);
        assert!(gx.data()[1] != 0.0);
        assert_eq!(tape.sqrt_inputs().len(), 1);
    }

    #[test]
    fn rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(a), Err(Error::Shape(_))));
    }
}
