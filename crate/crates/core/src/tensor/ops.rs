use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Average pooling over a `[C,H,W]` map.
pub fn avg_pool2d<T: Real>(x: &Tensor<T>, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = pooled_extent(h, w, window, stride)?;
    let inv = T::one() / T::from_f64((window.0 * window.1) as f64);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = T::zero();
                for r in i * stride.0..i * stride.0 + window.0 {
                    for v in &plane[r * w + j * stride.1..r * w + j * stride.1 + window.1] {
                        acc = acc + *v;
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::from_op(vec![c, oh, ow], out, "avg_pool2d")
}

pub fn avg_pool2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let [c, h, w] = input_shape[..] else {
        return Err(Error::shape("avg_pool2d_backward: input must be [C,H,W]"));
    };
    let (oh, ow) = pooled_extent(h, w, window, stride)?;
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::shape(format!(
            "avg_pool2d_backward: cotangent {:?}, expected {:?}",
            grad_out.shape(),
            [c, oh, ow]
        )));
    }
    let inv = T::one() / T::from_f64((window.0 * window.1) as f64);
    let g = grad_out.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let share = g[(ch * oh + i) * ow + j] * inv;
                for r in i * stride.0..i * stride.0 + window.0 {
                    let row = (ch * h + r) * w;
                    for v in &mut out[row + j * stride.1..row + j * stride.1 + window.1] {
                        *v = *v + share;
                    }
                }
            }
        }
    }
    Tensor::from_op(input_shape.to_vec(), out, "avg_pool2d_backward")
}

fn pooled_extent(h: usize, w: usize, window: (usize, usize), stride: (usize, usize)) -> Result<(usize, usize)> {
    if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::shape("pooling window and stride must be positive"));
    }
    if window.0 > h || window.1 > w {
        return Err(Error::shape(format!("pooling window {window:?} larger than input {h}x{w}")));
    }
    Ok(((h - window.0) / stride.0 + 1, (w - window.1) / stride.1 + 1))
}

/// Source index ranges feeding each output position along one axis.
/// Shrinking averages non-overlapping blocks, growing replicates the nearest
/// source cell.
fn axis_sources(from: usize, to: usize) -> Result<Vec<(usize, usize)>> {
    if to == 0 {
        return Err(Error::shape("resample target extents must be positive"));
    }
    if to <= from {
        if !from.is_multiple_of(to) {
            return Err(Error::shape(format!("cannot average-pool extent {from} down to {to}: not divisible")));
        }
        let f = from / to;
        Ok((0..to).map(|i| (i * f, f)).collect())
    } else {
        Ok((0..to).map(|i| (i * from / to, 1)).collect())
    }
}

/// Resamples a `[C,H,W]` map to `target` spatial extents.
pub fn resample_spatial<T: Real>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if (h, w) == target {
        return Ok(x.clone());
    }
    let rows = axis_sources(h, target.0)?;
    let cols = axis_sources(w, target.1)?;
    let src = x.data();
    let mut out = Vec::with_capacity(c * target.0 * target.1);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(r0, rn) in &rows {
            for &(c0, cn) in &cols {
                let mut acc = T::zero();
                for r in r0..r0 + rn {
                    for v in &plane[r * w + c0..r * w + c0 + cn] {
                        acc = acc + *v;
                    }
                }
                out.push(acc / T::from_f64((rn * cn) as f64));
            }
        }
    }
    Tensor::from_op(vec![c, target.0, target.1], out, "resample_spatial")
}

pub fn resample_spatial_backward<T: Real>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let [c, h, w] = input_shape[..] else {
        return Err(Error::shape("resample_spatial_backward: input must be [C,H,W]"));
    };
    let (gc, th, tw) = grad_out.dims3()?;
    if gc != c {
        return Err(Error::shape("resample_spatial_backward: channel mismatch"));
    }
    if (h, w) == (th, tw) {
        return Ok(grad_out.clone());
    }
    let rows = axis_sources(h, th)?;
    let cols = axis_sources(w, tw)?;
    let g = grad_out.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for (i, &(r0, rn)) in rows.iter().enumerate() {
            for (j, &(c0, cn)) in cols.iter().enumerate() {
                let share = g[(ch * th + i) * tw + j] / T::from_f64((rn * cn) as f64);
                for r in r0..r0 + rn {
                    let row = (ch * h + r) * w;
                    for v in &mut out[row + c0..row + c0 + cn] {
                        *v = *v + share;
                    }
                }
            }
        }
    }
    Tensor::from_op(input_shape.to_vec(), out, "resample_spatial_backward")
}

/// Mean over the spatial extents of a `[C,H,W]` map, giving a `[C]` vector.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let n = T::from_f64((h * w) as f64);
    let data = x.data().chunks(h * w).map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / n);
    Tensor::from_op(vec![c], data.collect(), "global_avg_pool")
}

pub fn global_avg_pool_backward<T: Real>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let [c, h, w] = input_shape[..] else {
        return Err(Error::shape("global_avg_pool_backward: input must be [C,H,W]"));
    };
    if grad_out.shape() != [c] {
        return Err(Error::shape("global_avg_pool_backward: cotangent length mismatch"));
    }
    let n = T::from_f64((h * w) as f64);
    let mut out = Vec::with_capacity(c * h * w);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g / n, h * w));
    }
    Tensor::from_op(input_shape.to_vec(), out, "global_avg_pool_backward")
}

/// `W·x + b` for `W: [out,in]`, `b: [out]`, `x: [in]`.
pub fn linear_apply<T: Real>(w: &Tensor<T>, b: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (out_dim, in_dim) = linear_dims(w, b, x)?;
    let wd = w.data();
    let xd = x.data();
    let data = (0..out_dim)
        .map(|o| wd[o * in_dim..(o + 1) * in_dim].iter().zip(xd).fold(b.data()[o], |acc, (&wv, &xv)| acc + wv * xv))
        .collect();
    Tensor::from_op(vec![out_dim], data, "linear_apply")
}

/// Returns `(grad_w, grad_b, grad_x)`.
pub fn linear_apply_backward<T: Real>(
    grad_out: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (out_dim, in_dim) = linear_dims(w, b, x)?;
    if grad_out.shape() != [out_dim] {
        return Err(Error::shape("linear_apply_backward: cotangent length mismatch"));
    }
    let g = grad_out.data();
    let xd = x.data();
    let wd = w.data();
    let mut gw = Vec::with_capacity(out_dim * in_dim);
    let mut gx = vec![T::zero(); in_dim];
    for o in 0..out_dim {
        gw.extend(xd.iter().map(|&xv| g[o] * xv));
        for (acc, &wv) in gx.iter_mut().zip(&wd[o * in_dim..(o + 1) * in_dim]) {
            *acc = *acc + g[o] * wv;
        }
    }
    Ok((
        Tensor::from_op(vec![out_dim, in_dim], gw, "linear_apply_backward")?,
        grad_out.clone(),
        Tensor::from_op(vec![in_dim], gx, "linear_apply_backward")?,
    ))
}

fn linear_dims<T: Real>(w: &Tensor<T>, b: &Tensor<T>, x: &Tensor<T>) -> Result<(usize, usize)> {
    let [out_dim, in_dim] = w.shape()[..] else {
        return Err(Error::shape(format!("linear weight must be 2-D, got {:?}", w.shape())));
    };
    if b.shape() != [out_dim] || x.shape() != [in_dim] {
        return Err(Error::shape(format!(
            "linear: W {:?}, b {:?}, x {:?} do not agree",
            w.shape(),
            b.shape(),
            x.shape()
        )));
    }
    Ok((out_dim, in_dim))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Normalizes over the last axis.
    Softmax,
}

pub fn activate<T: Real>(x: &Tensor<T>, mode: Activation) -> Result<Tensor<T>> {
    let data = match mode {
        Activation::Relu => x.data().iter().map(|&v| v.max(T::zero())).collect(),
        Activation::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
        Activation::Softmax => {
            let n = *x.shape().last().expect("rank >= 1");
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                let start = out.len();
                out.extend(row.iter().map(|&v| (v - m).exp()));
                let z = out[start..].iter().fold(T::zero(), |a, &v| a + v);
                for v in &mut out[start..] {
                    *v = *v / z;
                }
            }
            out
        }
    };
    Tensor::from_op(x.shape().to_vec(), data, "activate")
}

/// Cotangent of the input given the forward *output* of [`activate`].
pub fn activate_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>, mode: Activation) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape("activate_backward: shape mismatch"));
    }
    let y = output.data();
    let g = grad_out.data();
    let data = match mode {
        Activation::Relu => y.iter().zip(g).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect(),
        Activation::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
        Activation::Softmax => {
            let n = *output.shape().last().expect("rank >= 1");
            let mut out = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
                out.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
            }
            out
        }
    };
    Tensor::from_op(output.shape().to_vec(), data, "activate_backward")
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `sign(x)·sqrt(|x|)`, elementwise.
pub fn signed_sqrt<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(|v| v.signum() * v.abs().sqrt())
}

/// The derivative is `1 / (2·sqrt|x|)`, taken as 0 at exactly `x = 0`.
pub fn signed_sqrt_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape("signed_sqrt_backward: shape mismatch"));
    }
    let half = T::from_f64(0.5);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v == T::zero() { T::zero() } else { g * half / v.abs().sqrt() })
        .collect();
    Tensor::from_op(x.shape().to_vec(), data, "signed_sqrt_backward")
}

/// `x / max(‖x‖₂, eps)` over the whole tensor.
pub fn l2_normalize<T: Real>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let denom = x.norm2().max(eps);
    x.map(|v| v / denom)
}

pub fn l2_normalize_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape("l2_normalize_backward: shape mismatch"));
    }
    let norm = x.norm2();
    if norm < eps {
        return grad_out.scale(T::one() / eps);
    }
    let y: Vec<T> = x.data().iter().map(|&v| v / norm).collect();
    let dot = y.iter().zip(grad_out.data()).fold(T::zero(), |a, (&y, &g)| a + y * g);
    let data = y.iter().zip(grad_out.data()).map(|(&y, &g)| (g - y * dot) / norm).collect();
    Tensor::from_op(x.shape().to_vec(), data, "l2_normalize_backward")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, seeded_tensor};

    #[test]
    fn pooling_means() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = avg_pool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.shape(), [1, 1, 1]);
        assert_eq!(y.data(), [2.5]);

        let c = Tensor::full(vec![2, 6, 6], 3.5);
        for (win, st) in [((2, 2), (2, 2)), ((3, 3), (1, 1)), ((6, 6), (6, 6)), ((2, 3), (2, 3))] {
            let y = avg_pool2d(&c, win, st).unwrap();
            assert!(y.data().iter().all(|&v| v == 3.5));
        }
    }

    #[test]
    fn pooling_full_size_shapes() {
        let x = Tensor::full(vec![256, 64, 64], 1.0);
        assert_eq!(avg_pool2d(&x, (8, 8), (8, 8)).unwrap().shape(), [256, 8, 8]);
        assert_eq!(resample_spatial(&x, (8, 8)).unwrap().shape(), [256, 8, 8]);
    }

    #[test]
    fn pooling_window_too_large() {
        let x = Tensor::full(vec![1, 2, 2], 1.0);
        assert!(matches!(avg_pool2d(&x, (3, 3), (1, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn resample_cases() {
        let x = seeded_tensor(&[3, 4, 4], 1);
        assert_eq!(resample_spatial(&x, (4, 4)).unwrap(), x);

        let ones = Tensor::full(vec![4, 2, 2], 1.0);
        let up = resample_spatial(&ones, (4, 4)).unwrap();
        assert_eq!(up.shape(), [4, 4, 4]);
        assert!(up.data().iter().all(|&v| v == 1.0));

        let gap = resample_spatial(&x, (1, 1)).unwrap();
        assert!(gap.reshape(vec![3]).unwrap().max_abs_diff(&global_avg_pool(&x).unwrap()) < 1e-15);

        assert!(matches!(resample_spatial(&x, (3, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn nearest_replication_pattern() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = resample_spatial(&x, (4, 4)).unwrap();
        assert_eq!(up.data(), [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn linear_cases() {
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let zero = Tensor::zeros(vec![2]);
        assert_eq!(linear_apply(&w, &zero, &x).unwrap().data(), [3.0, 7.0]);

        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::vector(vec![-2.0, 5.0]).unwrap();
        assert_eq!(linear_apply(&eye, &zero, &v).unwrap(), v);
        assert_eq!(linear_apply(&Tensor::zeros(vec![2, 2]), &v, &x).unwrap(), v);

        let bad = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(linear_apply(&w, &zero, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn activation_values() {
        let x = Tensor::vector(vec![-1.0, 2.0]).unwrap();
        assert_eq!(activate(&x, Activation::Relu).unwrap().data(), [0.0, 2.0]);
        let z = Tensor::vector(vec![0.0]).unwrap();
        assert_eq!(activate(&z, Activation::Sigmoid).unwrap().data(), [0.5]);
        let c = Tensor::full(vec![3], 7.25f64);
        let s = activate(&c, Activation::Softmax).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let big = Tensor::vector(vec![800.0f64, -800.0, 0.0]).unwrap();
        let sg = activate(&big, Activation::Sigmoid).unwrap();
        assert!(sg.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let sm = activate(&big, Activation::Softmax).unwrap();
        assert!((sm.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = seeded_tensor(&[5, 7], 3).scale(4.0).unwrap();
        let s = activate(&x, Activation::Softmax).unwrap();
        for row in s.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn signed_sqrt_values() {
        let x = Tensor::vector(vec![4.0, -4.0, 0.0, 16.0]).unwrap();
        let y = signed_sqrt(&x).unwrap();
        assert_eq!(y.data(), [2.0, -2.0, 0.0, 4.0]);
        assert_eq!(signed_sqrt(&y).unwrap().data()[3], 2.0);
    }

    #[test]
    fn l2_cases() {
        let x = Tensor::vector(vec![3.0f64, 4.0]).unwrap();
        let y = l2_normalize(&x, 1e-12).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let z = Tensor::zeros(vec![5]);
        assert_eq!(l2_normalize(&z, 1e-12).unwrap(), z);
        for seed in 0..20 {
            let v = seeded_tensor(&[17], seed);
            assert!((l2_normalize(&v, 1e-12).unwrap().norm2() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = seeded_tensor(&[2, 4, 6], 11);
        let g = seeded_tensor(&[2, 2, 3], 12);
        fd_check(
            &x,
            |t| avg_pool2d(t, (2, 2), (2, 2)).unwrap(),
            &g,
            |g| avg_pool2d_backward(g, x.shape(), (2, 2), (2, 2)).unwrap(),
        );
        let g = seeded_tensor(&[2, 3, 2], 13);
        fd_check(
            &x,
            |t| avg_pool2d(t, (2, 3), (1, 2)).unwrap(),
            &g,
            |g| avg_pool2d_backward(g, x.shape(), (2, 3), (1, 2)).unwrap(),
        );
        for target in [(2, 3), (8, 12), (1, 1), (8, 3)] {
            let g = seeded_tensor(&[2, target.0, target.1], 14);
            fd_check(
                &x,
                |t| resample_spatial(t, target).unwrap(),
                &g,
                |g| resample_spatial_backward(g, x.shape()).unwrap(),
            );
        }
        let g = seeded_tensor(&[2], 15);
        fd_check(&x, |t| global_avg_pool(t).unwrap(), &g, |g| global_avg_pool_backward(g, x.shape()).unwrap());

        let v = seeded_tensor(&[9], 16);
        let gv = seeded_tensor(&[9], 17);
        for mode in [Activation::Sigmoid, Activation::Softmax, Activation::Relu] {
            fd_check(
                &v,
                |t| activate(t, mode).unwrap(),
                &gv,
                |g| activate_backward(&activate(&v, mode).unwrap(), g, mode).unwrap(),
            );
        }
        // keep away from the non-differentiable band around zero
        let pos = v.map(|x| if x.abs() < 1e-2 { 0.5 } else { x }).unwrap();
        fd_check(&pos, |t| signed_sqrt(t).unwrap(), &gv, |g| signed_sqrt_backward(&pos, g).unwrap());
        fd_check(&v, |t| l2_normalize(t, 1e-12).unwrap(), &gv, |g| l2_normalize_backward(&v, g, 1e-12).unwrap());

        let w = seeded_tensor(&[4, 9], 18);
        let b = seeded_tensor(&[4], 19);
        let go = seeded_tensor(&[4], 20);
        let (gw, gb, gx) = linear_apply_backward(&go, &w, &b, &v).unwrap();
        fd_check(&v, |t| linear_apply(&w, &b, t).unwrap(), &go, |_| gx.clone());
        fd_check(&w, |t| linear_apply(t, &b, &v).unwrap(), &go, |_| gw.clone());
        fd_check(&b, |t| linear_apply(&w, t, &v).unwrap(), &go, |_| gb.clone());
    }

    #[test]
    fn single_precision_primitives() {
        let x = seeded_tensor(&[2, 4, 4], 21).cast::<f32>();
        let y = avg_pool2d(&x, (2, 2), (2, 2)).unwrap();
        let y64 = avg_pool2d(&x.cast::<f64>(), (2, 2), (2, 2)).unwrap();
        assert!(y.cast::<f64>().max_abs_diff(&y64) < 1e-4);
        let n = l2_normalize(&x, 1e-6).unwrap();
        assert!((n.norm2() - 1.0).abs() < 1e-4);
    }
}
