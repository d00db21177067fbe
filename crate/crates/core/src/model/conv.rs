//! Stride-1 2-D convolution via im2col and a dense matrix product.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c (m×n) = op(a) (m×k) · op(b) (k×n)`, optionally accumulating into `c`.
/// `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the three slices have exactly the extents implied by the
    // strides above, asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x: &Tensor, w: &Tensor, pad: usize) -> Result<Geometry> {
    let (cin, h, wd) = x.dims3()?;
    let [cout, wcin, k, k2] = w.shape()[..] else {
        return Err(Error::shape(format!("conv weight must be [Co,Ci,k,k], got {:?}", w.shape())));
    };
    if wcin != cin || k != k2 {
        return Err(Error::shape(format!("conv weight {:?} does not fit input {:?}", w.shape(), x.shape())));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::shape("conv kernel larger than padded input"));
    }
    Ok(Geometry { cin, h, w: wd, cout, k, pad, oh: h + 2 * pad - k + 1, ow: wd + 2 * pad - k + 1 })
}

fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut cols = vec![0.0; g.cin * g.k * g.k * plane];
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..g.oh {
                    let ii = oi as isize + ki as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let srow = &src[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let drow = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    let lo = g.pad.saturating_sub(kj);
                    let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow);
                    for oj in lo..hi {
                        drow[oj] = srow[oj + kj - g.pad];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..g.oh {
                    let ii = oi as isize + ki as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let srow = &src[oi * g.ow..(oi + 1) * g.ow];
                    let lo = g.pad.saturating_sub(kj);
                    let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow);
                    for oj in lo..hi {
                        drow[oj + kj - g.pad] += srow[oj];
                    }
                }
            }
        }
    }
    x
}

/// Zero-padded stride-1 convolution of `x: [Ci,H,W]` with `w: [Co,Ci,k,k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, pad: usize) -> Result<Tensor> {
    let g = geometry(x, w, pad)?;
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.cout * plane];
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(format!("conv bias {:?}, expected [{}]", b.shape(), g.cout)));
        }
        for (row, &bv) in out.chunks_mut(plane).zip(b.data()) {
            row.fill(bv);
        }
    }
    let inner = g.cin * g.k * g.k;
    if g.k == 1 && g.pad == 0 {
        gemm(g.cout, inner, plane, w.data(), false, x.data(), false, &mut out, true);
    } else {
        let cols = im2col(x.data(), &g);
        gemm(g.cout, inner, plane, w.data(), false, &cols, false, &mut out, true);
    }
    Tensor::from_op(vec![g.cout, g.oh, g.ow], out, "conv2d")
}

/// Returns `(grad_x, grad_w, grad_bias)`; the bias gradient is always the
/// per-channel sum of the cotangent.
pub fn conv2d_backward(grad_out: &Tensor, x: &Tensor, w: &Tensor, pad: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let g = geometry(x, w, pad)?;
    if grad_out.shape() != [g.cout, g.oh, g.ow] {
        return Err(Error::shape("conv2d_backward: cotangent shape mismatch"));
    }
    let plane = g.oh * g.ow;
    let inner = g.cin * g.k * g.k;
    let gd = grad_out.data();
    let direct = g.k == 1 && g.pad == 0;
    let cols_owned;
    let cols: &[f64] = if direct {
        x.data()
    } else {
        cols_owned = im2col(x.data(), &g);
        &cols_owned
    };
    let mut gw = vec![0.0; g.cout * inner];
    gemm(g.cout, plane, inner, gd, false, cols, true, &mut gw, false);
    let mut gcols = vec![0.0; inner * plane];
    gemm(inner, g.cout, plane, w.data(), true, gd, false, &mut gcols, false);
    let gx = if direct { gcols } else { col2im(&gcols, &g) };
    let gb = gd.chunks(plane).map(|r| r.iter().sum()).collect();
    Ok((
        Tensor::from_op(x.shape().to_vec(), gx, "conv2d_backward")?,
        Tensor::from_op(w.shape().to_vec(), gw, "conv2d_backward")?,
        Tensor::from_op(vec![g.cout], gb, "conv2d_backward")?,
    ))
}

/// Pads `x: [C,H,W]` by `pad` on each side, wrapping around both spatial axes.
pub fn circular_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if pad > h || pad > w {
        return Err(Error::shape(format!("circular pad {pad} exceeds extent of {:?}", x.shape())));
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let src = x.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ci in 0..c {
        for i in 0..ph {
            let si = (i + h - pad) % h;
            for j in 0..pw {
                out.push(src[(ci * h + si) * w + (j + w - pad) % w]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, ph, pw], out))
}

/// Folds the gradient of a circularly padded map back onto its source.
pub fn circular_pad_backward(grad: &Tensor, input_shape: &[usize], pad: usize) -> Result<Tensor> {
    let [c, h, w] = input_shape[..] else {
        return Err(Error::shape("circular pad input must be [C,H,W]"));
    };
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    if grad.shape() != [c, ph, pw] {
        return Err(Error::shape(format!("circular pad gradient {:?}, expected [{c},{ph},{pw}]", grad.shape())));
    }
    let g = grad.data();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for i in 0..ph {
            let si = (i + h - pad) % h;
            for j in 0..pw {
                out[(ci * h + si) * w + (j + w - pad) % w] += g[(ci * ph + i) * pw + j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}
