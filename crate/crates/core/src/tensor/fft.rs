use rustfft::num_complex::Complex;

use super::Real;
use crate::error::{Error, Result};

/// Split real/imaginary storage for a spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVector<T: Real = f64> {
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Real> ComplexVector<T> {
    pub fn new(re: Vec<T>, im: Vec<T>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::shape(format!("complex vector parts differ in length: {} vs {}", re.len(), im.len())));
        }
        if re.iter().chain(&im).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite spectrum entry".into()));
        }
        Ok(ComplexVector { re, im })
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    fn to_buffer(&self) -> Vec<Complex<T>> {
        self.re.iter().zip(&self.im).map(|(&re, &im)| Complex::new(re, im)).collect()
    }

    fn from_buffer(buf: Vec<Complex<T>>) -> Self {
        let (re, im) = buf.into_iter().map(|c| (c.re, c.im)).unzip();
        ComplexVector { re, im }
    }
}

fn real_buffer<T: Real>(v: &[T]) -> Result<Vec<Complex<T>>> {
    if v.is_empty() {
        return Err(Error::shape("transform length must be at least 1"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite transform input".into()));
    }
    Ok(v.iter().map(|&x| Complex::new(x, T::zero())).collect())
}

/// Discrete Fourier transform `X[k] = Σ_t v[t]·e^{-2πi·kt/n}` for any length.
pub fn dft<T: Real>(v: &[T]) -> Result<ComplexVector<T>> {
    let mut buf = real_buffer(v)?;
    T::fft_in_place(&mut buf, false);
    Ok(ComplexVector::from_buffer(buf))
}

/// Inverse transform, normalized by `1/n`.
pub fn idft<T: Real>(spectrum: &ComplexVector<T>) -> Result<ComplexVector<T>> {
    if spectrum.is_empty() {
        return Err(Error::shape("transform length must be at least 1"));
    }
    let mut buf = spectrum.to_buffer();
    T::fft_in_place(&mut buf, true);
    let inv = T::one() / T::from_f64(buf.len() as f64);
    for c in &mut buf {
        *c = *c * inv;
    }
    Ok(ComplexVector::from_buffer(buf))
}

/// Real part of [`idft`].
pub fn idft_real<T: Real>(spectrum: &ComplexVector<T>) -> Result<Vec<T>> {
    Ok(idft(spectrum)?.re)
}

fn check_pair<T: Real>(a: &[T], b: &[T], op: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{op}: lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

/// Spectral product route shared by convolution and correlation.
fn spectral<T: Real>(a: &[T], b: &[T], conjugate_b: bool) -> Result<Vec<T>> {
    let mut fa = real_buffer(a)?;
    let mut fb = real_buffer(b)?;
    T::fft_in_place(&mut fa, false);
    T::fft_in_place(&mut fb, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x = *x * if conjugate_b { y.conj() } else { *y };
    }
    T::fft_in_place(&mut fa, true);
    let inv = T::one() / T::from_f64(fa.len() as f64);
    let out: Vec<T> = fa.iter().map(|c| c.re * inv).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite convolution output".into()));
    }
    Ok(out)
}

/// `out[k] = Σ_t a[t]·b[(k−t) mod d]`, computed in the frequency domain.
pub fn circular_convolve<T: Real>(a: &[T], b: &[T]) -> Result<Vec<T>> {
    check_pair(a, b, "circular_convolve")?;
    spectral(a, b, false)
}

/// `out[t] = Σ_k a[k]·b[(k−t) mod d]`, the adjoint of convolution by `b`.
pub fn circular_correlate<T: Real>(a: &[T], b: &[T]) -> Result<Vec<T>> {
    check_pair(a, b, "circular_correlate")?;
    spectral(a, b, true)
}

/// Cotangents of both operands of [`circular_convolve`].
pub fn circular_convolve_backward<T: Real>(grad_out: &[T], a: &[T], b: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    check_pair(a, b, "circular_convolve_backward")?;
    check_pair(grad_out, a, "circular_convolve_backward")?;
    Ok((circular_correlate(grad_out, b)?, circular_correlate(grad_out, a)?))
}
