//! Helpers shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub fn seeded_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn seeded_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), seeded_vec(n, seed)).unwrap()
}

/// Central-difference check of a vector-Jacobian product: for every input
/// coordinate, `<g, (f(x+h) - f(x-h)) / 2h>` must match `vjp(g)` to 1e-5
/// relative.
pub fn fd_check(x: &Tensor, f: impl Fn(&Tensor) -> Tensor, g: &Tensor, vjp: impl Fn(&Tensor) -> Tensor) {
    let h = 1e-6;
    let analytic = vjp(g);
    assert_eq!(analytic.shape(), x.shape());
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus).unwrap());
        let fm = f(&Tensor::new(x.shape().to_vec(), minus).unwrap());
        let numeric = (g.dot(&fp).unwrap() - g.dot(&fm).unwrap()) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        assert!((a - numeric).abs() / denom < 1e-5, "coordinate {i}: analytic {a}, numeric {numeric}");
    }
}
