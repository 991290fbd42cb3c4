//! Finite-difference utilities used by gradient tests downstream.

use ndarray::ArrayD;

use crate::Element;

/// Central-difference gradient of a scalar function w.r.t. `x`.
pub fn central_diff<F: Element>(
    mut f: impl FnMut(&ArrayD<F>) -> f64,
    x: &ArrayD<F>,
    h: f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::<f64>::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[&idx];
        xp[&idx] = orig + F::from_f64(h);
        let fp = f(&xp);
        xp[&idx] = orig - F::from_f64(h);
        let fm = f(&xp);
        xp[&idx] = orig;
        grad[&idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max relative error between an analytic gradient and its finite-difference
/// estimate, with an absolute floor to avoid blowups near zero.
pub fn max_rel_err<F: Element>(analytic: &ArrayD<F>, numeric: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let a = a.as_f64();
        let denom = a.abs().max(n.abs()).max(floor);
        let err = (a - n).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}
