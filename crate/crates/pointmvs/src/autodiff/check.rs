//! Numerical gradient checking utilities.
//!
//! Analytic gradients throughout the crate are validated against
//! central finite differences: each input element is displaced by
//! `+h` and `-h`, the scalar objective is re-evaluated from scratch,
//! and the two-sided slope approximates the derivative with `O(h^2)`
//! truncation error.

use ndarray::ArrayD;

/// Central-difference gradient of a scalar function at `x`.
///
/// `f` must be a pure function of its argument: it is called twice per
/// element of `x`.
pub fn central_diff<F>(mut f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    // ndarray iteration order is deterministic (row-major for the
    // owned arrays used here), so indexing by flat position is safe.
    let n = x.len();
    for i in 0..n {
        let orig = probe.as_slice_mut().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + h;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - h;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest per-element relative error between two gradients.
///
/// Each element uses `|a - b| / max(|a|, |b|, 1e-6)`; the floor keeps
/// near-zero entries from dominating through roundoff noise.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let mut worst = 0.0f64;
    for (&av, &bv) in a.iter().zip(b.iter()) {
        let denom = av.abs().max(bv.abs()).max(1e-6);
        worst = worst.max((av - bv).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn central_diff_recovers_quadratic_gradient() {
        // f(x) = sum(x^2) has gradient 2x; central differences on a
        // quadratic are exact up to roundoff.
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let g = central_diff(|v| v.iter().map(|e| e * e).sum(), &x, 1e-5);
        for (gv, xv) in g.iter().zip(x.iter()) {
            assert!((gv - 2.0 * xv).abs() < 1e-9);
        }
    }

    #[test]
    fn max_rel_err_floor_damps_tiny_entries() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 1e-12]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 0.0]).unwrap();
        assert!(max_rel_err(&a, &b) < 1e-5);
    }

    #[test]
    fn max_rel_err_detects_disagreement() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 2.0]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 2.2]).unwrap();
        let err = max_rel_err(&a, &b);
        assert!(err > 0.08 && err < 0.1);
    }
}
