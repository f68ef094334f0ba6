//! Shared helpers for unit tests: central-difference gradients and slice
//! comparison with mixed relative/absolute tolerance.

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xv = x.to_vec();
    for i in 0..x.len() {
        let orig = xv[i];
        xv[i] = orig + h;
        let fp = f(&xv);
        xv[i] = orig - h;
        let fm = f(&xv);
        xv[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Assert every pair satisfies |a-b| <= abs_tol + rel_tol * |b|.
pub fn assert_all_close(got: &[f64], want: &[f64], rel_tol: f64, abs_tol: f64) {
    assert_eq!(got.len(), want.len(), "length mismatch: {} vs {}", got.len(), want.len());
    for (i, (&a, &b)) in got.iter().zip(want).enumerate() {
        let tol = abs_tol + rel_tol * b.abs().max(a.abs());
        assert!(
            (a - b).abs() <= tol,
            "index {i}: got {a}, want {b} (diff {}, tol {tol})",
            (a - b).abs()
        );
    }
}
