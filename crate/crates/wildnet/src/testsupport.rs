//! Shared helpers for gradient tests.

/// Central finite differences of a scalar function over f32 inputs. The
/// perturbed values are f32-quantized, so the quotient divides by the step
/// that was actually achieved (measured in f64) rather than the nominal one.
/// `scale` sets the step as `scale * max(|x|, 1)`; layer forwards run in f32,
/// so a fairly large step is needed to keep rounding noise below the
/// comparison tolerance (the layers under test are linear or mildly curved,
/// so truncation stays negligible).
pub(crate) fn finite_diff_step<F: FnMut(&[f32]) -> f64>(
    x: &[f32],
    scale: f32,
    mut f: F,
) -> Vec<f64> {
    let mut g = vec![0.0f64; x.len()];
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let h = scale * x[i].abs().max(1.0);
        let xp = x[i] + h;
        let xm = x[i] - h;
        buf[i] = xp;
        let fp = f(&buf);
        buf[i] = xm;
        let fm = f(&buf);
        buf[i] = x[i];
        g[i] = (fp - fm) / (xp as f64 - xm as f64);
    }
    g
}

pub(crate) fn finite_diff<F: FnMut(&[f32]) -> f64>(x: &[f32], f: F) -> Vec<f64> {
    finite_diff_step(x, 1e-2, f)
}

/// Relative comparison with a floor tied to the gradient's own scale, so
/// near-zero entries are judged absolutely.
pub(crate) fn assert_grads_close(analytic: &[f32], numeric: &[f64], what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: gradient length");
    let gmax = analytic
        .iter()
        .map(|a| (*a as f64).abs())
        .fold(1e-6, f64::max);
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let a = *a as f64;
        let tol = 3e-3 * a.abs().max(n.abs()).max(0.05 * gmax);
        assert!(
            (a - n).abs() <= tol,
            "{what}: grad[{i}] analytic {a} vs numeric {n} (gmax {gmax})"
        );
    }
}
