//! Central finite differences for verifying reverse-mode gradients.

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
///
/// `f` is evaluated `2 · x.len()` times on perturbed copies of `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Worst element of an analytic-vs-numeric comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error `|a - n| / max(|a|, |n|)`; differences below `abs_floor`
/// count as exact agreement.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Largest relative error over all coordinates, or `None` for empty input.
pub fn worst_mismatch(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> Option<GradMismatch> {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(index, (&a, &n))| GradMismatch {
            index,
            analytic: a,
            numeric: n,
            rel_err: relative_error(a, n, abs_floor),
        })
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
}
