use super::array::Array;
use crate::scalar::Scalar;

/// Central-difference estimate of the gradient of `f` at `x`:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient<S: Scalar>(
    mut f: impl FnMut(&Array<S>) -> S,
    x: &Array<S>,
    step: S,
) -> Array<S> {
    assert!(step > S::zero(), "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = Array::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (step + step);
    }
    out
}

/// Largest per-coordinate relative error `|a − b| / max(|a| + |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is ~0 from dominating the
/// ratio with rounding noise.
pub fn max_relative_error<S: Scalar>(analytic: &Array<S>, numeric: &Array<S>, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.widen(), n.widen());
            (a - n).abs() / (a.abs() + n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
