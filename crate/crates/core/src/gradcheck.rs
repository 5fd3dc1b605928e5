//! Central finite differences, used to validate analytic gradients.

/// Denominator floor of [`relative_error`]; below this magnitude both
/// gradients are compared absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, MAGNITUDE_FLOOR)
}

/// `|a − n| / max(|a|, |n|, floor)`. The floor should sit well above the
/// rounding noise of the numeric estimate, roughly `ε·|loss| / step`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for the requested coordinates.
pub fn central_difference(
    x: &[f64],
    coords: &[usize],
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}
