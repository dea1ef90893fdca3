//! Small helpers for finite-difference gradient verification.

/// `|a - b| / max(|a| + |b|, 1e-8)` — symmetric relative error that stays
/// finite when both values are near zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Central difference `(f(x0+eps) - f(x0-eps)) / (2 eps)`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, eps: f64) -> f64 {
    (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps)
}
