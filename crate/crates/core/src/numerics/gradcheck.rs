//! Central finite differences, used as an independent check on analytic gradients.

use crate::error::{Error, Result};

/// `(f(y + h e_i) - f(y - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_gradient<F>(f: F, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    let mut probe = y.to_vec();
    let mut grad = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        probe[i] = y[i] + h;
        let plus = f(&probe);
        probe[i] = y[i] - h;
        let minus = f(&probe);
        probe[i] = y[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest per-coordinate relative error, `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff_gradient(|y| y.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let g = finite_diff_gradient(|_| 3.5, &[0.3, -1.0, 9.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let r = finite_diff_gradient(|y| if y[0] > 0.0 { f64::INFINITY } else { 0.0 }, &[0.0], 1e-3);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(finite_diff_gradient(|_| 0.0, &[0.0], 0.0).is_err());
    }
}
