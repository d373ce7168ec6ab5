//! Difference matrices and spectral-gap rank detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SingularSpectrum};

/// Rows `y_base[i] − y_star[i]` for each `i` in `indices`.
///
/// The residual input cancels, leaving `h(x; γ) · (W_v W_o − W̃_v W̃_o)` per row.
pub fn difference_matrix(y_base: &Matrix, y_star: &Matrix, indices: &[usize], usable: &[bool]) -> Result<Matrix> {
    if y_base.shape() != y_star.shape() || usable.len() != y_base.rows() {
        return Err(Error::ShapeMismatch(format!(
            "base {:?}, reconstructed {:?}, mask of {}",
            y_base.shape(),
            y_star.shape(),
            usable.len()
        )));
    }
    let d = y_base.cols();
    let mut out = Matrix::zeros(indices.len(), d);
    for (r, &i) in indices.iter().enumerate() {
        if i >= usable.len() {
            return Err(Error::InvalidParameter(format!("probe index {i} out of range")));
        }
        if !usable[i] {
            return Err(Error::InvalidParameter(format!("probe {i} failed reconstruction and is masked")));
        }
        for ((o, a), b) in out.row_mut(r).iter_mut().zip(y_base.row(i)).zip(y_star.row(i)) {
            *o = a - b;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub rank: Option<usize>,
    /// Largest `ln(σ_i / σ_{i+1})`; 0 when the spectrum is below the null floor.
    pub peak_log_ratio: f64,
}

/// `ln(σ_i / σ_{i+1})` for `i = 1..n−1`.
///
/// Values are clamped below at `max(1e-300, n · eps · σ₁)`, so gaps between
/// entries that are all roundoff read as zero.
pub fn log_ratios(spectrum: &SingularSpectrum) -> Vec<f64> {
    let v = spectrum.values();
    let floor = (v.len() as f64 * f64::EPSILON * spectrum.largest()).max(1e-300);
    v.windows(2).map(|w| (w[0].max(floor) / w[1].max(floor)).ln()).collect()
}

/// Rank at the sharpest drop of the spectrum.
///
/// `None` if the spectrum is shorter than 2, if `σ₁ < abs_floor · reference_scale`
/// (nothing distinguishes the models), or if the peak log-ratio is below `ratio_floor`.
/// Ties go to the smaller rank.
pub fn rank_from_spectrum(
    spectrum: &SingularSpectrum,
    ratio_floor: f64,
    abs_floor: f64,
    reference_scale: f64,
) -> RankEstimate {
    let null = RankEstimate { rank: None, peak_log_ratio: 0.0 };
    if spectrum.len() < 2 || spectrum.largest() < abs_floor * reference_scale {
        return null;
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, r) in log_ratios(spectrum).into_iter().enumerate() {
        if r > best.1 {
            best = (i + 1, r);
        }
    }
    RankEstimate {
        rank: (best.1 >= ratio_floor).then_some(best.0),
        peak_log_ratio: best.1,
    }
}
