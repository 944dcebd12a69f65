//! Weighted least-squares state estimation and the chi-square bad-data test.
//!
//! Two residual statistics are exposed. [`residual_norm_sq`] is the plain
//! squared Euclidean norm. [`weighted_residual_sq`] is `rᵀWr`; with
//! `W = diag(1/σ²)` it is chi-square distributed with `I - J` degrees of
//! freedom under Gaussian noise, so the bad-data detector uses it.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::grid::HMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    diagonal: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(diagonal: Vec<f64>) -> Result<Self> {
        if let Some(w) = diagonal.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::invalid(format!("weights must be positive and finite, got {w}")));
        }
        Ok(Self { diagonal })
    }

    /// `diag(1/σ²)` for `n` meters sharing one noise level.
    pub fn from_sigma(n: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("noise sigma must be > 0, got {sigma}")));
        }
        Self::new(vec![1.0 / (sigma * sigma); n])
    }

    pub fn identity(n: usize) -> Self {
        Self {
            diagonal: vec![1.0; n],
        }
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.diagonal.iter().map(|w| w * factor).collect())
    }
}

enum GainFactor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::linalg::FullPivLU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// Factorized WLS estimator for repeated solves against one `H` and `W`.
pub struct WlsEstimator {
    h: DMatrix<f64>,
    weights: DVector<f64>,
    gain: GainFactor,
}

impl WlsEstimator {
    pub fn new(h: &HMatrix, w: &WeightMatrix) -> Result<Self> {
        if w.diagonal().len() != h.rows() {
            return Err(Error::Dimension {
                what: "weight matrix",
                expected: h.rows(),
                found: w.diagonal().len(),
            });
        }
        let hm = h.matrix().clone();
        let weights = DVector::from_column_slice(w.diagonal());
        let mut wh = hm.clone();
        for (mut row, &wi) in wh.row_iter_mut().zip(weights.iter()) {
            row *= wi;
        }
        let gain = hm.transpose() * wh;
        let factor = match gain.clone().cholesky() {
            Some(c) => GainFactor::Cholesky(c),
            None => {
                let lu = gain.full_piv_lu();
                if !lu.is_invertible() {
                    return Err(Error::EstimationFailed);
                }
                let (n, scale) = (hm.ncols(), lu.u().amax().max(1.0));
                let diag_min = (0..n).map(|i| lu.u()[(i, i)].abs()).fold(f64::INFINITY, f64::min);
                if diag_min <= scale * 1e-12 {
                    return Err(Error::EstimationFailed);
                }
                GainFactor::Lu(lu)
            }
        };
        Ok(Self {
            h: hm,
            weights,
            gain: factor,
        })
    }

    pub fn estimate(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.h.nrows() {
            return Err(Error::Dimension {
                what: "measurement vector",
                expected: self.h.nrows(),
                found: y.len(),
            });
        }
        let wy = DVector::from_iterator(y.len(), y.iter().zip(self.weights.iter()).map(|(a, b)| a * b));
        let rhs = self.h.transpose() * wy;
        let v = match &self.gain {
            GainFactor::Cholesky(c) => c.solve(&rhs),
            GainFactor::Lu(lu) => lu.solve(&rhs).ok_or(Error::EstimationFailed)?,
        };
        Ok(v.as_slice().to_vec())
    }

    pub fn weighted_residual_sq(&self, y: &[f64]) -> Result<f64> {
        let v = self.estimate(y)?;
        let fitted = &self.h * DVector::from_column_slice(&v);
        Ok(y
            .iter()
            .zip(fitted.iter())
            .zip(self.weights.iter())
            .map(|((yi, fi), wi)| wi * (yi - fi) * (yi - fi))
            .sum())
    }
}

/// Closed-form minimizer of `[y - Hv]ᵀ W [y - Hv]`.
pub fn wls_estimate(h: &HMatrix, w: &WeightMatrix, y: &[f64]) -> Result<Vec<f64>> {
    WlsEstimator::new(h, w)?.estimate(y)
}

fn residual(y: &[f64], h: &HMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if y.len() != h.rows() {
        return Err(Error::Dimension {
            what: "measurement vector",
            expected: h.rows(),
            found: y.len(),
        });
    }
    let fitted = h.apply(v)?;
    Ok(y.iter().zip(&fitted).map(|(a, b)| a - b).collect())
}

/// `‖y - H v‖²`
pub fn residual_norm_sq(y: &[f64], h: &HMatrix, v: &[f64]) -> Result<f64> {
    Ok(residual(y, h, v)?.iter().map(|r| r * r).sum())
}

/// `rᵀ W r` with `r = y - H v`
pub fn weighted_residual_sq(y: &[f64], h: &HMatrix, w: &WeightMatrix, v: &[f64]) -> Result<f64> {
    let r = residual(y, h, v)?;
    if w.diagonal().len() != r.len() {
        return Err(Error::Dimension {
            what: "weight matrix",
            expected: r.len(),
            found: w.diagonal().len(),
        });
    }
    Ok(r.iter().zip(w.diagonal()).map(|(ri, wi)| wi * ri * ri).sum())
}

pub fn chi_square_cdf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(dof as f64 / 2.0, x / 2.0)
    }
}

/// `(1 - significance)` quantile of chi-square(`dof`), by bisection on the CDF.
pub fn compute_threshold(significance: f64, dof: usize) -> Result<f64> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::invalid(format!("significance must lie in (0, 1), got {significance}")));
    }
    if dof == 0 {
        return Err(Error::invalid("chi-square needs at least one degree of freedom"));
    }
    let target = 1.0 - significance;
    let mut lo = 0.0;
    let mut hi = dof as f64 + 10.0;
    while chi_square_cdf(hi, dof) < target {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi_square_cdf(mid, dof) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BddConfig {
    pub significance: f64,
    pub degrees_of_freedom: usize,
    pub threshold: f64,
}

impl BddConfig {
    pub fn new(significance: f64, degrees_of_freedom: usize) -> Result<Self> {
        Ok(Self {
            significance,
            degrees_of_freedom,
            threshold: compute_threshold(significance, degrees_of_freedom)?,
        })
    }

    /// Detector for an `rows x cols` measurement model (`dof = rows - cols`).
    pub fn for_model(h: &HMatrix, significance: f64) -> Result<Self> {
        if h.rows() <= h.cols() {
            return Err(Error::invalid(format!(
                "no measurement redundancy ({} meters, {} states)",
                h.rows(),
                h.cols()
            )));
        }
        Self::new(significance, h.rows() - h.cols())
    }
}

/// Flags bad data when the residual statistic strictly exceeds the threshold.
pub fn bdd_test(r_sq: f64, cfg: &BddConfig) -> bool {
    r_sq > cfg.threshold
}

/// WLS estimator paired with its detector; the statistic is `rᵀWr`.
pub struct BadDataDetector {
    estimator: WlsEstimator,
    config: BddConfig,
}

impl BadDataDetector {
    pub fn new(h: &HMatrix, w: &WeightMatrix, significance: f64) -> Result<Self> {
        Ok(Self {
            estimator: WlsEstimator::new(h, w)?,
            config: BddConfig::for_model(h, significance)?,
        })
    }

    pub fn config(&self) -> &BddConfig {
        &self.config
    }

    pub fn statistic(&self, y: &[f64]) -> Result<f64> {
        self.estimator.weighted_residual_sq(y)
    }

    pub fn flags(&self, y: &[f64]) -> Result<bool> {
        Ok(bdd_test(self.statistic(y)?, &self.config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn column11() -> HMatrix {
        HMatrix::from_matrix(DMatrix::from_row_slice(2, 1, &[1.0, 1.0]))
    }

    #[test]
    fn identity_model() {
        let h = HMatrix::from_matrix(DMatrix::identity(2, 2));
        let v = wls_estimate(&h, &WeightMatrix::identity(2), &[0.3, -0.1]).unwrap();
        assert_abs_diff_eq!(v[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], -0.1, epsilon = 1e-15);
    }

    #[test]
    fn unweighted_mean() {
        let v = wls_estimate(&column11(), &WeightMatrix::identity(2), &[1.0, 3.0]).unwrap();
        assert_abs_diff_eq!(v[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(residual_norm_sq(&[1.0, 3.0], &column11(), &v).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn weights_shift_the_estimate() {
        let w = WeightMatrix::new(vec![3.0, 1.0]).unwrap();
        let v = wls_estimate(&column11(), &w, &[1.0, 3.0]).unwrap();
        assert_abs_diff_eq!(v[0], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn consistent_measurements_have_zero_residual() {
        let h = HMatrix::from_matrix(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, -1.0]));
        let y = h.apply(&[0.4, -0.2]).unwrap();
        let v = wls_estimate(&h, &WeightMatrix::identity(3), &y).unwrap();
        assert!(residual_norm_sq(&y, &h, &v).unwrap() < 1e-12);
    }

    #[test]
    fn rank_deficient_model_fails() {
        let h = HMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]));
        let err = WlsEstimator::new(&h, &WeightMatrix::identity(2)).err().unwrap();
        assert!(err.to_string().contains("estimation failed: rank"));
    }

    #[test]
    fn dimension_mismatches() {
        let h = column11();
        assert!(wls_estimate(&h, &WeightMatrix::identity(3), &[1.0, 2.0]).is_err());
        assert!(wls_estimate(&h, &WeightMatrix::identity(2), &[1.0]).is_err());
        assert!(residual_norm_sq(&[1.0, 2.0], &h, &[1.0, 2.0]).is_err());
        assert!(WeightMatrix::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn chi_square_quantiles() {
        assert_abs_diff_eq!(compute_threshold(0.05, 6).unwrap(), 12.591_587, epsilon = 1e-5);
        assert_abs_diff_eq!(compute_threshold(0.05, 1).unwrap(), 3.841_459, epsilon = 1e-5);
        assert_abs_diff_eq!(compute_threshold(0.5, 2).unwrap(), 2.0 * 2f64.ln(), epsilon = 1e-10);
        assert_abs_diff_eq!(compute_threshold(0.01, 10).unwrap(), 23.209_251, epsilon = 1e-5);
        assert!(compute_threshold(0.0, 3).is_err());
        assert!(compute_threshold(1.0, 3).is_err());
        assert!(compute_threshold(0.05, 0).is_err());
    }

    #[test]
    fn detector_uses_strict_inequality() {
        let cfg = BddConfig::new(0.05, 6).unwrap();
        assert!(!bdd_test(0.0, &cfg));
        assert!(!bdd_test(cfg.threshold, &cfg));
        assert!(bdd_test(cfg.threshold * (1.0 + 1e-12), &cfg));
    }
}
