//! Thin wrappers over nalgebra factorizations with the crate's jitter policy.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::{Error, Result};

/// Cholesky with one retry: if the factorization fails, 10x the base jitter
/// is added to the whole diagonal before giving up. The matrix is consumed.
pub fn cholesky_with_retry(
    mat: DMatrix<f64>,
    base_jitter: f64,
    context: &str,
) -> Result<Cholesky<f64, Dyn>> {
    match mat.clone().cholesky() {
        Some(c) => Ok(c),
        None => {
            let n = mat.nrows();
            let mut bumped = mat;
            for i in 0..n {
                bumped[(i, i)] += 10.0 * base_jitter;
            }
            bumped.cholesky().ok_or_else(|| {
                Error::numerical(
                    format!("{context}: covariance not positive definite after jitter retry"),
                    None,
                )
            })
        }
    }
}

/// Log-density of N(mean, cov) at `x`, sharing the jitter retry policy.
pub fn mvn_logpdf(
    x: &[f64],
    mean: &[f64],
    cov: DMatrix<f64>,
    base_jitter: f64,
    context: &str,
) -> Result<f64> {
    let n = x.len();
    let chol = cholesky_with_retry(cov, base_jitter, context)?;
    let mut resid = nalgebra::DVector::from_iterator(n, x.iter().zip(mean).map(|(a, b)| a - b));
    chol.solve_mut(&mut resid);
    let quad: f64 = resid
        .iter()
        .zip(x.iter().zip(mean))
        .map(|(s, (a, b))| s * (a - b))
        .sum();
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (n as f64 * crate::special::LN_2PI + logdet + quad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::LN_2PI;

    #[test]
    fn retry_recovers_borderline_matrix() {
        // Semi-definite: ones 2x2 has a zero eigenvalue; jitter rescues it.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = cholesky_with_retry(m, 1e-8, "test");
        assert!(c.is_ok());
    }

    #[test]
    fn retry_reports_hopeless_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        let err = cholesky_with_retry(m, 1e-8, "test").unwrap_err();
        assert!(err.to_string().contains("positive definite"));
    }

    #[test]
    fn mvn_logpdf_univariate_matches_closed_form() {
        let ll = mvn_logpdf(&[0.0], &[0.0], DMatrix::from_element(1, 1, 1.0), 0.0, "t").unwrap();
        assert!((ll + 0.5 * LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn mvn_logpdf_matches_independent_product() {
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.25]);
        let ll = mvn_logpdf(&[1.0, -0.5], &[0.0, 0.5], cov, 0.0, "t").unwrap();
        let want = crate::special::normal_logpdf(1.0, 0.0, 2.0)
            + crate::special::normal_logpdf(-0.5, 0.5, 0.5);
        assert!((ll - want).abs() < 1e-12);
    }
}
