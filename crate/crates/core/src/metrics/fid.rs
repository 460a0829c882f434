//! Frechet distance between Gaussian fits of two activation sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::ActivationMatrix;
use crate::{Error, Result};

/// Diagonal added to both covariances before the matrix square root.
const REG: f64 = 1e-6;
/// Relative size of negative eigenvalues tolerated as round-off.
const RESIDUE_TOL: f64 = 1e-3;

/// Mean and unbiased covariance of the rows.
pub fn gaussian_stats(a: &ActivationMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = (a.len(), a.dim());
    if n < 2 {
        return Err(Error::Metric(format!("FID needs at least 2 samples, got {n}")));
    }
    if n < d + 1 {
        log::warn!("{n} samples for {d}-dimensional features: covariance is rank deficient");
    }
    let x = DMatrix::from_fn(n, d, |i, j| a.rows()[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

/// Square root of a symmetric positive semi-definite matrix; eigenvalues
/// below zero must be round-off.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = clamp_residue(eig.eigenvalues.as_slice())?;
    let root = DMatrix::from_diagonal(&DVector::from_iterator(vals.len(), vals.iter().map(|v| v.sqrt())));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

fn clamp_residue(vals: &[f64]) -> Result<Vec<f64>> {
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    vals.iter()
        .map(|&v| {
            if v >= 0.0 {
                Ok(v)
            } else if -v <= RESIDUE_TOL * scale {
                Ok(0.0)
            } else {
                Err(Error::Metric(format!(
                    "covariance product has a large negative eigenvalue {v:e} (scale {scale:e})"
                )))
            }
        })
        .collect()
}

/// `|mu_r - mu_f|^2 + Tr(S_r + S_f - 2 (S_r S_f)^(1/2))` from supplied
/// statistics (both covariances regularized by `1e-6 I`).
pub fn fid_from_stats(
    mu_r: &DVector<f64>,
    cov_r: &DMatrix<f64>,
    mu_f: &DVector<f64>,
    cov_f: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_r.len();
    if mu_f.len() != d || cov_r.shape() != (d, d) || cov_f.shape() != (d, d) {
        return Err(Error::Metric("FID statistics have inconsistent dimensions".into()));
    }
    let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
    if !mu_r.iter().chain(mu_f.iter()).all(|v| v.is_finite()) || !finite(cov_r) || !finite(cov_f) {
        return Err(Error::Metric("FID statistics contain non-finite values".into()));
    }
    let eye = DMatrix::<f64>::identity(d, d) * REG;
    let sr = cov_r + &eye;
    let sf = cov_f + &eye;
    // Tr((Sr Sf)^(1/2)) = Tr((Sr^(1/2) Sf Sr^(1/2))^(1/2)), the latter symmetric
    let root_r = sqrtm_psd(&sr)?;
    let inner = &root_r * &sf * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let vals = clamp_residue(SymmetricEigen::new(inner).eigenvalues.as_slice())?;
    let tr_sqrt: f64 = vals.iter().map(|v| v.sqrt()).sum();
    let dist = (mu_r - mu_f).norm_squared() + sr.trace() + sf.trace() - 2.0 * tr_sqrt;
    Ok(dist.max(0.0))
}

pub fn fid(real: &ActivationMatrix, fake: &ActivationMatrix) -> Result<f64> {
    if real.dim() != fake.dim() {
        return Err(Error::Metric(format!(
            "feature dimensions differ: {} vs {}",
            real.dim(),
            fake.dim()
        )));
    }
    let (mr, cr) = gaussian_stats(real)?;
    let (mf, cf) = gaussian_stats(fake)?;
    fid_from_stats(&mr, &cr, &mf, &cf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn random_acts(seed: u64, n: usize, d: usize, shift: f64) -> ActivationMatrix {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        ActivationMatrix::new((0..n).map(|_| (0..d).map(|_| dist.sample(&mut r) + shift).collect()).collect()).unwrap()
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = random_acts(1, 50, 6, 0.0);
        assert!(fid(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let f = fid_from_stats(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 3.0), &one).unwrap();
        assert!((f - 9.0).abs() <= 1e-4);
        let four = DMatrix::from_element(1, 1, 4.0);
        let f = fid_from_stats(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 0.0), &four).unwrap();
        assert!((f - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn mean_shift_with_equal_covariance() {
        let a = random_acts(2, 40, 4, 0.0);
        let delta = [0.5, -1.0, 2.0, 0.0];
        let b = ActivationMatrix::new(
            a.rows()
                .iter()
                .map(|r| r.iter().zip(delta).map(|(v, d)| v + d).collect())
                .collect(),
        )
        .unwrap();
        let expect: f64 = delta.iter().map(|d| d * d).sum();
        assert!((fid(&a, &b).unwrap() - expect).abs() <= 1e-4);
    }

    #[test]
    fn symmetric() {
        let a = random_acts(3, 30, 5, 0.0);
        let b = random_acts(4, 30, 5, 0.7);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() <= 1e-8);
    }

    #[test]
    fn rejects_bad_input() {
        let a = random_acts(5, 10, 3, 0.0);
        let b = random_acts(5, 10, 4, 0.0);
        assert!(fid(&a, &b).is_err());
        assert!(fid(&random_acts(5, 1, 3, 0.0), &a).is_err());
        let bad = DMatrix::from_element(1, 1, f64::INFINITY);
        let m = DVector::from_element(1, 0.0);
        assert!(fid_from_stats(&m, &bad, &m, &bad).is_err());
        let neg = DMatrix::from_element(1, 1, -5.0);
        assert!(fid_from_stats(&m, &neg, &m, &DMatrix::from_element(1, 1, 1.0)).is_err());
    }
}
