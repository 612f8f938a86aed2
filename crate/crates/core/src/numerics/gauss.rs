use std::f64::consts::PI;

use super::matrix::Vector;
use super::rng::RngStream;
use crate::error::{Result, TcmError};

/// Log-density of the isotropic Gaussian `N(mean, sigma2 * I)` at `x`.
pub fn gauss_logpdf(x: &[f64], mean: &[f64], sigma2: f64) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(TcmError::shape(
            "gauss_logpdf",
            format!("x has {} dims, mean {}", x.len(), mean.len()),
        ));
    }
    if !(sigma2 > 0.0) {
        return Err(TcmError::Contract(format!(
            "gauss_logpdf needs sigma2 > 0, got {sigma2}"
        )));
    }
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * d * (2.0 * PI * sigma2).ln() - sq / (2.0 * sigma2))
}

/// `count` i.i.d. draws from `N(mean, sigma2 * I)`.
pub fn sample_gaussian(
    rng: &mut RngStream,
    mean: &[f64],
    sigma2: f64,
    count: usize,
) -> Result<Vec<Vector>> {
    if !(sigma2 > 0.0) {
        return Err(TcmError::Contract(format!(
            "sample_gaussian needs sigma2 > 0, got {sigma2}"
        )));
    }
    let std = sigma2.sqrt();
    Ok((0..count)
        .map(|_| {
            mean.iter()
                .map(|&m| m + std * rng.standard_normal())
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logpdf_examples() {
        let v = gauss_logpdf(&[0.0], &[0.0], 1.0).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);

        let s2 = 0.37;
        let v = gauss_logpdf(&[0.4, -1.2], &[0.4, -1.2], s2).unwrap();
        assert!((v + (2.0 * PI * s2).ln()).abs() < 1e-14);

        let v = gauss_logpdf(&[1.0, 1.0], &[0.0, 0.0], 2.0).unwrap();
        assert!((v - (-(4.0 * PI).ln() - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn logpdf_shape_error() {
        assert!(matches!(
            gauss_logpdf(&[0.0], &[0.0, 1.0], 1.0),
            Err(TcmError::Shape { .. })
        ));
    }

    #[test]
    fn sampling_basics() {
        let mut rng = RngStream::new(1, 0);
        assert!(sample_gaussian(&mut rng, &[0.0; 3], 1.0, 0)
            .unwrap()
            .is_empty());

        let draws = sample_gaussian(&mut rng, &[0.0, 0.0], 1.0, 100_000).unwrap();
        for j in 0..2 {
            let mean = draws.iter().map(|d| d[j]).sum::<f64>() / draws.len() as f64;
            assert!(mean.abs() < 0.02, "coordinate {j} mean {mean}");
        }

        let a = sample_gaussian(&mut RngStream::new(9, 2), &[1.0], 0.5, 10).unwrap();
        let b = sample_gaussian(&mut RngStream::new(9, 2), &[1.0], 0.5, 10).unwrap();
        assert_eq!(a, b);
    }

    /// Importance-sampling estimate of the normalizing constant using a
    /// wider Gaussian proposal.
    #[test]
    fn density_integrates_to_one() {
        let mut rng = RngStream::new(3, 0);
        for d in 1..=3usize {
            let mean: Vec<f64> = (0..d).map(|i| 0.3 * i as f64).collect();
            let sigma2 = 0.7;
            let prop_var = 2.0 * sigma2;
            let n = 200_000;
            let mut acc = 0.0;
            for x in sample_gaussian(&mut rng, &mean, prop_var, n).unwrap() {
                let lp = gauss_logpdf(&x, &mean, sigma2).unwrap();
                let lq = gauss_logpdf(&x, &mean, prop_var).unwrap();
                acc += (lp - lq).exp();
            }
            let z = acc / n as f64;
            assert!((z - 1.0).abs() < 0.01, "d={d}: {z}");
        }
    }
}
