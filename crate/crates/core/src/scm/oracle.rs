use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Domain;
use super::spec::ScmSpec;
use crate::error::{Result, TcmError};
use crate::numerics::{Matrix, RngStream, Vector};

pub const MIN_MC_SAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub probs: Vector,
    pub stderr: Vector,
}

/// Oracle posteriors for many points, one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTable {
    pub probs: Matrix,
    pub stderr: Matrix,
}

impl OracleTable {
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.probs.rows())
            .map(|i| crate::numerics::argmax(self.probs.row(i)))
            .collect()
    }
}

/// `sum_u P(Y | x, u) P(u | S = t)` by Monte Carlo.
pub fn transport_oracle(
    spec: &ScmSpec,
    x: &[f64],
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<OracleEstimate> {
    interventional_posterior(spec, x, Domain::Target, mc_samples, rng)
}

/// `sum_u P(Y | x, u) P(u | S = domain)` by Monte Carlo.
pub fn interventional_posterior(
    spec: &ScmSpec,
    x: &[f64],
    domain: Domain,
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<OracleEstimate> {
    let table = oracle_batch(spec, &Matrix::row_vector(x), domain, mc_samples, rng)?;
    Ok(OracleEstimate {
        probs: table.probs.row(0).to_vec(),
        stderr: table.stderr.row(0).to_vec(),
    })
}

/// Evaluates the oracle for every row of `xs`, sharing one set of factor
/// draws across rows (common random numbers).
pub fn oracle_batch(
    spec: &ScmSpec,
    xs: &Matrix,
    domain: Domain,
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<OracleTable> {
    if mc_samples < MIN_MC_SAMPLES {
        return Err(TcmError::Contract(format!(
            "oracle needs at least {MIN_MC_SAMPLES} Monte-Carlo samples, got {mc_samples}"
        )));
    }
    if xs.cols() != spec.n {
        return Err(TcmError::shape(
            "transport_oracle",
            format!("x has {} columns, expected {}", xs.cols(), spec.n),
        ));
    }
    let mean = spec.mean(domain);
    let draws = Matrix::from_fn(mc_samples, spec.k, |_, j| {
        mean[j] + spec.sigma_u * rng.standard_normal()
    });
    let from_u = draws.matmul_t(&spec.w_u)?;
    let from_x = xs.matmul_t(&spec.w_x)?;
    let c = spec.c;
    let inv_tau = 1.0 / spec.tau;

    let rows: Vec<(Vector, Vector)> = (0..xs.rows())
        .into_par_iter()
        .map(|i| {
            let lx = from_x.row(i);
            let mut sum = vec![0.0; c];
            let mut sumsq = vec![0.0; c];
            let mut logits = vec![0.0; c];
            for m in 0..mc_samples {
                let lu = from_u.row(m);
                let mut max = f64::NEG_INFINITY;
                for j in 0..c {
                    logits[j] = (lu[j] + lx[j]) * inv_tau;
                    max = max.max(logits[j]);
                }
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    z += *l;
                }
                for j in 0..c {
                    let p = logits[j] / z;
                    sum[j] += p;
                    sumsq[j] += p * p;
                }
            }
            let m = mc_samples as f64;
            let probs: Vector = sum.iter().map(|s| s / m).collect();
            let stderr = probs
                .iter()
                .zip(&sumsq)
                .map(|(p, sq)| ((sq / m - p * p).max(0.0) / (m - 1.0)).sqrt())
                .collect();
            (probs, stderr)
        })
        .collect();

    let mut probs = Matrix::zeros(xs.rows(), c);
    let mut stderr = Matrix::zeros(xs.rows(), c);
    for (i, (p, s)) in rows.into_iter().enumerate() {
        let total: f64 = p.iter().sum();
        probs
            .row_mut(i)
            .iter_mut()
            .zip(&p)
            .for_each(|(o, v)| *o = v / total);
        stderr.row_mut(i).copy_from_slice(&s);
    }
    Ok(OracleTable { probs, stderr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{ScmConfig, ScmSpec};

    #[test]
    fn repeated_runs_agree_within_standard_error() {
        let spec = ScmSpec::generate(&ScmConfig::default(), &mut RngStream::new(4, 0)).unwrap();
        let x = spec.generate_x(&[0.5, 0.5, 0.5]).unwrap();
        let a = transport_oracle(&spec, &x, 100_000, &mut RngStream::new(1, 0)).unwrap();
        let b = transport_oracle(&spec, &x, 100_000, &mut RngStream::new(2, 0)).unwrap();
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..spec.c {
            let se = (a.stderr[j].powi(2) + b.stderr[j].powi(2)).sqrt();
            assert!(
                (a.probs[j] - b.probs[j]).abs() < 3.0 * se + 1e-12,
                "class {j}"
            );
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let spec = ScmSpec::generate(&ScmConfig::default(), &mut RngStream::new(4, 0)).unwrap();
        assert!(transport_oracle(&spec, &[0.0; 8], 999, &mut RngStream::new(1, 0)).is_err());
    }
}
