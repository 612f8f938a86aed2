//! Finite-valued override of the SCM, used for exact transport arithmetic.

use super::dataset::Domain;
use crate::error::{Result, TcmError};
use crate::numerics::{RngStream, Vector};

/// `U` takes values `0..priors.len()`, `X` takes values `0..table.len()`,
/// and `table[x][u]` is `P(Y | x, u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteScm {
    pub prior_s: Vector,
    pub prior_t: Vector,
    pub table: Vec<Vec<Vector>>,
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|&v| (0.0..=1.0).contains(&v)) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12
}

impl DiscreteScm {
    pub fn new(prior_s: Vector, prior_t: Vector, table: Vec<Vec<Vector>>) -> Result<Self> {
        let nu = prior_s.len();
        if nu == 0
            || prior_t.len() != nu
            || !is_distribution(&prior_s)
            || !is_distribution(&prior_t)
        {
            return Err(TcmError::Spec(
                "factor priors must be distributions of equal length".into(),
            ));
        }
        if table.is_empty() {
            return Err(TcmError::Spec(
                "label table needs at least one x value".into(),
            ));
        }
        let c = table[0].first().map_or(0, Vec::len);
        for row in &table {
            if row.len() != nu || row.iter().any(|p| p.len() != c || !is_distribution(p)) {
                return Err(TcmError::Spec(
                    "label table rows must be distributions over the same classes".into(),
                ));
            }
        }
        Ok(Self {
            prior_s,
            prior_t,
            table,
        })
    }

    fn prior(&self, domain: Domain) -> &[f64] {
        match domain {
            Domain::Source => &self.prior_s,
            Domain::Target => &self.prior_t,
        }
    }

    /// Exact `sum_u P(Y | x, u) P(u | S = domain)` by enumeration.
    pub fn transport(&self, x: usize, domain: Domain) -> Result<Vector> {
        let rows = self.table.get(x).ok_or_else(|| {
            TcmError::shape("DiscreteScm::transport", format!("x = {x} out of range"))
        })?;
        let mut out = vec![0.0; rows[0].len()];
        for (p_u, p_y) in self.prior(domain).iter().zip(rows) {
            for (o, p) in out.iter_mut().zip(p_y) {
                *o += p_u * p;
            }
        }
        Ok(out)
    }

    /// Monte-Carlo estimate of [`DiscreteScm::transport`].
    pub fn transport_mc(
        &self,
        x: usize,
        domain: Domain,
        samples: usize,
        rng: &mut RngStream,
    ) -> Result<Vector> {
        if samples == 0 {
            return Err(TcmError::Contract("need at least one sample".into()));
        }
        let rows = self.table.get(x).ok_or_else(|| {
            TcmError::shape("DiscreteScm::transport_mc", format!("x = {x} out of range"))
        })?;
        let mut out = vec![0.0; rows[0].len()];
        for _ in 0..samples {
            let u = rng.categorical(self.prior(domain));
            out[rng.categorical(&rows[u])] += 1.0;
        }
        Ok(out.iter().map(|v| v / samples as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(p_u1_t: f64, p_y1: [f64; 2]) -> DiscreteScm {
        let table = vec![vec![
            vec![1.0 - p_y1[0], p_y1[0]],
            vec![1.0 - p_y1[1], p_y1[1]],
        ]];
        DiscreteScm::new(vec![0.5, 0.5], vec![1.0 - p_u1_t, p_u1_t], table).unwrap()
    }

    #[test]
    fn transport_arithmetic() {
        let p = binary(0.5, [0.0, 1.0])
            .transport(0, Domain::Target)
            .unwrap();
        assert!((p[1] - 0.5).abs() < 1e-15);
        let p = binary(0.3, [0.2, 0.8])
            .transport(0, Domain::Target)
            .unwrap();
        assert!((p[1] - 0.38).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_agrees_with_enumeration() {
        let scm = binary(0.3, [0.2, 0.8]);
        let mc = scm
            .transport_mc(0, Domain::Target, 200_000, &mut RngStream::new(0, 0))
            .unwrap();
        // binomial standard error at p = 0.38 is about 1.1e-3
        assert!((mc[1] - 0.38).abs() < 5e-3);
    }

    #[test]
    fn invalid_tables_rejected() {
        assert!(DiscreteScm::new(
            vec![0.5, 0.6],
            vec![0.5, 0.5],
            vec![vec![vec![1.0], vec![1.0]]]
        )
        .is_err());
        assert!(DiscreteScm::new(vec![1.0], vec![1.0], vec![vec![vec![0.4, 0.4]]]).is_err());
    }
}
