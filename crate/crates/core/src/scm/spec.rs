use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TcmError};
use crate::numerics::{pinv, softmax, svd, Matrix, RngStream, Vector, DEFAULT_RCOND};

/// Smallest singular value of `A` accepted as full column rank.
pub const MIN_GENERATOR_SINGULAR_VALUE: f64 = 1e-6;

/// Parameters for drawing a random benchmark SCM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScmConfig {
    pub k: usize,
    pub n: usize,
    pub c: usize,
    pub sigma_u: f64,
    pub tau: f64,
    /// Per-factor shift `mu_t - mu_s`.
    pub shifts: Vec<f64>,
    /// Source factor means; zeros when absent.
    pub source_mean: Option<Vec<f64>>,
    pub obs_noise: f64,
    pub max_condition: f64,
    pub source_samples: usize,
    pub target_samples: usize,
    pub label_weight_u: f64,
    pub label_weight_x: f64,
    pub offset_std: f64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            k: 3,
            n: 8,
            c: 3,
            sigma_u: 0.3,
            tau: 0.5,
            shifts: vec![1.5, -1.0, 0.8],
            source_mean: None,
            obs_noise: 0.01,
            max_condition: 5.0,
            source_samples: 2000,
            target_samples: 2000,
            label_weight_u: 1.0,
            label_weight_x: 0.3,
            offset_std: 0.5,
        }
    }
}

impl ScmConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("scm.{k}");
        if self.k == 0 {
            return Err(TcmError::config(key("k"), "must be at least 1"));
        }
        if self.n < self.k {
            return Err(TcmError::config(
                key("n"),
                format!("must be >= k = {} for a full-rank generator", self.k),
            ));
        }
        if self.c < 2 {
            return Err(TcmError::config(key("c"), "need at least two classes"));
        }
        if !(self.sigma_u > 0.0 && self.sigma_u.is_finite()) {
            return Err(TcmError::config(
                key("sigma_u"),
                format!("must be positive, got {}", self.sigma_u),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(TcmError::config(
                key("tau"),
                format!("must be positive, got {}", self.tau),
            ));
        }
        if self.shifts.len() != self.k || self.shifts.iter().any(|v| !v.is_finite()) {
            return Err(TcmError::config(
                key("shifts"),
                format!("need {} finite values", self.k),
            ));
        }
        if let Some(m) = &self.source_mean {
            if m.len() != self.k || m.iter().any(|v| !v.is_finite()) {
                return Err(TcmError::config(
                    key("source_mean"),
                    format!("need {} finite values", self.k),
                ));
            }
        }
        if !(self.obs_noise >= 0.0 && self.obs_noise.is_finite()) {
            return Err(TcmError::config(key("obs_noise"), "must be non-negative"));
        }
        if !(self.max_condition >= 1.0) {
            return Err(TcmError::config(key("max_condition"), "must be >= 1"));
        }
        if self.source_samples == 0 {
            return Err(TcmError::config(key("source_samples"), "must be positive"));
        }
        if self.target_samples == 0 {
            return Err(TcmError::config(key("target_samples"), "must be positive"));
        }
        for (name, v) in [
            ("label_weight_u", self.label_weight_u),
            ("label_weight_x", self.label_weight_x),
            ("offset_std", self.offset_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TcmError::config(key(name), "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// A fully known linear-Gaussian selection-diagram SCM.
///
/// `u ~ N(mu_domain, sigma_u² I)`, `x = A u + b + eps`,
/// `y ~ softmax((W_u u + W_x x) / tau)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScmSpec {
    pub k: usize,
    pub n: usize,
    pub c: usize,
    pub a: Matrix,
    pub b: Vector,
    pub w_u: Matrix,
    pub w_x: Matrix,
    pub mu_s: Vector,
    pub mu_t: Vector,
    pub sigma_u: f64,
    pub tau: f64,
    pub obs_noise: f64,
    #[serde(skip)]
    a_pinv: OnceLock<Matrix>,
}

impl PartialEq for ScmSpec {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.n == other.n
            && self.c == other.c
            && self.a == other.a
            && self.b == other.b
            && self.w_u == other.w_u
            && self.w_x == other.w_x
            && self.mu_s == other.mu_s
            && self.mu_t == other.mu_t
            && self.sigma_u == other.sigma_u
            && self.tau == other.tau
            && self.obs_noise == other.obs_noise
    }
}

#[allow(clippy::too_many_arguments)]
impl ScmSpec {
    pub fn from_parts(
        a: Matrix,
        b: Vector,
        w_u: Matrix,
        w_x: Matrix,
        mu_s: Vector,
        mu_t: Vector,
        sigma_u: f64,
        tau: f64,
        obs_noise: f64,
    ) -> Result<Self> {
        let spec = ScmSpec {
            k: a.cols(),
            n: a.rows(),
            c: w_u.rows(),
            a,
            b,
            w_u,
            w_x,
            mu_s,
            mu_t,
            sigma_u,
            tau,
            obs_noise,
            a_pinv: OnceLock::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Draws a random SCM whose generator has condition number at most
    /// `cfg.max_condition`.
    pub fn generate(cfg: &ScmConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let raw = rng.normal_matrix(cfg.n, cfg.k, 1.0);
        let dec = svd(&raw)?;
        let floor = dec.s[0] / cfg.max_condition;
        let s: Vec<f64> = dec.s.iter().map(|&v| v.max(floor)).collect();
        let a = dec.u.matmul(&Matrix::diag(&s))?.matmul_t(&dec.v)?;
        let b = rng.normal_vec(cfg.n, cfg.offset_std);
        let w_u = rng.normal_matrix(cfg.c, cfg.k, cfg.label_weight_u);
        let w_x = rng.normal_matrix(cfg.c, cfg.n, cfg.label_weight_x);
        let mu_s = cfg.source_mean.clone().unwrap_or_else(|| vec![0.0; cfg.k]);
        let mu_t = mu_s.iter().zip(&cfg.shifts).map(|(m, d)| m + d).collect();
        Self::from_parts(
            a,
            b,
            w_u,
            w_x,
            mu_s,
            mu_t,
            cfg.sigma_u,
            cfg.tau,
            cfg.obs_noise,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TcmError::Spec(m));
        if self.k == 0 || self.n == 0 || self.c == 0 {
            return bad(format!(
                "empty dimensions k={} n={} c={}",
                self.k, self.n, self.c
            ));
        }
        if self.a.shape() != (self.n, self.k) {
            return bad(format!(
                "A is {:?}, expected ({}, {})",
                self.a.shape(),
                self.n,
                self.k
            ));
        }
        if self.b.len() != self.n {
            return bad(format!(
                "b has length {}, expected {}",
                self.b.len(),
                self.n
            ));
        }
        if self.w_u.shape() != (self.c, self.k) || self.w_x.shape() != (self.c, self.n) {
            return bad(format!(
                "label weights {:?} / {:?} inconsistent with c={} k={} n={}",
                self.w_u.shape(),
                self.w_x.shape(),
                self.c,
                self.k,
                self.n
            ));
        }
        if self.mu_s.len() != self.k || self.mu_t.len() != self.k {
            return bad("factor means must have length k".into());
        }
        let finite = self.a.is_finite()
            && self.w_u.is_finite()
            && self.w_x.is_finite()
            && self
                .b
                .iter()
                .chain(&self.mu_s)
                .chain(&self.mu_t)
                .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite parameters".into());
        }
        if !(self.sigma_u > 0.0) {
            return bad(format!("sigma_u must be positive, got {}", self.sigma_u));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.obs_noise >= 0.0) {
            return bad(format!(
                "obs_noise must be non-negative, got {}",
                self.obs_noise
            ));
        }
        if self.n < self.k {
            return bad(format!(
                "n={} < k={}: generator cannot have full column rank",
                self.n, self.k
            ));
        }
        let s_min = *svd(&self.a)?.s.last().unwrap();
        if s_min <= MIN_GENERATOR_SINGULAR_VALUE {
            return bad(format!(
                "generator is rank deficient (smallest singular value {s_min:.3e})"
            ));
        }
        Ok(())
    }

    pub fn mean(&self, domain: super::Domain) -> &[f64] {
        match domain {
            super::Domain::Source => &self.mu_s,
            super::Domain::Target => &self.mu_t,
        }
    }

    /// `mu_t - mu_s`.
    pub fn shift(&self) -> Vector {
        self.mu_t
            .iter()
            .zip(&self.mu_s)
            .map(|(t, s)| t - s)
            .collect()
    }

    /// `A⁺`, computed once.
    pub fn a_pinv(&self) -> &Matrix {
        self.a_pinv.get_or_init(|| {
            pinv(&self.a, DEFAULT_RCOND).expect("generator validated at construction")
        })
    }

    /// `A u + b` without observation noise.
    pub fn generate_x(&self, u: &[f64]) -> Result<Vector> {
        let au = self.a.matvec(u)?;
        Ok(au.iter().zip(&self.b).map(|(p, q)| p + q).collect())
    }

    /// `A⁺ (x - b)`.
    pub fn abduct(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.n {
            return Err(TcmError::shape(
                "abduct",
                format!("x has {} entries, expected {}", x.len(), self.n),
            ));
        }
        let centered: Vec<f64> = x.iter().zip(&self.b).map(|(p, q)| p - q).collect();
        self.a_pinv().matvec(&centered)
    }

    /// Logits `(W_u u + W_x x) / tau`.
    pub fn label_logits(&self, x: &[f64], u: &[f64]) -> Result<Vector> {
        if x.len() != self.n || u.len() != self.k {
            return Err(TcmError::shape(
                "label_posterior",
                format!(
                    "x has {} entries (n={}), u has {} (k={})",
                    x.len(),
                    self.n,
                    u.len(),
                    self.k
                ),
            ));
        }
        let lu = self.w_u.matvec(u)?;
        let lx = self.w_x.matvec(x)?;
        Ok(lu
            .iter()
            .zip(&lx)
            .map(|(p, q)| (p + q) / self.tau)
            .collect())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// `P(Y | x, u)`.
pub fn label_posterior(spec: &ScmSpec, x: &[f64], u: &[f64]) -> Result<Vector> {
    Ok(softmax(&spec.label_logits(x, u)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_spec_respects_condition_clamp() {
        let spec = ScmSpec::generate(&ScmConfig::default(), &mut RngStream::new(3, 0)).unwrap();
        let s = svd(&spec.a).unwrap().s;
        assert!(s[0] / s[s.len() - 1] <= 5.0 + 1e-9);
        assert_eq!(spec.shift(), vec![1.5, -1.0, 0.8]);
    }

    #[test]
    fn rank_deficient_generator_rejected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let err = ScmSpec::from_parts(
            a,
            vec![0.0; 3],
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 3),
            vec![0.0; 2],
            vec![1.0; 2],
            0.3,
            0.5,
            0.0,
        )
        .unwrap_err();
        assert!(matches!(err, TcmError::Spec(_)));
    }

    #[test]
    fn label_posterior_cases() {
        let mut spec = ScmSpec::generate(&ScmConfig::default(), &mut RngStream::new(1, 0)).unwrap();
        let x = vec![0.3; 8];
        let u = vec![0.5, -0.2, 1.0];
        let p = label_posterior(&spec, &x, &u).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // independent recomputation
        let mut logits = [0.0; 3];
        for (cls, l) in logits.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..3 {
                s += spec.w_u.get(cls, j) * u[j];
            }
            for j in 0..8 {
                s += spec.w_x.get(cls, j) * x[j];
            }
            *l = (s / spec.tau).exp();
        }
        let z: f64 = logits.iter().sum();
        for cls in 0..3 {
            assert!((p[cls] - logits[cls] / z).abs() < 1e-14);
        }

        spec.tau = 1e-4;
        let sharp = label_posterior(&spec, &x, &u).unwrap();
        assert_eq!(sharp.iter().filter(|&&v| v > 1.0 - 1e-9).count(), 1);

        spec.w_u = Matrix::zeros(3, 3);
        spec.w_x = Matrix::zeros(3, 8);
        let flat = label_posterior(&spec, &x, &u).unwrap();
        assert!(flat.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(label_posterior(&spec, &x[..3], &u).is_err());
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = ScmConfig {
            sigma_u: -1.0,
            ..ScmConfig::default()
        };
        match cfg.validate() {
            Err(TcmError::Config { key, .. }) => assert_eq!(key, "scm.sigma_u"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let cfg = ScmConfig::default();
        let a = ScmSpec::generate(&cfg, &mut RngStream::new(5, 0)).unwrap();
        let b = ScmSpec::generate(&cfg, &mut RngStream::new(5, 0)).unwrap();
        let c = ScmSpec::generate(&cfg, &mut RngStream::new(6, 0)).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
