use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::dcm::{validate_optimizer, MechanismPair};
use crate::error::{Result, TcmError};
use crate::graddiff::{Activation, Init, MlpSpec, OptimizerKind, OutputActivation, ParamStore};
use crate::numerics::{pinv, svd, Matrix, RngStream, Vector, DEFAULT_RCOND};

pub const ADAPTER: &str = "adapter";
pub const ENCODER: &str = "enc";
pub const DECODER: &str = "dec";
pub const HEADS: &str = "heads";
pub const PDISC_SOURCE: &str = "pdisc_s";
pub const PDISC_TARGET: &str = "pdisc_t";

pub const W1: &str = "heads.w1";
pub const W2: &str = "heads.w2";
pub const B1: &str = "heads.b1";
pub const W3: &str = "heads.w3";
pub const W4: &str = "heads.w4";
pub const B2: &str = "heads.b2";

/// Smallest singular value of `W₃` below which a rank-collapse warning is logged.
pub const W3_COLLAPSE: f64 = 1e-8;

/// How the candidate proxies of one target sample are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Fitted isotropic Gaussian density, normalized over the candidates.
    Gaussian,
    Uniform,
}

/// Which `z` feeds the classification loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZMode {
    Sample,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub latent_dim: usize,
    pub vae_hidden: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub optimizer: OptimizerKind,
    pub disc_optimizer: OptimizerKind,
    pub disc_hidden: usize,
    pub weighting: Weighting,
    pub z_mode: ZMode,
    pub head_init_std: f64,
    /// Treat the reconstruction target `φ(x)` and the regression targets
    /// `φ(x̂_i)` as constants in the adapter update. Without this, shrinking
    /// the adapter towards zero minimizes both terms.
    pub detach_targets: bool,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            latent_dim: 3,
            vae_hidden: 16,
            iterations: 3000,
            batch_size: 64,
            alpha: 1.0,
            optimizer: OptimizerKind::sgd_nesterov_default(),
            disc_optimizer: OptimizerKind::sgd_nesterov_default(),
            disc_hidden: 16,
            weighting: Weighting::Gaussian,
            z_mode: ZMode::Sample,
            head_init_std: 0.1,
            detach_targets: true,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(TcmError::config("proxy.latent_dim", "must be positive"));
        }
        if let Some(n) = n {
            if self.latent_dim >= n {
                return Err(TcmError::config(
                    "proxy.latent_dim",
                    format!("must be below n = {n}"),
                ));
            }
        }
        if self.vae_hidden == 0 {
            return Err(TcmError::config("proxy.vae_hidden", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(TcmError::config("proxy.batch_size", "must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TcmError::config("proxy.alpha", "must be non-negative"));
        }
        if self.disc_hidden == 0 {
            return Err(TcmError::config("proxy.disc_hidden", "must be positive"));
        }
        if !(self.head_init_std > 0.0 && self.head_init_std.is_finite()) {
            return Err(TcmError::config("proxy.head_init_std", "must be positive"));
        }
        validate_optimizer("proxy.optimizer", &self.optimizer)?;
        validate_optimizer("proxy.disc_optimizer", &self.disc_optimizer)
    }
}

/// `f_y = W₁z + W₂x + b₁`, `f_x̂ = W₃z + W₄x + b₂`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHeads {
    pub w1: Matrix,
    pub w2: Matrix,
    pub b1: Vector,
    pub w3: Matrix,
    pub w4: Matrix,
    pub b2: Vector,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
}

impl LinearHeads {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w1.rows(), self.w2.cols(), self.w1.cols())
    }

    pub fn validate(&self) -> Result<()> {
        let (c, n, l) = self.dims();
        let ok = self.w2.shape() == (c, n)
            && self.b1.len() == c
            && self.w3.shape() == (n, l)
            && self.w4.shape() == (n, n)
            && self.b2.len() == n;
        if !ok {
            return Err(TcmError::shape(
                "LinearHeads",
                format!("inconsistent head shapes for c={c} n={n} l={l}"),
            ));
        }
        let finite = [&self.w1, &self.w2, &self.w3, &self.w4]
            .iter()
            .all(|m| m.is_finite())
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite());
        if !finite {
            return Err(TcmError::numeric(
                "LinearHeads",
                "non-finite head parameters",
            ));
        }
        Ok(())
    }

    pub fn w3_min_singular(&self) -> Result<f64> {
        Ok(*svd(&self.w3)?.s.last().unwrap_or(&0.0))
    }
}

/// `(logits, xhat_pred)` of the two heads.
pub fn heads_forward(heads: &LinearHeads, z: &[f64], x: &[f64]) -> Result<(Vector, Vector)> {
    let add3 = |a: Vector, b: Vector, c: &[f64]| {
        a.iter()
            .zip(&b)
            .zip(c)
            .map(|((p, q), r)| p + q + r)
            .collect()
    };
    let logits = add3(heads.w1.matvec(z)?, heads.w2.matvec(x)?, &heads.b1);
    let xhat = add3(heads.w3.matvec(z)?, heads.w4.matvec(x)?, &heads.b2);
    Ok((logits, xhat))
}

/// `h_y(x, x̂) = c₀ + G x̂ + H x` with `G = W₁W₃⁺`, `c₀ = b₁ - G b₂`,
/// `H = W₂ - G W₄`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyOperator {
    pub c0: Vector,
    pub g: Matrix,
    pub h: Matrix,
}

impl HyOperator {
    pub fn from_heads(heads: &LinearHeads) -> Result<Self> {
        heads.validate()?;
        let g = heads.w1.matmul(&pinv(&heads.w3, DEFAULT_RCOND)?)?;
        let gb = g.matvec(&heads.b2)?;
        let c0 = heads.b1.iter().zip(&gb).map(|(p, q)| p - q).collect();
        let h = heads.w2.sub(&g.matmul(&heads.w4)?)?;
        Ok(Self { c0, g, h })
    }

    pub fn eval(&self, x: &[f64], xhat: &[f64]) -> Result<Vector> {
        let gx = self.g.matvec(xhat)?;
        let hx = self.h.matvec(x)?;
        Ok(self
            .c0
            .iter()
            .zip(&gx)
            .zip(&hx)
            .map(|((a, b), c)| a + b + c)
            .collect())
    }

    /// Row-wise evaluation on batches.
    pub fn eval_batch(&self, x: &Matrix, xhat: &Matrix) -> Result<Matrix> {
        xhat.matmul_t(&self.g)?
            .add(&x.matmul_t(&self.h)?)?
            .add_row(&self.c0)
    }
}

/// Direct evaluation of the closed-form proxy function.
pub fn solve_h_y(heads: &LinearHeads, x: &[f64], xhat: &[f64]) -> Result<Vector> {
    HyOperator::from_heads(heads)?.eval(x, xhat)
}

/// Isotropic Gaussian fitted to target-domain proxies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyPrior {
    pub mean: Vector,
    pub variance: f64,
}

/// Everything inference needs: adapter, VAE, heads, proxy discriminators,
/// the stage-1 pairs and the fitted prior. All trainable values live in
/// `params`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProxyModel {
    pub n: usize,
    pub l: usize,
    pub c: usize,
    pub adapter: MlpSpec,
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
    pub pdisc: MlpSpec,
    params: ParamStore,
    pub pairs: Vec<MechanismPair>,
    pub prior: Option<ProxyPrior>,
    pub weighting: Weighting,
    pub z_mode: ZMode,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub detach_targets: bool,
    #[serde(skip)]
    hy_cache: OnceLock<HyOperator>,
}

impl PartialEq for ProxyModel {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.l == other.l
            && self.c == other.c
            && self.adapter == other.adapter
            && self.encoder == other.encoder
            && self.decoder == other.decoder
            && self.pdisc == other.pdisc
            && self.params.same_values(&other.params)
            && self.pairs == other.pairs
            && self.prior == other.prior
            && self.weighting == other.weighting
            && self.z_mode == other.z_mode
    }
}

impl ProxyModel {
    pub fn new(
        cfg: &ProxyConfig,
        n: usize,
        c: usize,
        pairs: Vec<MechanismPair>,
        rng: &RngStream,
    ) -> Result<Self> {
        cfg.validate(Some(n))?;
        if pairs.is_empty() {
            return Err(TcmError::Contract(
                "a proxy model needs at least one mechanism pair".into(),
            ));
        }
        if pairs.iter().any(|p| p.dim() != n) {
            return Err(TcmError::shape(
                "ProxyModel::new",
                format!("mechanism pairs do not act on n = {n}"),
            ));
        }
        let l = cfg.latent_dim;
        let adapter = MlpSpec::affine(n, n);
        let encoder = MlpSpec::new(
            vec![n, cfg.vae_hidden, 2 * l],
            Activation::Tanh,
            OutputActivation::Linear,
        )?;
        let decoder = MlpSpec::new(
            vec![l, cfg.vae_hidden, n],
            Activation::Tanh,
            OutputActivation::Linear,
        )?;
        let pdisc = MlpSpec::new(
            vec![n, cfg.disc_hidden, 1],
            Activation::LeakyRelu(0.2),
            OutputActivation::Sigmoid,
        )?;

        let mut params = ParamStore::new();
        adapter.init(
            &mut params,
            ADAPTER,
            Init::NearIdentity { jitter: 0.0 },
            &mut rng.split(10),
        )?;
        encoder.init(&mut params, ENCODER, Init::Xavier, &mut rng.split(11))?;
        decoder.init(&mut params, DECODER, Init::Xavier, &mut rng.split(12))?;
        pdisc.init(&mut params, PDISC_SOURCE, Init::Xavier, &mut rng.split(13))?;
        pdisc.init(&mut params, PDISC_TARGET, Init::Xavier, &mut rng.split(14))?;
        let mut hr = rng.split(15);
        let s = cfg.head_init_std;
        params.register(W1, hr.normal_matrix(c, l, s))?;
        params.register(W2, hr.normal_matrix(c, n, s))?;
        params.register(B1, Matrix::zeros(1, c))?;
        params.register(W3, hr.normal_matrix(n, l, s))?;
        params.register(W4, hr.normal_matrix(n, n, s))?;
        params.register(B2, Matrix::zeros(1, n))?;

        Ok(Self {
            n,
            l,
            c,
            adapter,
            encoder,
            decoder,
            pdisc,
            params,
            pairs,
            prior: None,
            weighting: cfg.weighting,
            z_mode: cfg.z_mode,
            sigma1_sq: 1.0,
            sigma2_sq: 1.0,
            detach_targets: cfg.detach_targets,
            hy_cache: OnceLock::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access; invalidates the cached proxy-function operator.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.hy_cache = OnceLock::new();
        &mut self.params
    }

    pub fn heads(&self) -> Result<LinearHeads> {
        let p = &self.params;
        Ok(LinearHeads {
            w1: p.get(W1)?.clone(),
            w2: p.get(W2)?.clone(),
            b1: p.get(B1)?.data().to_vec(),
            w3: p.get(W3)?.clone(),
            w4: p.get(W4)?.clone(),
            b2: p.get(B2)?.data().to_vec(),
            sigma1_sq: self.sigma1_sq,
            sigma2_sq: self.sigma2_sq,
        })
    }

    /// Cached `h_y` operator for the current heads.
    pub fn hy(&self) -> Result<&HyOperator> {
        if let Some(op) = self.hy_cache.get() {
            return Ok(op);
        }
        let op = HyOperator::from_heads(&self.heads()?)?;
        Ok(self.hy_cache.get_or_init(|| op))
    }

    /// `φ_β(x)` row-wise.
    pub fn adapt(&self, x: &Matrix) -> Result<Matrix> {
        self.adapter.forward(&self.params, ADAPTER, x)
    }

    /// Encoder mean and log-variance for adapted features.
    pub fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let out = self.encoder.forward(&self.params, ENCODER, x)?;
        let l = self.l;
        let mu = Matrix::from_fn(out.rows(), l, |i, j| out.get(i, j));
        let lv = Matrix::from_fn(out.rows(), l, |i, j| out.get(i, l + j));
        Ok((mu, lv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heads(c: usize, n: usize, l: usize, seed: u64) -> LinearHeads {
        let mut r = RngStream::new(seed, 0);
        LinearHeads {
            w1: r.normal_matrix(c, l, 1.0),
            w2: r.normal_matrix(c, n, 1.0),
            b1: r.normal_vec(c, 1.0),
            w3: r.normal_matrix(n, l, 1.0),
            w4: r.normal_matrix(n, n, 1.0),
            b2: r.normal_vec(n, 1.0),
            sigma1_sq: 1.0,
            sigma2_sq: 1.0,
        }
    }

    #[test]
    fn heads_forward_cases() {
        let mut h = heads(3, 3, 2, 1);
        let (z, x) = ([0.3, -0.2], [1.0, 2.0, -1.0]);
        let (logits, xhat) = heads_forward(&h, &z, &x).unwrap();
        for i in 0..3 {
            let e = h.b1[i]
                + (0..2).map(|j| h.w1.get(i, j) * z[j]).sum::<f64>()
                + (0..3).map(|j| h.w2.get(i, j) * x[j]).sum::<f64>();
            assert!((logits[i] - e).abs() < 1e-14);
            let e = h.b2[i]
                + (0..2).map(|j| h.w3.get(i, j) * z[j]).sum::<f64>()
                + (0..3).map(|j| h.w4.get(i, j) * x[j]).sum::<f64>();
            assert!((xhat[i] - e).abs() < 1e-14);
        }
        h.w1 = Matrix::zeros(3, 2);
        h.w2 = Matrix::identity(3);
        h.b1 = vec![0.0; 3];
        assert_eq!(heads_forward(&h, &z, &x).unwrap().0, x.to_vec());
        for m in [&mut h.w1, &mut h.w2, &mut h.w3, &mut h.w4] {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let (l0, x0) = heads_forward(&h, &z, &x).unwrap();
        assert_eq!((l0, x0), (h.b1.clone(), h.b2.clone()));
    }

    #[test]
    fn h_y_degenerate_forms() {
        let mut h = heads(3, 4, 2, 2);
        let (x, xh) = ([0.5, -1.0, 0.2, 0.9], [1.5, 0.3, -0.4, 2.0]);
        h.w1 = Matrix::zeros(3, 2);
        let got = solve_h_y(&h, &x, &xh).unwrap();
        let w2x = h.w2.matvec(&x).unwrap();
        for i in 0..3 {
            assert!((got[i] - h.b1[i] - w2x[i]).abs() < 1e-12);
        }

        let mut h = heads(3, 4, 4, 3);
        h.w3 = Matrix::identity(4);
        h.w4 = Matrix::zeros(4, 4);
        h.b2 = vec![0.0; 4];
        let got = solve_h_y(&h, &x, &xh).unwrap();
        let w1 = h.w1.matvec(&xh).unwrap();
        let w2 = h.w2.matvec(&x).unwrap();
        for i in 0..3 {
            assert!((got[i] - (h.b1[i] + w1[i] + w2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn plugging_the_mean_recovers_f_y() {
        for seed in 0..20 {
            let h = heads(3, 8, 3, seed);
            let mut r = RngStream::new(seed, 1);
            let (z, x) = (r.normal_vec(3, 1.0), r.normal_vec(8, 1.0));
            let (fy, fx) = heads_forward(&h, &z, &x).unwrap();
            let hy = solve_h_y(&h, &x, &fx).unwrap();
            for i in 0..3 {
                assert!((hy[i] - fy[i]).abs() < 1e-10 * (1.0 + fy[i].abs()));
            }
        }
    }
}
