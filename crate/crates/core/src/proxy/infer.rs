use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{ProxyModel, ProxyPrior, Weighting};
use crate::dcm::apply_dcms_batch;
use crate::error::{Result, TcmError};
use crate::numerics::{argmax, gauss_logpdf, softmax, Matrix, Vector};
use crate::scm::Domain;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub logits: Vector,
    pub probs: Vector,
    pub class: usize,
    pub weights: Vector,
}

/// Normalized candidate weights. Gaussian mode uses the fitted prior density
/// at each candidate, normalized in log space.
pub fn proxy_weights(prior: &ProxyPrior, proxies: &[&[f64]], mode: Weighting) -> Result<Vector> {
    if proxies.is_empty() {
        return Err(TcmError::Contract("no candidate proxies".into()));
    }
    let k = proxies.len();
    match mode {
        Weighting::Uniform => Ok(vec![1.0 / k as f64; k]),
        Weighting::Gaussian => {
            let logs = proxies
                .iter()
                .map(|p| gauss_logpdf(p, &prior.mean, prior.variance))
                .collect::<Result<Vec<_>>>()?;
            Ok(softmax(&logs))
        }
    }
}

/// Combines per-candidate `h_y` logits with the given weights.
pub fn combine(hy: &[Vector], weights: &[f64]) -> Result<Inference> {
    if hy.is_empty() || hy.len() != weights.len() {
        return Err(TcmError::shape(
            "combine",
            format!("{} logit vectors, {} weights", hy.len(), weights.len()),
        ));
    }
    let c = hy[0].len();
    let mut logits = vec![0.0; c];
    for (h, w) in hy.iter().zip(weights) {
        logits.iter_mut().zip(h).for_each(|(l, v)| *l += w * v);
    }
    let probs = softmax(&logits);
    Ok(Inference {
        class: argmax(&probs),
        logits,
        probs,
        weights: weights.to_vec(),
    })
}

/// Transported prediction for every row of raw target features.
pub fn infer_batch(model: &ProxyModel, x_t: &Matrix) -> Result<Vec<Inference>> {
    let prior = model
        .prior
        .as_ref()
        .ok_or_else(|| TcmError::Contract("proxy prior has not been fitted".into()))?;
    if x_t.cols() != model.n {
        return Err(TcmError::shape(
            "infer",
            format!("data has {} columns, model expects {}", x_t.cols(), model.n),
        ));
    }
    if x_t.rows() == 0 {
        return Ok(vec![]);
    }
    let hy = model.hy()?;
    let x = model.adapt(x_t)?;
    let proxies = apply_dcms_batch(&model.pairs, x_t, Domain::Target)?
        .iter()
        .map(|p| model.adapt(p))
        .collect::<Result<Vec<_>>>()?;
    let per_proxy = proxies
        .iter()
        .map(|p| hy.eval_batch(&x, p))
        .collect::<Result<Vec<_>>>()?;
    (0..x_t.rows())
        .into_par_iter()
        .map(|r| {
            let cands: Vec<&[f64]> = proxies.iter().map(|p| p.row(r)).collect();
            let w = proxy_weights(prior, &cands, model.weighting)?;
            let h: Vec<Vector> = per_proxy.iter().map(|m| m.row(r).to_vec()).collect();
            combine(&h, &w)
        })
        .collect()
}

pub fn infer(model: &ProxyModel, x_t: &[f64]) -> Result<Inference> {
    Ok(infer_batch(model, &Matrix::row_vector(x_t))?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_candidate_has_unit_weight() {
        let prior = ProxyPrior {
            mean: vec![0.0, 0.0],
            variance: 1.0,
        };
        let w = proxy_weights(&prior, &[&[3.0, -1.0]], Weighting::Gaussian).unwrap();
        assert_eq!(w, vec![1.0]);
        let out = combine(&[vec![0.2, 0.9]], &w).unwrap();
        assert_eq!(out.logits, vec![0.2, 0.9]);
        assert_eq!(out.class, 1);
    }

    #[test]
    fn equal_density_gives_the_mean() {
        let prior = ProxyPrior {
            mean: vec![0.0],
            variance: 2.0,
        };
        let w = proxy_weights(&prior, &[&[1.0], &[-1.0]], Weighting::Gaussian).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let out = combine(&[vec![1.0, 3.0], vec![2.0, -1.0]], &w).unwrap();
        assert_eq!(out.logits, vec![1.5, 1.0]);
    }

    #[test]
    fn constant_shift_keeps_the_argmax() {
        let w = [0.2, 0.5, 0.3];
        let h = vec![
            vec![0.1, 0.4, -0.2],
            vec![1.0, 0.3, 0.2],
            vec![-0.5, 0.0, 0.9],
        ];
        let a = combine(&h, &w).unwrap();
        let shift = [5.0, -2.0, 7.5];
        let hs: Vec<Vector> = h
            .iter()
            .map(|v| v.iter().zip(&shift).map(|(p, q)| p + q).collect())
            .collect();
        let b = combine(&hs, &w).unwrap();
        for j in 0..3 {
            assert!((b.logits[j] - a.logits[j] - shift[j]).abs() < 1e-12);
        }
        let uniform = combine(&h, &[1.0 / 3.0; 3]).unwrap();
        let hu: Vec<Vector> = h
            .iter()
            .map(|v| v.iter().map(|x| x + 4.0).collect())
            .collect();
        assert_eq!(combine(&hu, &[1.0 / 3.0; 3]).unwrap().class, uniform.class);
    }
}
