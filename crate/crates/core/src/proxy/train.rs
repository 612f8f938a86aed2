use serde::{Deserialize, Serialize};

use super::losses::{
    record_adapter, record_classification, record_proxy_loss, record_vae, regression_target,
};
use super::model::{ProxyConfig, ProxyModel, ProxyPrior, ZMode, W3_COLLAPSE};
use crate::dcm::{apply_dcms_batch, MechanismPair};
use crate::error::{Result, TcmError};
use crate::graddiff::{OptState, Tape, Var};
use crate::numerics::{Matrix, RngStream};
use crate::scm::{DataSource, Domain};

const MIN_PREFIXES: [&str; 4] = ["adapter.", "enc.", "dec.", "heads."];
const MAX_PREFIXES: [&str; 2] = ["pdisc_s.", "pdisc_t."];

/// Smallest variance allowed for the fitted proxy prior.
pub const PRIOR_VARIANCE_FLOOR: f64 = 1e-8;

/// One line of the stage-2 training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2LogEntry {
    pub iteration: u64,
    pub total: f64,
    pub lc: f64,
    pub ce: f64,
    pub mse: f64,
    pub lv: f64,
    pub recon: f64,
    pub kl: f64,
    pub lp: f64,
    pub w3_min_singular: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Stage2Run {
    pub model: ProxyModel,
    pub log: Vec<Stage2LogEntry>,
    pub warnings: Vec<String>,
}

struct Stage2Data {
    xs: Matrix,
    ys: Vec<usize>,
    ps: Vec<Matrix>,
    xt: Matrix,
    pt: Vec<Matrix>,
}

/// Records the adapter over a raw batch and its raw proxies.
fn adapted(
    tape: &mut Tape,
    model: &ProxyModel,
    x: &Matrix,
    proxies: &[Matrix],
) -> Result<(Var, Vec<Var>)> {
    let params = model.params();
    let xv = tape.constant(x.clone());
    let xa = record_adapter(tape, model, params, xv)?;
    let mut out = Vec::with_capacity(proxies.len());
    for p in proxies {
        let pv = tape.constant(p.clone());
        out.push(record_adapter(tape, model, params, pv)?);
    }
    Ok((xa, out))
}

fn stage2_step(
    model: &mut ProxyModel,
    alpha: f64,
    batch: &Stage2Data,
    eps: &Matrix,
    min_opt: &mut OptState,
    max_opt: &mut OptState,
) -> Result<Stage2LogEntry> {
    let mut tape = Tape::new();
    let (xs, ps) = adapted(&mut tape, model, &batch.xs, &batch.ps)?;
    let (xt, pt) = adapted(&mut tape, model, &batch.xt, &batch.pt)?;
    let vae = record_vae(&mut tape, model, model.params(), xs, eps)?;
    let z = match model.z_mode {
        ZMode::Sample => vae.z,
        ZMode::Mean => vae.mu,
    };
    let targets: Vec<Var> = ps
        .iter()
        .map(|&p| regression_target(&mut tape, model, p))
        .collect();
    let lc = record_classification(&mut tape, model.params(), z, xs, &batch.ys, &targets)?;
    let lp = record_proxy_loss(&mut tape, &model.pdisc, model.params(), xs, &ps, xt, &pt)?;
    let sum = tape.add(lc.total, vae.total)?;
    let weighted = tape.scale(lp, alpha);
    let total = tape.add(sum, weighted)?;

    let values = [
        ("total", total),
        ("classification", lc.total),
        ("vae", vae.total),
        ("proxy", lp),
    ];
    for (name, v) in values {
        let val = tape.scalar(v);
        if !val.is_finite() {
            return Err(TcmError::numeric(
                format!("stage-2 {name} loss"),
                format!("value is {val}"),
            ));
        }
    }
    let mut entry = Stage2LogEntry {
        iteration: 0,
        total: tape.scalar(total),
        lc: tape.scalar(lc.total),
        ce: tape.scalar(lc.ce),
        mse: tape.scalar(lc.mse),
        lv: tape.scalar(vae.total),
        recon: tape.scalar(vae.recon),
        kl: tape.scalar(vae.kl),
        lp: tape.scalar(lp),
        w3_min_singular: 0.0,
        warning: None,
    };
    let g = tape.backward(total)?.retain_prefixes(&MIN_PREFIXES);
    min_opt.step(model.params_mut(), &g)?;

    let mut tape = Tape::new();
    let (xs, ps) = adapted(&mut tape, model, &batch.xs, &batch.ps)?;
    let (xt, pt) = adapted(&mut tape, model, &batch.xt, &batch.pt)?;
    let lp = record_proxy_loss(&mut tape, &model.pdisc, model.params(), xs, &ps, xt, &pt)?;
    let neg = tape.scale(lp, -1.0);
    let g = tape.backward(neg)?.retain_prefixes(&MAX_PREFIXES);
    max_opt.step(model.params_mut(), &g)?;

    let s_min = model.heads()?.w3_min_singular()?;
    entry.w3_min_singular = s_min;
    if s_min < W3_COLLAPSE {
        entry.warning = Some(format!(
            "W3 rank collapse: smallest singular value {s_min:.3e}"
        ));
    }
    Ok(entry)
}

/// Alternating min/max training of adapter, VAE, heads and proxy
/// discriminators, followed by fitting the target proxy prior.
pub fn train_stage2(
    cfg: &ProxyConfig,
    classes: usize,
    pairs: &[MechanismPair],
    source: &dyn DataSource,
    target: &dyn DataSource,
    rng: &RngStream,
) -> Result<Stage2Run> {
    if source.domain() != Domain::Source || target.domain() != Domain::Target {
        return Err(TcmError::Contract(
            "train_stage2 needs a source and a target dataset".into(),
        ));
    }
    if source.dim() != target.dim() {
        return Err(TcmError::shape(
            "train_stage2",
            format!("source n = {}, target n = {}", source.dim(), target.dim()),
        ));
    }
    if source.is_empty() || target.is_empty() {
        return Err(TcmError::Contract(
            "train_stage2 needs non-empty datasets".into(),
        ));
    }
    let mut model = ProxyModel::new(cfg, source.dim(), classes, pairs.to_vec(), rng)?;
    let xs = source.features();
    let ys = source.labels()?;
    if let Some(bad) = ys.iter().find(|&&y| y >= classes) {
        return Err(TcmError::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let ps = apply_dcms_batch(pairs, xs, Domain::Source)?;
    let xt = target.features();
    let pt = apply_dcms_batch(pairs, xt, Domain::Target)?;

    let mut min_opt = OptState::new(cfg.optimizer);
    let mut max_opt = OptState::new(cfg.disc_optimizer);
    let mut batches = rng.split(21);
    let mut noise = rng.split(22);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut warnings = Vec::new();
    for it in 0..cfg.iterations {
        let is: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batches.below(xs.rows()))
            .collect();
        let itg: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batches.below(xt.rows()))
            .collect();
        let batch = Stage2Data {
            xs: xs.select_rows(&is),
            ys: is.iter().map(|&i| ys[i]).collect(),
            ps: ps.iter().map(|p| p.select_rows(&is)).collect(),
            xt: xt.select_rows(&itg),
            pt: pt.iter().map(|p| p.select_rows(&itg)).collect(),
        };
        let eps = noise.normal_matrix(cfg.batch_size, cfg.latent_dim, 1.0);
        let mut entry = stage2_step(
            &mut model,
            cfg.alpha,
            &batch,
            &eps,
            &mut min_opt,
            &mut max_opt,
        )
        .map_err(|e| e.in_context(format!("iteration {it}")))?;
        entry.iteration = it as u64;
        if let Some(w) = &entry.warning {
            if warnings.is_empty() {
                warnings.push(format!("iteration {it}: {w}"));
            }
        }
        log.push(entry);
    }
    let (prior, warn) = fit_proxy_prior(&model, target)?;
    warnings.extend(warn);
    model.prior = Some(prior);
    Ok(Stage2Run {
        model,
        log,
        warnings,
    })
}

/// Isotropic Gaussian over all `k·|target|` adapter-space proxies
/// `φ(M_i⁻¹(x_t))`; the variance is pooled over coordinates with the
/// population convention.
pub fn fit_proxy_prior(
    model: &ProxyModel,
    target: &dyn DataSource,
) -> Result<(ProxyPrior, Option<String>)> {
    let raw = apply_dcms_batch(&model.pairs, target.features(), Domain::Target)?;
    let adapted = raw
        .iter()
        .map(|p| model.adapt(p))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = adapted.iter().collect();
    fit_isotropic(&Matrix::vstack(&refs)?)
}

/// Mean and pooled population variance of the rows of `points`.
pub fn fit_isotropic(points: &Matrix) -> Result<(ProxyPrior, Option<String>)> {
    if points.rows() < 2 {
        return Err(TcmError::Contract(format!(
            "need at least 2 proxy vectors to fit a prior, got {}",
            points.rows()
        )));
    }
    let mean = points.col_means();
    let mut ss = 0.0;
    for i in 0..points.rows() {
        ss += points
            .row(i)
            .iter()
            .zip(&mean)
            .map(|(p, m)| (p - m) * (p - m))
            .sum::<f64>();
    }
    let variance = ss / (points.rows() * points.cols()) as f64;
    if !variance.is_finite() {
        return Err(TcmError::numeric("fit_proxy_prior", "non-finite variance"));
    }
    if variance < PRIOR_VARIANCE_FLOOR {
        let warn =
            format!("proxy prior variance {variance:.3e} clamped to {PRIOR_VARIANCE_FLOOR:e}");
        return Ok((
            ProxyPrior {
                mean,
                variance: PRIOR_VARIANCE_FLOOR,
            },
            Some(warn),
        ));
    }
    Ok((ProxyPrior { mean, variance }, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_examples() {
        let (p, w) = fit_isotropic(&Matrix::column(&[0.0, 2.0])).unwrap();
        assert_eq!(p.mean, vec![1.0]);
        assert_eq!(p.variance, 1.0);
        assert!(w.is_none());

        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let (p, w) = fit_isotropic(&same).unwrap();
        assert_eq!(p.mean, vec![1.0, 2.0]);
        assert_eq!(p.variance, PRIOR_VARIANCE_FLOOR);
        assert!(w.is_some());

        assert!(matches!(
            fit_isotropic(&Matrix::row_vector(&[1.0])),
            Err(TcmError::Contract(_))
        ));
    }
}
