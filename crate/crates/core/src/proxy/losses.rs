use super::model::{
    ProxyModel, ZMode, ADAPTER, B1, B2, DECODER, ENCODER, PDISC_SOURCE, PDISC_TARGET, W1, W2, W3,
    W4,
};
use crate::dcm::PROB_CLAMP;
use crate::error::{Result, TcmError};
use crate::graddiff::{MlpSpec, ParamStore, Tape, Var};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug)]
pub struct VaeVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub mu: Var,
    pub z: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassificationVars {
    pub total: Var,
    pub ce: Var,
    pub mse: Var,
}

/// `φ_β(x)`.
pub fn record_adapter(
    tape: &mut Tape,
    model: &ProxyModel,
    params: &ParamStore,
    x: Var,
) -> Result<Var> {
    model.adapter.record(params, ADAPTER, tape, x)
}

/// Records `recon + kl` with one reparameterized draw `z = μ + σ ⊙ eps`;
/// `eps` is a constant. The reconstruction target is detached when the
/// model says so. Both terms are per-sample sums averaged over the
/// batch.
pub fn record_vae(
    tape: &mut Tape,
    model: &ProxyModel,
    params: &ParamStore,
    x: Var,
    eps: &Matrix,
) -> Result<VaeVars> {
    let rows = tape.value(x).rows();
    if eps.shape() != (rows, model.l) {
        return Err(TcmError::shape(
            "vae_loss",
            format!("noise is {:?}, expected ({rows}, {})", eps.shape(), model.l),
        ));
    }
    let enc = model.encoder.record(params, ENCODER, tape, x)?;
    let mu = tape.slice_cols(enc, 0, model.l)?;
    let lv = tape.slice_cols(enc, model.l, 2 * model.l)?;
    if !tape.value(lv).is_finite() {
        return Err(TcmError::numeric(
            "vae log-variance",
            "non-finite encoder output",
        ));
    }
    let half = tape.scale(lv, 0.5);
    let sd = tape.exp(half);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(sd, e)?;
    let z = tape.add(mu, noise)?;

    let dec = model.decoder.record(params, DECODER, tape, z)?;
    let target = if model.detach_targets {
        tape.constant(tape.value(x).clone())
    } else {
        x
    };
    let diff = tape.sub(target, dec)?;
    let sq = tape.square(diff);
    let per_row = tape.row_sum(sq);
    let recon = tape.mean(per_row);

    // 0.5 Σ (μ² + e^lv - 1 - lv)
    let mu2 = tape.square(mu);
    let var = tape.exp(lv);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, lv)?;
    let c = tape.offset(b, -1.0);
    let kl_rows = tape.row_sum(c);
    let kl_mean = tape.mean(kl_rows);
    let kl = tape.scale(kl_mean, 0.5);

    let total = tape.add(recon, kl)?;
    Ok(VaeVars {
        total,
        recon,
        kl,
        mu,
        z,
    })
}

/// Records `CE(softmax(f_y), y) + (1/k) Σ_i mean ‖f_x̂ - x̂_i‖²`.
pub fn record_classification(
    tape: &mut Tape,
    params: &ParamStore,
    z: Var,
    x: Var,
    labels: &[usize],
    proxies: &[Var],
) -> Result<ClassificationVars> {
    if proxies.is_empty() {
        return Err(TcmError::Contract(
            "classification loss needs at least one proxy per sample".into(),
        ));
    }
    let w1 = tape.param(params, W1)?;
    let w2 = tape.param(params, W2)?;
    let b1 = tape.param(params, B1)?;
    let w3 = tape.param(params, W3)?;
    let w4 = tape.param(params, W4)?;
    let b2 = tape.param(params, B2)?;

    let a = tape.matmul_t(z, w1)?;
    let b = tape.matmul_t(x, w2)?;
    let s = tape.add(a, b)?;
    let logits = tape.add_row(s, b1)?;
    let ls = tape.log_softmax(logits);
    let picked = tape.gather(ls, labels)?;
    let m = tape.mean(picked);
    let ce = tape.scale(m, -1.0);

    let a = tape.matmul_t(z, w3)?;
    let b = tape.matmul_t(x, w4)?;
    let s = tape.add(a, b)?;
    let pred = tape.add_row(s, b2)?;
    let mut mse_sum: Option<Var> = None;
    for &p in proxies {
        let d = tape.sub(pred, p)?;
        let sq = tape.square(d);
        let rows = tape.row_sum(sq);
        let m = tape.mean(rows);
        mse_sum = Some(match mse_sum {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    let mse = tape.scale(
        mse_sum.expect("at least one proxy"),
        1.0 / proxies.len() as f64,
    );
    let total = tape.add(ce, mse)?;
    Ok(ClassificationVars { total, ce, mse })
}

/// The `f_x̂` regression target for an adapted proxy.
pub fn regression_target(tape: &mut Tape, model: &ProxyModel, adapted: Var) -> Var {
    if model.detach_targets {
        tape.constant(tape.value(adapted).clone())
    } else {
        adapted
    }
}

fn log_clamped(tape: &mut Tape, p: Var, flip: bool) -> Var {
    let c = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = if flip {
        let neg = tape.scale(c, -1.0);
        tape.offset(neg, 1.0)
    } else {
        c
    };
    let l = tape.ln(q);
    tape.mean(l)
}

/// Records `ln D_s(x_s) + (1/k)Σ ln(1 - D_t(x̂_s)) + ln D_t(x_t) + (1/k)Σ ln(1 - D_s(x̂_t))`,
/// each term a batch mean. All inputs are adapter features.
pub fn record_proxy_loss(
    tape: &mut Tape,
    pdisc: &MlpSpec,
    params: &ParamStore,
    xs: Var,
    proxies_s: &[Var],
    xt: Var,
    proxies_t: &[Var],
) -> Result<Var> {
    if proxies_s.is_empty() || proxies_s.len() != proxies_t.len() {
        return Err(TcmError::Contract(format!(
            "proxy loss needs k >= 1 proxies on both sides, got {} and {}",
            proxies_s.len(),
            proxies_t.len()
        )));
    }
    let inv_k = 1.0 / proxies_s.len() as f64;
    let ds = pdisc.record(params, PDISC_SOURCE, tape, xs)?;
    let mut acc = log_clamped(tape, ds, false);
    let dt = pdisc.record(params, PDISC_TARGET, tape, xt)?;
    let real_t = log_clamped(tape, dt, false);
    acc = tape.add(acc, real_t)?;
    for (&ps, &pt) in proxies_s.iter().zip(proxies_t) {
        let d = pdisc.record(params, PDISC_TARGET, tape, ps)?;
        let fake_s = log_clamped(tape, d, true);
        let fs = tape.scale(fake_s, inv_k);
        acc = tape.add(acc, fs)?;
        let d = pdisc.record(params, PDISC_SOURCE, tape, pt)?;
        let fake_t = log_clamped(tape, d, true);
        let ft = tape.scale(fake_t, inv_k);
        acc = tape.add(acc, ft)?;
    }
    Ok(acc)
}

fn finite(context: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TcmError::numeric(
            context.to_string(),
            format!("value is {v}"),
        ))
    }
}

/// VAE loss on adapter features `x` with the given reparameterization noise.
pub fn vae_loss(model: &ProxyModel, x: &Matrix, eps: &Matrix) -> Result<VaeLoss> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let v = record_vae(&mut tape, model, model.params(), xv, eps)?;
    Ok(VaeLoss {
        total: finite("vae total", tape.scalar(v.total))?,
        recon: finite("vae reconstruction", tape.scalar(v.recon))?,
        kl: finite("vae kl", tape.scalar(v.kl))?,
    })
}

/// `𝓛_c` on raw source features, their labels and raw proxies `M_i(x)`.
pub fn classification_loss(
    model: &ProxyModel,
    x_raw: &Matrix,
    labels: Option<&[usize]>,
    proxies_raw: &[Matrix],
    eps: &Matrix,
) -> Result<f64> {
    let labels = labels
        .ok_or_else(|| TcmError::Contract("classification loss needs source labels".into()))?;
    let mut tape = Tape::new();
    let xr = tape.constant(x_raw.clone());
    let x = record_adapter(&mut tape, model, model.params(), xr)?;
    let vae = record_vae(&mut tape, model, model.params(), x, eps)?;
    let z = match model.z_mode {
        ZMode::Sample => vae.z,
        ZMode::Mean => vae.mu,
    };
    let mut proxies = Vec::with_capacity(proxies_raw.len());
    for p in proxies_raw {
        let pv = tape.constant(p.clone());
        let adapted = record_adapter(&mut tape, model, model.params(), pv)?;
        proxies.push(regression_target(&mut tape, model, adapted));
    }
    let v = record_classification(&mut tape, model.params(), z, x, labels, &proxies)?;
    finite("classification loss", tape.scalar(v.total))
}

/// `𝓛_p` on adapter features.
pub fn proxy_loss(
    model: &ProxyModel,
    xs: &Matrix,
    proxies_s: &[Matrix],
    xt: &Matrix,
    proxies_t: &[Matrix],
) -> Result<f64> {
    let mut tape = Tape::new();
    let xsv = tape.constant(xs.clone());
    let xtv = tape.constant(xt.clone());
    let ps: Vec<Var> = proxies_s.iter().map(|p| tape.constant(p.clone())).collect();
    let pt: Vec<Var> = proxies_t.iter().map(|p| tape.constant(p.clone())).collect();
    let v = record_proxy_loss(&mut tape, &model.pdisc, model.params(), xsv, &ps, xtv, &pt)?;
    finite("proxy loss", tape.scalar(v))
}
