//! Property suites shared by the `verify` command and the test targets.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dcm::{
    competitive_step, init_dcms, record_cyclegan, record_discriminator_loss, DcmConfig,
    DcmTrainerState, DomainDiscriminators, LossWeights, MechanismClass, MechanismPair,
};
use crate::error::Result;
use crate::graddiff::{finite_diff_check, FdReport, ParamStore, Tape};
use crate::numerics::{
    norm2, penrose_residual, pinv_with, sub_vec, Matrix, RngStream, SvdOptions, DEFAULT_RCOND,
};
use crate::proxy::{
    heads_forward, record_adapter, record_classification, record_proxy_loss, record_vae, solve_h_y,
    HyOperator, LinearHeads, ProxyConfig, ProxyModel,
};
use crate::scm::{
    disentanglement_score, lift_latent_map, sample_dataset, true_mechanism, Direction, Domain,
    ScmConfig, ScmSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed value of the suite's measured quantity.
    pub worst: f64,
    pub threshold: f64,
    pub detail: String,
    pub seconds: f64,
}

impl SuiteReport {
    fn finish(
        name: &str,
        started: Instant,
        cases: usize,
        worst: f64,
        threshold: f64,
        failures: Vec<String>,
    ) -> Self {
        let passed = failures.is_empty();
        let detail = if passed {
            String::new()
        } else {
            failures.into_iter().take(5).collect::<Vec<_>>().join("; ")
        };
        Self {
            name: name.to_string(),
            passed,
            cases,
            worst,
            threshold,
            detail,
            seconds: started.elapsed().as_secs_f64(),
        }
    }

    fn errored(name: &str, started: Instant, err: impl std::fmt::Display) -> Self {
        Self {
            name: name.to_string(),
            passed: false,
            cases: 0,
            worst: f64::NAN,
            threshold: f64::NAN,
            detail: err.to_string(),
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

fn run_suite(name: &str, f: impl FnOnce(Instant) -> Result<SuiteReport>) -> SuiteReport {
    let started = Instant::now();
    f(started).unwrap_or_else(|e| SuiteReport::errored(name, started, e))
}

/// Random `r x c` matrix, rank deficient when `rank < min(r, c)`.
fn random_matrix(rng: &mut RngStream, r: usize, c: usize, rank: usize) -> Result<Matrix> {
    if rank >= r.min(c) {
        return Ok(rng.normal_matrix(r, c, 1.0));
    }
    rng.normal_matrix(r, rank, 1.0)
        .matmul(&rng.normal_matrix(rank, c, 1.0))
}

pub const PENROSE_TOL: f64 = 1e-8;

/// The four pseudo-inverse conditions on random matrices up to
/// `max_dim x max_dim`; every fourth matrix is rank deficient.
pub fn penrose_suite(seed: u64, count: usize, max_dim: usize, opts: &SvdOptions) -> SuiteReport {
    let name = "penrose";
    run_suite(name, |started| {
        let mut rng = RngStream::new(seed, 0x9e05);
        let mut worst = 0.0f64;
        let mut failures = Vec::new();
        for case in 0..count {
            let r = 1 + rng.below(max_dim);
            let c = 1 + rng.below(max_dim);
            let rank = if case % 4 == 3 {
                rng.below(r.min(c))
            } else {
                r.min(c)
            };
            let a = random_matrix(&mut rng, r, c, rank)?;
            let res = match pinv_with(&a, DEFAULT_RCOND, opts) {
                Ok(p) => penrose_residual(&a, &p)?,
                Err(e) => {
                    failures.push(format!("case {case} ({r}x{c}): {e}"));
                    continue;
                }
            };
            worst = worst.max(res);
            if !(res < PENROSE_TOL) {
                failures.push(format!(
                    "case {case} ({r}x{c}, rank {rank}): residual {res:.3e}"
                ));
            }
        }
        Ok(SuiteReport::finish(
            name,
            started,
            count,
            worst,
            PENROSE_TOL,
            failures,
        ))
    })
}

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

const GRAD_N: usize = 4;
const GRAD_C: usize = 3;
const GRAD_K: usize = 2;
const GRAD_ROWS: usize = 5;

/// Adds `N(0, std²)` noise to every slot.
fn jitter_all(params: &mut ParamStore, std: f64, rng: &mut RngStream) -> Result<()> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let v = params.get(&name)?;
        let noise = rng.normal_matrix(v.rows(), v.cols(), std);
        let moved = v.add(&noise)?;
        params.set(&name, moved)?;
    }
    Ok(())
}

fn small_model(rng: &RngStream) -> Result<ProxyModel> {
    let cfg = ProxyConfig {
        latent_dim: 2,
        vae_hidden: 4,
        disc_hidden: 4,
        head_init_std: 0.5,
        detach_targets: false,
        ..ProxyConfig::default()
    };
    let mut pair_rng = rng.split(1);
    let pairs = (0..GRAD_K)
        .map(|i| MechanismPair::new(i, GRAD_N, MechanismClass::Affine, 0.3, &mut pair_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut model = ProxyModel::new(&cfg, GRAD_N, GRAD_C, pairs, &rng.split(2))?;
    jitter_all(model.params_mut(), 0.2, &mut rng.split(3))?;
    Ok(model)
}

/// Finite-difference checks of one loss family on `instances` random
/// instances.
fn fd_family(
    seed: u64,
    family: u64,
    instances: usize,
    check: impl Fn(&RngStream) -> Result<FdReport> + Sync,
) -> Result<Vec<FdReport>> {
    (0..instances)
        .into_par_iter()
        .map(|i| check(&RngStream::new(seed, 0x6d00 + family).split(i as u64)))
        .collect()
}

/// Central-difference checks of the VAE, classification, proxy, CycleGAN
/// and discriminator losses with frozen noise.
pub fn gradient_suite(seed: u64, instances: usize) -> SuiteReport {
    let name = "gradients";
    run_suite(name, |started| {
        let vae = fd_family(seed, 0, instances, |rng| {
            let model = small_model(rng)?;
            let mut r = rng.split(4);
            let x = r.normal_matrix(GRAD_ROWS, GRAD_N, 1.0);
            let eps = r.normal_matrix(GRAD_ROWS, model.l, 1.0);
            finite_diff_check(
                |p| {
                    let mut tape = Tape::new();
                    let xv = tape.constant(x.clone());
                    let v = record_vae(&mut tape, &model, p, xv, &eps)?;
                    Ok((tape.scalar(v.total), tape.backward(v.total)?))
                },
                model.params(),
                FD_EPS,
            )
        })?;
        let classification = fd_family(seed, 1, instances, |rng| {
            let model = small_model(rng)?;
            let mut r = rng.split(4);
            let x = r.normal_matrix(GRAD_ROWS, GRAD_N, 1.0);
            let eps = r.normal_matrix(GRAD_ROWS, model.l, 1.0);
            let labels: Vec<usize> = (0..GRAD_ROWS).map(|_| r.below(GRAD_C)).collect();
            let proxies: Vec<Matrix> = (0..GRAD_K)
                .map(|_| r.normal_matrix(GRAD_ROWS, GRAD_N, 1.0))
                .collect();
            finite_diff_check(
                |p| {
                    let mut tape = Tape::new();
                    let xr = tape.constant(x.clone());
                    let xa = record_adapter(&mut tape, &model, p, xr)?;
                    let v = record_vae(&mut tape, &model, p, xa, &eps)?;
                    let mut pv = Vec::new();
                    for m in &proxies {
                        let c = tape.constant(m.clone());
                        pv.push(record_adapter(&mut tape, &model, p, c)?);
                    }
                    let lc = record_classification(&mut tape, p, v.z, xa, &labels, &pv)?;
                    Ok((tape.scalar(lc.total), tape.backward(lc.total)?))
                },
                model.params(),
                FD_EPS,
            )
        })?;
        let proxy = fd_family(seed, 2, instances, |rng| {
            let model = small_model(rng)?;
            let mut r = rng.split(4);
            let xs = r.normal_matrix(GRAD_ROWS, GRAD_N, 1.0);
            let xt = r.normal_matrix(GRAD_ROWS, GRAD_N, 1.0);
            let ps: Vec<Matrix> = (0..GRAD_K)
                .map(|_| r.normal_matrix(GRAD_ROWS, GRAD_N, 1.0))
                .collect();
            let pt: Vec<Matrix> = (0..GRAD_K)
                .map(|_| r.normal_matrix(GRAD_ROWS, GRAD_N, 1.0))
                .collect();
            finite_diff_check(
                |p| {
                    let mut tape = Tape::new();
                    let adapt = |m: &Matrix, tape: &mut Tape| {
                        let c = tape.constant(m.clone());
                        record_adapter(tape, &model, p, c)
                    };
                    let xsv = adapt(&xs, &mut tape)?;
                    let xtv = adapt(&xt, &mut tape)?;
                    let psv = ps
                        .iter()
                        .map(|m| adapt(m, &mut tape))
                        .collect::<Result<Vec<_>>>()?;
                    let ptv = pt
                        .iter()
                        .map(|m| adapt(m, &mut tape))
                        .collect::<Result<Vec<_>>>()?;
                    let lp = record_proxy_loss(&mut tape, &model.pdisc, p, xsv, &psv, xtv, &ptv)?;
                    Ok((tape.scalar(lp), tape.backward(lp)?))
                },
                model.params(),
                FD_EPS,
            )
        })?;
        let cyclegan = fd_family(seed, 3, instances, |rng| {
            let mut r = rng.split(4);
            let pair = MechanismPair::new(0, GRAD_N, MechanismClass::Affine, 0.3, &mut r)?;
            let mut disc = DomainDiscriminators::new(GRAD_N, 4, &mut r)?;
            jitter_all(&mut disc.params, 0.3, &mut r)?;
            let x = r.normal_matrix(GRAD_ROWS, GRAD_N, 1.0);
            let domain = if r.below(2) == 0 {
                Domain::Source
            } else {
                Domain::Target
            };
            let w = LossWeights {
                cyc: 10.0,
                idt: 5.0,
            };
            finite_diff_check(
                |p| {
                    let mut tape = Tape::new();
                    let xv = tape.constant(x.clone());
                    let v = record_cyclegan(
                        &mut tape,
                        &pair.mlp,
                        p,
                        &disc,
                        &disc.params,
                        xv,
                        domain,
                        w,
                    )?;
                    Ok((tape.scalar(v.total), tape.backward(v.total)?))
                },
                &pair.params,
                FD_EPS,
            )
        })?;
        let discriminator = fd_family(seed, 4, instances, |rng| {
            let mut r = rng.split(4);
            let mut disc = DomainDiscriminators::new(GRAD_N, 4, &mut r)?;
            jitter_all(&mut disc.params, 0.3, &mut r)?;
            let x = r.normal_matrix(GRAD_ROWS, GRAD_N, 1.0);
            let fakes: Vec<Matrix> = (0..GRAD_K)
                .map(|_| r.normal_matrix(GRAD_ROWS, GRAD_N, 1.0))
                .collect();
            let domain = if r.below(2) == 0 {
                Domain::Source
            } else {
                Domain::Target
            };
            finite_diff_check(
                |p| {
                    let mut tape = Tape::new();
                    let v = record_discriminator_loss(&mut tape, &disc, p, &x, &fakes, domain)?;
                    Ok((tape.scalar(v), tape.backward(v)?))
                },
                &disc.params,
                FD_EPS,
            )
        })?;

        let mut worst = 0.0f64;
        let mut failures = Vec::new();
        let mut cases = 0;
        for (family, reports) in [
            ("vae", vae),
            ("classification", classification),
            ("proxy", proxy),
            ("cyclegan", cyclegan),
            ("discriminator", discriminator),
        ] {
            for (i, r) in reports.iter().enumerate() {
                cases += 1;
                worst = worst.max(r.max_rel_err);
                if !(r.max_rel_err < FD_TOL) {
                    failures.push(format!(
                        "{family} instance {i}: rel err {:.3e} at {}[{}]",
                        r.max_rel_err, r.worst_slot, r.worst_index
                    ));
                }
            }
        }
        Ok(SuiteReport::finish(
            name, started, cases, worst, FD_TOL, failures,
        ))
    })
}

pub const PROXY_MC_TOL: f64 = 0.01;
pub const PROXY_PLUGIN_TOL: f64 = 1e-10;

/// Random heads with full-column-rank `W₃` (entries `N(0, 1)`, `n > l`).
pub fn random_heads(rng: &mut RngStream, n: usize, l: usize, c: usize) -> LinearHeads {
    LinearHeads {
        w1: rng.normal_matrix(c, l, 1.0),
        w2: rng.normal_matrix(c, n, 1.0),
        b1: rng.normal_vec(c, 1.0),
        w3: rng.normal_matrix(n, l, 1.0),
        w4: rng.normal_matrix(n, n, 1.0),
        b2: rng.normal_vec(n, 1.0),
        sigma1_sq: 1.0,
        sigma2_sq: 1.0,
    }
}

/// `E[h_y(x, X̂)]` over `X̂ ~ N(f_x̂(z, x), I)` against `f_y(z, x)`, by
/// Monte Carlo and by plugging in the mean.
pub fn proxy_identity_suite(seed: u64, heads: usize, draws: usize) -> SuiteReport {
    let name = "proxy-identity";
    run_suite(name, |started| {
        let (n, l, c) = (8, 3, 3);
        let results: Vec<(f64, f64)> = (0..heads)
            .into_par_iter()
            .map(|h| {
                let mut rng = RngStream::new(seed, 0x7e00).split(h as u64);
                let hd = random_heads(&mut rng, n, l, c);
                if hd.w3_min_singular()? < 1e-6 {
                    return Err(crate::TcmError::Contract(format!(
                        "head {h}: W3 is rank deficient"
                    )));
                }
                let z = rng.normal_vec(l, 1.0);
                let x = rng.normal_vec(n, 1.0);
                let (fy, fxhat) = heads_forward(&hd, &z, &x)?;
                let op = HyOperator::from_heads(&hd)?;
                let plug = solve_h_y(&hd, &x, &fxhat)?;
                let plug_err = sub_vec(&plug, &fy)
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                let mut acc = vec![0.0; c];
                let mut xhat = vec![0.0; n];
                for _ in 0..draws {
                    for (o, m) in xhat.iter_mut().zip(&fxhat) {
                        *o = m + rng.standard_normal();
                    }
                    let hy = op.eval(&x, &xhat)?;
                    acc.iter_mut().zip(&hy).for_each(|(a, v)| *a += v);
                }
                let mc: Vec<f64> = acc.iter().map(|a| a / draws as f64).collect();
                let rel = norm2(&sub_vec(&mc, &fy)) / norm2(&fy);
                Ok((rel, plug_err))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut failures = Vec::new();
        let mut worst = 0.0f64;
        for (h, &(rel, plug)) in results.iter().enumerate() {
            worst = worst.max(rel);
            if !(rel < PROXY_MC_TOL) {
                failures.push(format!("head {h}: Monte-Carlo relative error {rel:.3e}"));
            }
            if !(plug < PROXY_PLUGIN_TOL) {
                failures.push(format!("head {h}: plug-in error {plug:.3e}"));
            }
        }
        Ok(SuiteReport::finish(
            name,
            started,
            heads,
            worst,
            PROXY_MC_TOL,
            failures,
        ))
    })
}

pub const FAITHFUL_TOL: f64 = 1e-8;
pub const ENTANGLED_MIN: f64 = 0.1;

/// Latent map touching coordinate `i` only, or also `j` when given.
fn latent_map(rng: &mut RngStream, k: usize, i: usize, j: Option<usize>) -> (Matrix, Vec<f64>) {
    let mut r = Matrix::identity(k);
    let mut off = vec![0.0; k];
    r.set(i, i, 1.0 + rng.uniform() - 0.5);
    off[i] = rng.normal_vec(1, 1.0)[0];
    if let Some(j) = j {
        let sign = if rng.below(2) == 0 { -1.0 } else { 1.0 };
        off[j] = sign * (0.5 + rng.uniform());
        if rng.below(2) == 0 {
            r.set(j, i, 0.5 + rng.uniform());
        }
    }
    (r, off)
}

/// Executable form of the faithfulness theorem on random affine SCMs:
/// single-coordinate interventions have no off-coordinate leakage,
/// two-coordinate ones do.
pub fn faithfulness_suite(seed: u64, scms: usize) -> SuiteReport {
    let name = "faithfulness";
    run_suite(name, |started| {
        let mut rng = RngStream::new(seed, 0xfa17);
        let mut failures = Vec::new();
        let mut worst_faithful = 0.0f64;
        let mut weakest_entangled = f64::INFINITY;
        let mut cases = 0;
        for s in 0..scms {
            let k = 2 + rng.below(3);
            let n = k + 1 + rng.below(5);
            let cfg = ScmConfig {
                k,
                n,
                shifts: rng.normal_vec(k, 1.0),
                source_samples: 100,
                target_samples: 100,
                ..ScmConfig::default()
            };
            let spec = ScmSpec::generate(&cfg, &mut rng)?;
            let probe = sample_dataset(&spec, Domain::Source, 100, &mut rng)?;
            let probe = probe.features();
            for i in 0..k {
                let mut faithful = Vec::new();
                for dir in [Direction::SourceToTarget, Direction::TargetToSource] {
                    faithful.push(("true mechanism", true_mechanism(&spec, i, dir)?));
                }
                let (r, off) = latent_map(&mut rng, k, i, None);
                faithful.push(("single-factor map", lift_latent_map(&spec, &r, &off)?));
                for (label, m) in &faithful {
                    cases += 1;
                    let score = disentanglement_score(&spec, m, i, probe)?;
                    worst_faithful = worst_faithful.max(score.off);
                    if !(score.off < FAITHFUL_TOL) {
                        failures.push(format!(
                            "scm {s} factor {i}: {label} leaks {:.3e}",
                            score.off
                        ));
                    }
                }
                let j = (i + 1 + rng.below(k - 1)) % k;
                let (r, off) = latent_map(&mut rng, k, i, Some(j));
                let m = lift_latent_map(&spec, &r, &off)?;
                cases += 1;
                let score = disentanglement_score(&spec, &m, i, probe)?;
                weakest_entangled = weakest_entangled.min(score.off);
                if !(score.off > ENTANGLED_MIN) {
                    failures.push(format!(
                        "scm {s} factor {i}: entangled control scores only {:.3e}",
                        score.off
                    ));
                }
            }
        }
        let mut report =
            SuiteReport::finish(name, started, cases, worst_faithful, FAITHFUL_TOL, failures);
        report.detail = if report.passed {
            format!("weakest entangled control {weakest_entangled:.3}")
        } else {
            report.detail
        };
        Ok(report)
    })
}

/// Trains on the default benchmark for `steps` post-warmup steps and checks
/// by snapshot that exactly the winner moves each step; then checks the
/// tie rule with identical pairs.
pub fn winner_exclusivity_suite(seed: u64, steps: usize) -> SuiteReport {
    let name = "winner-exclusivity";
    run_suite(name, |started| {
        let root = RngStream::new(seed, 0xe2c1);
        let spec = ScmSpec::generate(&ScmConfig::default(), &mut root.split(0))?;
        let xs = sample_dataset(&spec, Domain::Source, 500, &mut root.split(1))?;
        let xt = sample_dataset(&spec, Domain::Target, 500, &mut root.split(2))?;
        let cfg = DcmConfig {
            warmup: 0,
            ..DcmConfig::default()
        };
        let (mut pairs, mut disc) = init_dcms(&cfg, spec.n, &root.split(3))?;
        let mut state = DcmTrainerState::new(&cfg);
        let mut batches = root.split(4);
        let mut failures = Vec::new();
        let mut worst_changed = 0usize;
        for step in 0..steps {
            let (data, domain) = if step % 2 == 0 {
                (xs.features(), Domain::Source)
            } else {
                (xt.features(), Domain::Target)
            };
            let idx: Vec<usize> = (0..cfg.batch_size)
                .map(|_| batches.below(data.rows()))
                .collect();
            let before: Vec<ParamStore> = pairs.iter().map(|p| p.params.clone()).collect();
            let out = competitive_step(
                &mut state,
                &mut pairs,
                &mut disc,
                &data.select_rows(&idx),
                domain,
            )?;
            let changed: Vec<usize> = (0..pairs.len())
                .filter(|&i| !pairs[i].params.same_values(&before[i]))
                .collect();
            worst_changed = worst_changed.max(changed.len());
            if changed != vec![out.winner] {
                failures.push(format!(
                    "step {step}: winner {} but changed pairs {changed:?}",
                    out.winner
                ));
            }
        }

        let (mut tied, mut disc) = init_dcms(&cfg, spec.n, &root.split(5))?;
        for i in 1..tied.len() {
            tied[i] = MechanismPair {
                index: i,
                ..tied[0].clone()
            };
        }
        let before: Vec<ParamStore> = tied.iter().map(|p| p.params.clone()).collect();
        let mut state = DcmTrainerState::new(&cfg);
        let batch = xs
            .features()
            .select_rows(&(0..cfg.batch_size).collect::<Vec<_>>());
        let out = competitive_step(&mut state, &mut tied, &mut disc, &batch, Domain::Source)?;
        let changed: Vec<usize> = (0..tied.len())
            .filter(|&i| !tied[i].params.same_values(&before[i]))
            .collect();
        if out.winner != 0 || changed != vec![0] {
            failures.push(format!(
                "tie resolved to {} with changed pairs {changed:?}",
                out.winner
            ));
        }
        Ok(SuiteReport::finish(
            name,
            started,
            steps + 1,
            worst_changed as f64,
            1.0,
            failures,
        ))
    })
}

/// Seeds and sizes for the property suites.
#[derive(Clone, Debug)]
pub struct SuiteSizes {
    pub penrose: usize,
    pub penrose_max_dim: usize,
    pub gradient_instances: usize,
    pub proxy_heads: usize,
    pub proxy_draws: usize,
    pub scms: usize,
    pub winner_steps: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            penrose: 200,
            penrose_max_dim: 16,
            gradient_instances: 20,
            proxy_heads: 100,
            proxy_draws: 100_000,
            scms: 50,
            winner_steps: 500,
        }
    }
}

/// Every property suite at the given sizes. `svd` is the decomposition
/// setting used by the Penrose suite (a fault-injection hook).
pub fn property_suites(seed: u64, sizes: &SuiteSizes, svd: &SvdOptions) -> Vec<SuiteReport> {
    vec![
        penrose_suite(seed, sizes.penrose, sizes.penrose_max_dim, svd),
        gradient_suite(seed, sizes.gradient_instances),
        proxy_identity_suite(seed, sizes.proxy_heads, sizes.proxy_draws),
        faithfulness_suite(seed, sizes.scms),
        winner_exclusivity_suite(seed, sizes.winner_steps),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        let sizes = SuiteSizes {
            penrose: 20,
            penrose_max_dim: 6,
            gradient_instances: 2,
            proxy_heads: 3,
            proxy_draws: 20_000,
            scms: 3,
            winner_steps: 20,
        };
        for r in property_suites(7, &sizes, &SvdOptions::default()) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn truncated_svd_fails_penrose() {
        let opts = SvdOptions {
            truncate_after_first_sweep: true,
            ..SvdOptions::default()
        };
        let r = penrose_suite(3, 20, 8, &opts);
        assert!(!r.passed);
    }
}
