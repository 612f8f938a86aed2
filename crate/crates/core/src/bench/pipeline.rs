use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{domain_map_baseline, source_only_baseline, BaselineConfig};
use super::metrics::{evaluate_against, MetricsReport, OraclePredictor, Predictor, PurityMonitor};
use crate::config::ExperimentConfig;
use crate::dcm::{train_dcms, DcmRun};
use crate::error::{Result, TcmError};
use crate::numerics::{Matrix, RngStream};
use crate::proxy::{infer_batch, train_stage2, ProxyModel, Stage2Run};
use crate::scm::{oracle_batch, sample_dataset, DataSource, Dataset, Domain, OracleTable, ScmSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub oracle_samples: usize,
    pub ablation_oracle_samples: usize,
    pub ablation_ks: Vec<usize>,
    /// Consecutive seeds starting at the experiment seed.
    pub ablation_seeds: usize,
    pub baseline: BaselineConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            oracle_samples: 100_000,
            ablation_oracle_samples: 10_000,
            ablation_ks: vec![1, 2, 3, 5],
            ablation_seeds: 3,
            baseline: BaselineConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let min = crate::scm::MIN_MC_SAMPLES;
        if self.oracle_samples < min {
            return Err(TcmError::config(
                "bench.oracle_samples",
                format!("must be at least {min}"),
            ));
        }
        if self.ablation_oracle_samples < min {
            return Err(TcmError::config(
                "bench.ablation_oracle_samples",
                format!("must be at least {min}"),
            ));
        }
        if self.ablation_ks.contains(&0) {
            return Err(TcmError::config(
                "bench.ablation_ks",
                "k values must be at least 1",
            ));
        }
        if self.ablation_seeds == 0 {
            return Err(TcmError::config(
                "bench.ablation_seeds",
                "must be at least 1",
            ));
        }
        self.baseline.validate()
    }
}

/// Named sub-streams of one experiment seed.
pub mod streams {
    pub const SPEC: u64 = 1;
    pub const SOURCE: u64 = 2;
    pub const TARGET: u64 = 3;
    pub const DCM: u64 = 4;
    pub const PROXY: u64 = 5;
    pub const SOURCE_ONLY: u64 = 6;
    pub const DOMAIN_MAP: u64 = 7;
    pub const ORACLE: u64 = 8;
}

pub fn root_stream(seed: u64) -> RngStream {
    RngStream::new(seed, 0)
}

/// The SCM and both datasets (with hidden columns) for a config and seed.
pub fn generate_world(cfg: &ExperimentConfig, seed: u64) -> Result<(ScmSpec, Dataset, Dataset)> {
    let root = root_stream(seed);
    let spec = ScmSpec::generate(&cfg.scm, &mut root.split(streams::SPEC))?;
    let source = sample_dataset(
        &spec,
        Domain::Source,
        cfg.scm.source_samples,
        &mut root.split(streams::SOURCE),
    )?;
    let target = sample_dataset(
        &spec,
        Domain::Target,
        cfg.scm.target_samples,
        &mut root.split(streams::TARGET),
    )?;
    Ok((spec, source, target))
}

pub struct TcmPredictor<'a>(pub &'a ProxyModel);

impl Predictor for TcmPredictor<'_> {
    fn name(&self) -> &str {
        "tcm"
    }

    fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let out = infer_batch(self.0, x)?;
        let mut m = Matrix::zeros(out.len(), self.0.c);
        for (i, r) in out.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&r.probs);
        }
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct TcmTraining {
    pub dcm: DcmRun,
    pub stage2: Stage2Run,
    /// Win counts per pair and attributed factor, when a spec was given.
    pub purity_counts: Option<Vec<Vec<u64>>>,
}

/// Both training stages. `spec` only feeds the purity monitor.
pub fn train_tcm(
    cfg: &ExperimentConfig,
    spec: Option<&ScmSpec>,
    source: &dyn DataSource,
    target: &dyn DataSource,
    root: &RngStream,
) -> Result<TcmTraining> {
    let (dcm, purity_counts) = match spec {
        Some(spec) => {
            let mut mon = PurityMonitor::new(spec, cfg.dcm.k_mechanisms);
            let run = train_dcms(
                &cfg.dcm,
                source,
                target,
                &root.split(streams::DCM),
                &mut mon,
            )?;
            (run, Some(mon.counts))
        }
        None => (
            train_dcms(&cfg.dcm, source, target, &root.split(streams::DCM), &mut ())?,
            None,
        ),
    };
    let stage2 = train_stage2(
        &cfg.proxy,
        cfg.scm.c,
        &dcm.pairs,
        source,
        target,
        &root.split(streams::PROXY),
    )?;
    Ok(TcmTraining {
        dcm,
        stage2,
        purity_counts,
    })
}

fn tcm_report(
    cfg: &ExperimentConfig,
    training: &TcmTraining,
    target: &Dataset,
    oracle: &OracleTable,
    started: Instant,
) -> Result<MetricsReport> {
    let mut r = evaluate_against(&TcmPredictor(&training.stage2.model), target, oracle)?;
    r.k = Some(cfg.dcm.k_mechanisms);
    r.seed = cfg.seed;
    r.purity = training
        .purity_counts
        .as_deref()
        .map(super::metrics::purity_matrix);
    r.win_counts = Some(training.dcm.post_warmup_wins());
    r.config = serde_json::to_value(cfg)?;
    r.seconds = started.elapsed().as_secs_f64();
    Ok(r)
}

/// Everything one benchmark run produces.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub tcm: MetricsReport,
    pub source_only: MetricsReport,
    pub domain_map: MetricsReport,
    pub oracle: MetricsReport,
    pub training: TcmTraining,
}

impl ExperimentResult {
    pub fn reports(&self) -> [&MetricsReport; 4] {
        [&self.tcm, &self.source_only, &self.domain_map, &self.oracle]
    }
}

/// TCM, both baselines and the oracle ceiling on one generated world.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (spec, source, target) = generate_world(cfg, cfg.seed)?;
    let root = root_stream(cfg.seed);
    let learner_target = target.learner_view();
    let oracle = oracle_batch(
        &spec,
        target.features(),
        Domain::Target,
        cfg.bench.oracle_samples,
        &mut root.split(streams::ORACLE),
    )?;
    let config = serde_json::to_value(cfg)?;

    let started = Instant::now();
    let training = train_tcm(cfg, Some(&spec), &source, &learner_target, &root)?;
    let tcm = tcm_report(cfg, &training, &target, &oracle, started)?;

    let finish = |r: Result<MetricsReport>, started: Instant| -> Result<MetricsReport> {
        let mut r = r?;
        r.seed = cfg.seed;
        r.config = config.clone();
        r.seconds = started.elapsed().as_secs_f64();
        Ok(r)
    };
    let started = Instant::now();
    let so = source_only_baseline(
        &cfg.bench.baseline,
        cfg.scm.c,
        &source,
        &root.split(streams::SOURCE_ONLY),
    )?;
    let source_only = finish(evaluate_against(&so, &target, &oracle), started)?;
    let started = Instant::now();
    let dm = domain_map_baseline(
        &cfg.bench.baseline,
        &cfg.dcm,
        cfg.scm.c,
        &source,
        &learner_target,
        &root.split(streams::DOMAIN_MAP),
    )?;
    let domain_map = finish(evaluate_against(&dm, &target, &oracle), started)?;
    let started = Instant::now();
    let oracle_report = finish(
        evaluate_against(&OraclePredictor(&oracle), &target, &oracle),
        started,
    )?;
    Ok(ExperimentResult {
        tcm,
        source_only,
        domain_map,
        oracle: oracle_report,
        training,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub accuracy: f64,
    pub oracle_agreement: f64,
    pub tv_distance: f64,
    pub purity_min: Option<f64>,
    pub purity_mean: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// One report per (k, seed), sorted by k then seed.
    pub runs: Vec<MetricsReport>,
    /// Means over seeds, sorted by k.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record([
            "k",
            "accuracy",
            "oracle_agreement",
            "tv_distance",
            "purity_min",
            "purity_mean",
            "seconds",
        ])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.k.to_string(),
                r.accuracy.to_string(),
                r.oracle_agreement.to_string(),
                r.tv_distance.to_string(),
                opt(r.purity_min),
                opt(r.purity_mean),
                r.seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn mean_opt(v: Vec<Option<f64>>) -> Option<f64> {
    let some: Vec<f64> = v.into_iter().flatten().collect();
    (!some.is_empty()).then(|| mean(some.into_iter()))
}

/// Full TCM pipeline for every `k` on the same worlds and seeds.
pub fn ablate_k(cfg: &ExperimentConfig, ks: &[usize], seeds: &[u64]) -> Result<AblationTable> {
    cfg.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(TcmError::config(
            "bench.ablation_ks",
            "need at least one k, all at least 1",
        ));
    }
    let worlds = seeds
        .par_iter()
        .map(|&seed| {
            let (spec, source, target) = generate_world(cfg, seed)?;
            let oracle = oracle_batch(
                &spec,
                target.features(),
                Domain::Target,
                cfg.bench.ablation_oracle_samples,
                &mut root_stream(seed).split(streams::ORACLE),
            )?;
            Ok((seed, spec, source, target, oracle))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut keys: Vec<(usize, usize)> = ks
        .iter()
        .flat_map(|&k| (0..worlds.len()).map(move |w| (k, w)))
        .collect();
    keys.sort();
    keys.dedup();
    let runs = keys
        .par_iter()
        .map(|&(k, w)| {
            let (seed, spec, source, target, oracle) = &worlds[w];
            let mut run_cfg = cfg.clone();
            run_cfg.seed = *seed;
            run_cfg.dcm.k_mechanisms = k;
            let started = Instant::now();
            let training = train_tcm(
                &run_cfg,
                Some(spec),
                source,
                &target.learner_view(),
                &root_stream(*seed),
            )
            .map_err(|e| e.in_context(format!("k = {k}, seed = {seed}")))?;
            tcm_report(&run_cfg, &training, target, oracle, started)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut distinct: Vec<usize> = ks.to_vec();
    distinct.sort();
    distinct.dedup();
    for k in distinct {
        let group: Vec<&MetricsReport> = runs.iter().filter(|r| r.k == Some(k)).collect();
        rows.push(AblationRow {
            k,
            accuracy: mean(group.iter().map(|r| r.accuracy)),
            oracle_agreement: mean(group.iter().map(|r| r.oracle_agreement)),
            tv_distance: mean(group.iter().map(|r| r.tv_distance)),
            purity_min: mean_opt(
                group
                    .iter()
                    .map(|r| r.purity_summary().map(|p| p.0))
                    .collect(),
            ),
            purity_mean: mean_opt(
                group
                    .iter()
                    .map(|r| r.purity_summary().map(|p| p.1))
                    .collect(),
            ),
            seconds: group.iter().map(|r| r.seconds).sum(),
        });
    }
    Ok(AblationTable { runs, rows })
}
