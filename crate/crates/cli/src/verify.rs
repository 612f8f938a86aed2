//! `verify`: the invariant suites, plus the end-to-end experiment at `full`.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tcm_core::bench::{run_experiment, MetricsReport};
use tcm_core::numerics::SvdOptions;
use tcm_core::verify::{property_suites, SuiteReport, SuiteSizes};
use tcm_core::ExperimentConfig;

use crate::data::write_file;
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

/// Deliberate faults for exercising the failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Stop the Jacobi SVD after its first sweep.
    TruncatedSvd,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
    /// TCM, baselines and oracle at `full`.
    pub experiment: Vec<MetricsReport>,
}

impl VerifyReport {
    pub fn failed(&self) -> Vec<&str> {
        self.suites
            .iter()
            .filter(|s| !s.passed)
            .map(|s| s.name.as_str())
            .collect()
    }
}

/// Compares TCM against the source-only baseline on the oracle.
pub fn end_to_end_suite(reports: &[MetricsReport], seconds: f64) -> SuiteReport {
    let find = |m: &str| reports.iter().find(|r| r.method == m);
    match (find("tcm"), find("source-only")) {
        (Some(t), Some(s)) => {
            let agree = t.oracle_agreement - s.oracle_agreement;
            let tv = s.tv_distance - t.tv_distance;
            SuiteReport {
                name: "end-to-end".into(),
                passed: agree > 0.0 && tv > 0.0,
                cases: 1,
                worst: agree.min(tv),
                threshold: 0.0,
                detail: format!(
                    "agreement tcm {:.4} vs source-only {:.4} (margin {agree:+.4}); \
                     tv tcm {:.4} vs source-only {:.4} (margin {tv:+.4})",
                    t.oracle_agreement, s.oracle_agreement, t.tv_distance, s.tv_distance
                ),
                seconds,
            }
        }
        _ => SuiteReport {
            name: "end-to-end".into(),
            passed: false,
            cases: 0,
            worst: f64::NAN,
            threshold: 0.0,
            detail: "experiment did not report tcm and source-only".into(),
            seconds,
        },
    }
}

pub fn run_verify(
    cfg: &ExperimentConfig,
    level: Level,
    fault: Option<Fault>,
) -> CliResult<VerifyReport> {
    let svd = SvdOptions {
        truncate_after_first_sweep: fault == Some(Fault::TruncatedSvd),
        ..SvdOptions::default()
    };
    let mut suites = property_suites(cfg.seed, &SuiteSizes::default(), &svd);
    let mut experiment = Vec::new();
    if level == Level::Full {
        let started = Instant::now();
        let res = run_experiment(cfg)?;
        experiment = res.reports().into_iter().cloned().collect();
        suites.push(end_to_end_suite(
            &experiment,
            started.elapsed().as_secs_f64(),
        ));
    }
    Ok(VerifyReport { suites, experiment })
}

pub fn render(report: &VerifyReport) -> String {
    let mut s = format!(
        "{:<20} {:<6} {:>6} {:>12} {:>10} {:>8}\n",
        "suite", "result", "cases", "worst", "threshold", "seconds"
    );
    for r in &report.suites {
        s += &format!(
            "{:<20} {:<6} {:>6} {:>12.3e} {:>10.1e} {:>8.2}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.cases,
            r.worst,
            r.threshold,
            r.seconds
        );
        if !r.passed {
            s += &format!("  {}\n", r.detail);
        }
    }
    if !report.experiment.is_empty() {
        s += "\nmethod       accuracy  oracle_agreement  tv_distance\n";
        for r in &report.experiment {
            s += &format!(
                "{:<12} {:>8.4}  {:>16.4}  {:>11.4}\n",
                r.method, r.accuracy, r.oracle_agreement, r.tv_distance
            );
        }
        if let Some(e) = report.suites.iter().find(|r| r.name == "end-to-end") {
            s += &format!("{}\n", e.detail);
        }
    }
    s
}

/// Prints the table; any failed suite becomes exit code 1.
pub fn cmd_verify(
    cfg: &ExperimentConfig,
    level: Level,
    fault: Option<Fault>,
    out: Option<&Path>,
) -> CliResult<()> {
    let report = run_verify(cfg, level, fault)?;
    print!("{}", render(&report));
    if let Some(path) = out {
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        write_file(path, text)?;
    }
    let failed = report.failed();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::failure(format!(
            "verification failed: {}",
            failed.join(", ")
        )))
    }
}
