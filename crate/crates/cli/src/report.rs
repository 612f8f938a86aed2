//! `report`: merges run outputs into one table.

use std::fs::File;
use std::path::{Path, PathBuf};

use tcm_core::bench::{
    evaluate_against, root_stream, streams, AblationTable, MetricsReport, Predictor,
};
use tcm_core::numerics::Matrix;
use tcm_core::scm::{oracle_batch, Domain};
use tcm_core::ExperimentConfig;

use crate::data::{read_csv_dataset, read_meta, write_file, TARGET_CSV};
use crate::error::{CliError, CliResult};
use crate::pipeline::{ABLATION_JSON, METRICS_JSON};

pub const PREDICTIONS_CSV: &str = "predictions.csv";

const COLUMNS: [&str; 11] = [
    "run",
    "method",
    "k",
    "seed",
    "samples",
    "accuracy",
    "oracle_agreement",
    "tv_distance",
    "purity_min",
    "purity_mean",
    "seconds",
];

/// One table row; `None` cells are left blank.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub method: String,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub accuracy: Option<f64>,
    pub oracle_agreement: Option<f64>,
    pub tv_distance: Option<f64>,
    pub purity_min: Option<f64>,
    pub purity_mean: Option<f64>,
    pub seconds: Option<f64>,
}

impl ReportRow {
    fn from_metrics(run: &str, r: &MetricsReport) -> Self {
        let purity = r.purity_summary();
        Self {
            run: run.into(),
            method: r.method.clone(),
            k: r.k,
            seed: Some(r.seed),
            samples: Some(r.samples),
            accuracy: Some(r.accuracy),
            oracle_agreement: Some(r.oracle_agreement),
            tv_distance: Some(r.tv_distance),
            purity_min: purity.map(|p| p.0),
            purity_mean: purity.map(|p| p.1),
            seconds: Some(r.seconds),
        }
    }

    fn cells(&self) -> [String; 11] {
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let u = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        [
            self.run.clone(),
            self.method.clone(),
            u(self.k),
            self.seed.map(|v| v.to_string()).unwrap_or_default(),
            u(self.samples),
            f(self.accuracy),
            f(self.oracle_agreement),
            f(self.tv_distance),
            f(self.purity_min),
            f(self.purity_mean),
            f(self.seconds),
        ]
    }

    fn short_cells(&self) -> [String; 11] {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        let mut c = self.cells();
        for (i, v) in [
            self.accuracy,
            self.oracle_agreement,
            self.tv_distance,
            self.purity_min,
            self.purity_mean,
        ]
        .into_iter()
        .enumerate()
        {
            c[5 + i] = f(v);
        }
        c[10] = self.seconds.map(|v| format!("{v:.1}")).unwrap_or_default();
        c
    }
}

/// Rows and warnings from a set of run directories.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn to_csv(&self) -> CliResult<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(COLUMNS)?;
        for r in &self.rows {
            w.write_record(r.cells())?;
        }
        w.into_inner()
            .map_err(|e| CliError::failure(format!("csv error: {e}")))
    }

    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 11]> = self.rows.iter().map(|r| r.short_cells()).collect();
        let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |row: &[String]| -> String {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i < 2 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let header: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
        let mut s = line(&header);
        for row in &cells {
            s += &line(row);
        }
        for w in &self.warnings {
            s += &format!("warning: {w}\n");
        }
        s
    }
}

/// Stored predictions replayed as a predictor.
struct StoredPredictions {
    probs: Matrix,
}

impl Predictor for StoredPredictions {
    fn name(&self) -> &str {
        "tcm"
    }

    fn predict_proba(&self, x: &Matrix) -> tcm_core::Result<Matrix> {
        if x.rows() != self.probs.rows() {
            return Err(tcm_core::TcmError::Contract(format!(
                "{} predictions for {} target rows",
                self.probs.rows(),
                x.rows()
            )));
        }
        Ok(self.probs.clone())
    }
}

/// Probability columns and weight count of a predictions CSV.
fn read_predictions(path: &Path) -> CliResult<(Matrix, usize)> {
    let mut rdr = csv::Reader::from_reader(File::open(path)?);
    let header = rdr.headers()?.clone();
    let prob_cols: Vec<usize> = (0..header.len())
        .filter(|&i| header[i].starts_with("prob_"))
        .collect();
    let k = header.iter().filter(|h| h.starts_with("weight_")).count();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for &i in &prob_cols {
            data.push(rec[i].parse::<f64>().map_err(|_| {
                CliError::mismatch(format!("{}: bad probability `{}`", path.display(), &rec[i]))
            })?);
        }
        rows += 1;
    }
    let probs = Matrix::from_vec(rows, prob_cols.len(), data)?;
    Ok((probs, k))
}

fn evaluate_predictions(
    run: &str,
    path: &Path,
    data: &Path,
    cfg: &ExperimentConfig,
) -> CliResult<ReportRow> {
    let meta = read_meta(data)?;
    let target = read_csv_dataset(&data.join(TARGET_CSV), &meta.spec_hash, meta.seed)?
        .ok_or_else(|| CliError::mismatch("target.csv has no rows"))?
        .with_hidden(meta.target_hidden.clone())?;
    let (probs, k) = read_predictions(path)?;
    let oracle = oracle_batch(
        &meta.spec,
        target.features(),
        Domain::Target,
        cfg.bench.oracle_samples,
        &mut root_stream(meta.seed).split(streams::ORACLE),
    )?;
    let r = evaluate_against(&StoredPredictions { probs }, &target, &oracle)?;
    Ok(ReportRow {
        k: Some(k),
        seconds: None,
        ..ReportRow::from_metrics(run, &r)
    })
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Collects rows from each run directory. Missing or unreadable report
/// files become warnings.
pub fn collect(runs: &[PathBuf], data: Option<&Path>, cfg: &ExperimentConfig) -> Report {
    let mut report = Report::default();
    for dir in runs {
        let run = run_label(dir);
        let mut found = false;
        let metrics = dir.join(METRICS_JSON);
        if metrics.exists() {
            found = true;
            match std::fs::read_to_string(&metrics)
                .map_err(CliError::from)
                .and_then(|t| Ok(serde_json::from_str::<Vec<MetricsReport>>(&t)?))
            {
                Ok(rs) => report
                    .rows
                    .extend(rs.iter().map(|r| ReportRow::from_metrics(&run, r))),
                Err(e) => report.warnings.push(format!("{}: {e}", metrics.display())),
            }
        }
        let ablation = dir.join(ABLATION_JSON);
        if ablation.exists() {
            found = true;
            match std::fs::read_to_string(&ablation)
                .map_err(CliError::from)
                .and_then(|t| Ok(serde_json::from_str::<AblationTable>(&t)?))
            {
                Ok(t) => {
                    let mut rows = t.rows.clone();
                    rows.sort_by_key(|r| r.k);
                    report.rows.extend(rows.iter().map(|r| ReportRow {
                        run: run.clone(),
                        method: "tcm".into(),
                        k: Some(r.k),
                        accuracy: Some(r.accuracy),
                        oracle_agreement: Some(r.oracle_agreement),
                        tv_distance: Some(r.tv_distance),
                        purity_min: r.purity_min,
                        purity_mean: r.purity_mean,
                        seconds: Some(r.seconds),
                        ..ReportRow::default()
                    }));
                }
                Err(e) => report.warnings.push(format!("{}: {e}", ablation.display())),
            }
        }
        let preds = dir.join(PREDICTIONS_CSV);
        if preds.exists() {
            found = true;
            match data {
                Some(d) => match evaluate_predictions(&run, &preds, d, cfg) {
                    Ok(row) => report.rows.push(row),
                    Err(e) => report.warnings.push(format!("{}: {e}", preds.display())),
                },
                None => report.warnings.push(format!(
                    "{}: pass --data with the generated dataset to evaluate it",
                    preds.display()
                )),
            }
        }
        if !found {
            report.warnings.push(format!(
                "{}: no {METRICS_JSON}, {ABLATION_JSON} or {PREDICTIONS_CSV}",
                dir.display()
            ));
        }
    }
    report
}

/// Writes `out` (CSV) and `out` with a `.txt` extension, and prints the text.
pub fn cmd_report(
    runs: &[PathBuf],
    data: Option<&Path>,
    cfg: &ExperimentConfig,
    out: &Path,
) -> CliResult<()> {
    let report = collect(runs, data, cfg);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        crate::data::create_dir(parent)?;
    }
    write_file(out, report.to_csv()?)?;
    let text = report.to_text();
    write_file(&out.with_extension("txt"), &text)?;
    print!("{text}");
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}
