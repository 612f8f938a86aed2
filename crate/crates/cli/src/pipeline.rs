//! `gen`, `train`, `infer`, `experiment` and `ablate`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use tcm_core::bench::{ablate_k, generate_world, root_stream, run_experiment, streams};
use tcm_core::dcm::train_dcms;
use tcm_core::proxy::{infer_batch, train_stage2, ProxyModel};
use tcm_core::scm::DatasetMeta;
use tcm_core::ExperimentConfig;

use crate::checkpoint::{Checkpoint, DcmModel, DCM_FILE, PROXY_FILE};
use crate::data::{
    create_dir, read_csv_dataset, read_learner_data, write_csv_dataset, write_file, META_JSON,
    SOURCE_CSV, TARGET_CSV,
};
use crate::error::{CliError, CliResult};

pub const DCM_LOG: &str = "dcm.log.jsonl";
pub const PROXY_LOG: &str = "proxy.log.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    All,
}

fn write_jsonl<T: Serialize>(path: &Path, entries: &[T]) -> CliResult<()> {
    let f = File::create(path)
        .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn pretty_json<T: Serialize>(v: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Samples a world and writes `source.csv`, `target.csv` and `meta.json`.
/// Target labels only appear in the sidecar.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    cfg.validate()?;
    create_dir(out)?;
    let (spec, source, target) = generate_world(cfg, cfg.seed)?;
    write_csv_dataset(&out.join(SOURCE_CSV), &source.learner_view())?;
    write_csv_dataset(&out.join(TARGET_CSV), &target.learner_view())?;
    let meta = DatasetMeta {
        spec_hash: spec.hash(),
        seed: cfg.seed,
        config: cfg.scm.clone(),
        source_hidden: source.hidden()?.clone(),
        target_hidden: target.hidden()?.clone(),
        spec,
    };
    write_file(&out.join(META_JSON), pretty_json(&meta)?)?;
    eprintln!(
        "wrote {} source and {} target rows to {}",
        source.len(),
        target.len(),
        out.display()
    );
    Ok(())
}

/// Runs the requested training stages on a `gen` directory.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path, stage: Stage) -> CliResult<()> {
    cfg.validate()?;
    let d = read_learner_data(data)?;
    if d.source.dim() != cfg.scm.n {
        return Err(CliError::mismatch(format!(
            "data has {} features, config scm.n is {}",
            d.source.dim(),
            cfg.scm.n
        )));
    }
    create_dir(out)?;
    let root = root_stream(cfg.seed);
    let dcm_path = out.join(DCM_FILE);

    if stage != Stage::Two {
        let run = train_dcms(
            &cfg.dcm,
            &d.source,
            &d.target,
            &root.split(streams::DCM),
            &mut (),
        )?;
        write_jsonl(&out.join(DCM_LOG), &run.log)?;
        let wins = run.post_warmup_wins();
        let model = DcmModel {
            pairs: run.pairs,
            disc: run.disc,
            state: run.state,
        };
        Checkpoint::new(model, &d.spec_hash, cfg).save(&dcm_path)?;
        eprintln!(
            "stage 1: {} pairs, post-warmup wins {wins:?}",
            cfg.dcm.k_mechanisms
        );
    }
    if stage == Stage::One {
        return Ok(());
    }

    let dcm = Checkpoint::<DcmModel>::load(
        &dcm_path,
        "run `tcm train --stage 1` with the same --out first",
    )?;
    dcm.expect_spec(&d.spec_hash)?;
    let run = train_stage2(
        &cfg.proxy,
        cfg.scm.c,
        &dcm.model.pairs,
        &d.source,
        &d.target,
        &root.split(streams::PROXY),
    )?;
    write_jsonl(&out.join(PROXY_LOG), &run.log)?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    Checkpoint::new(run.model, &d.spec_hash, cfg).save(&out.join(PROXY_FILE))?;
    eprintln!("stage 2: proxy model written to {}", out.display());
    Ok(())
}

fn prediction_header(c: usize, k: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "class".to_string()];
    h.extend((0..c).map(|j| format!("prob_{j}")));
    h.extend((0..c).map(|j| format!("logit_{j}")));
    h.extend((0..k).map(|j| format!("weight_{j}")));
    h
}

/// Transported predictions for every row of `data`.
pub fn cmd_infer(checkpoints: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let ck = Checkpoint::<ProxyModel>::load(
        &checkpoints.join(PROXY_FILE),
        "run `tcm train --stage all` first",
    )?;
    let model = &ck.model;
    let rows = read_csv_dataset(data, &ck.spec_hash, 0)?;
    let x = match &rows {
        Some(d) if d.dim() != model.n => {
            return Err(CliError::mismatch(format!(
                "{} has {} features, checkpoint expects {}",
                data.display(),
                d.dim(),
                model.n
            )))
        }
        Some(d) => d.features().clone(),
        None => tcm_core::numerics::Matrix::zeros(0, model.n),
    };
    let preds = infer_batch(model, &x)?;

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let f = File::create(out)
        .map_err(|e| CliError::failure(format!("cannot write {}: {e}", out.display())))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(f));
    w.write_record(prediction_header(model.c, model.k()))?;
    for (i, p) in preds.iter().enumerate() {
        let mut rec = vec![i.to_string(), p.class.to_string()];
        rec.extend(p.probs.iter().map(|v| v.to_string()));
        rec.extend(p.logits.iter().map(|v| v.to_string()));
        rec.extend(p.weights.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    eprintln!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}

/// Full benchmark run: TCM, both baselines and the oracle ceiling.
pub fn cmd_experiment(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    create_dir(out)?;
    let res = run_experiment(cfg)?;
    let reports: Vec<_> = res.reports().into_iter().cloned().collect();
    write_file(&out.join(METRICS_JSON), pretty_json(&reports)?)?;
    write_jsonl(&out.join(DCM_LOG), &res.training.dcm.log)?;
    write_jsonl(&out.join(PROXY_LOG), &res.training.stage2.log)?;
    for r in &reports {
        println!(
            "{:<12} accuracy {:.4}  oracle agreement {:.4}  tv {:.4}",
            r.method, r.accuracy, r.oracle_agreement, r.tv_distance
        );
    }
    Ok(())
}

/// TCM across the configured `k` list and consecutive seeds.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    create_dir(out)?;
    let seeds: Vec<u64> = (0..cfg.bench.ablation_seeds as u64)
        .map(|i| cfg.seed + i)
        .collect();
    let table = ablate_k(cfg, &cfg.bench.ablation_ks, &seeds)?;
    write_file(&out.join(ABLATION_JSON), pretty_json(&table)?)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    write_file(&out.join(ABLATION_CSV), &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}
