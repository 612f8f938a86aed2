//! Dataset directories written by `gen`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use tcm_core::scm::{read_dataset_csv, write_dataset_csv, Dataset, DatasetMeta, Domain};
use tcm_core::ExperimentConfig;

use crate::error::{CliError, CliResult};

pub const SOURCE_CSV: &str = "source.csv";
pub const TARGET_CSV: &str = "target.csv";
pub const META_JSON: &str = "meta.json";

const GEN_HINT: &str = "generate a dataset directory with `tcm gen --out DIR` first";

/// Loads a config file, or defaults, and applies a `--seed` override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config("--out", format!("cannot create {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
}

pub fn write_csv_dataset(path: &Path, d: &Dataset) -> CliResult<()> {
    let f = File::create(path)
        .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))?;
    write_dataset_csv(d, BufWriter::new(f))?;
    Ok(())
}

/// Reads a learner-facing CSV. A file with no rows gives `None`.
pub fn read_csv_dataset(path: &Path, spec_hash: &str, seed: u64) -> CliResult<Option<Dataset>> {
    if !path.exists() {
        return Err(CliError::missing(path, GEN_HINT));
    }
    let f = File::open(path)?;
    let data =
        read_dataset_csv(f).map_err(|e| CliError::mismatch(format!("{}: {e}", path.display())))?;
    if data.labels.is_empty() {
        return Ok(None);
    }
    Ok(Some(data.into_dataset(spec_hash.into(), seed)?))
}

/// The learner-visible part of `meta.json`.
#[derive(Clone, Debug, Deserialize)]
pub struct MetaHeader {
    pub spec_hash: String,
    pub seed: u64,
}

pub fn read_meta_header(dir: &Path) -> CliResult<MetaHeader> {
    let path = dir.join(META_JSON);
    if !path.exists() {
        return Err(CliError::missing(&path, GEN_HINT));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(&path)?)?)
}

/// Full sidecar including hidden columns; evaluation only.
pub fn read_meta(dir: &Path) -> CliResult<DatasetMeta> {
    let path = dir.join(META_JSON);
    if !path.exists() {
        return Err(CliError::missing(&path, GEN_HINT));
    }
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    meta.check()?;
    Ok(meta)
}

/// Learner-facing source and target datasets of a `gen` directory.
pub struct LearnerData {
    pub spec_hash: String,
    pub source: Dataset,
    pub target: Dataset,
}

pub fn read_learner_data(dir: &Path) -> CliResult<LearnerData> {
    let meta = read_meta_header(dir)?;
    let load = |name: &str, domain: Domain| -> CliResult<Dataset> {
        let path: PathBuf = dir.join(name);
        let d = read_csv_dataset(&path, &meta.spec_hash, meta.seed)?
            .ok_or_else(|| CliError::mismatch(format!("{} has no rows", path.display())))?;
        if d.domain != domain {
            return Err(CliError::mismatch(format!(
                "{} holds {} data, expected {}",
                path.display(),
                d.domain.tag(),
                domain.tag()
            )));
        }
        Ok(d)
    };
    let source = load(SOURCE_CSV, Domain::Source)?;
    let target = load(TARGET_CSV, Domain::Target)?;
    if source.dim() != target.dim() {
        return Err(CliError::mismatch(format!(
            "source has {} features, target {}",
            source.dim(),
            target.dim()
        )));
    }
    Ok(LearnerData {
        spec_hash: meta.spec_hash,
        source,
        target,
    })
}
