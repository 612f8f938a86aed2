//! Versioned JSON checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tcm_core::dcm::{DcmTrainerState, DomainDiscriminators, MechanismPair};
use tcm_core::graddiff::ParamStore;
use tcm_core::proxy::ProxyModel;
use tcm_core::ExperimentConfig;

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;
pub const DCM_FILE: &str = "dcm.ckpt.json";
pub const PROXY_FILE: &str = "proxy.ckpt.json";

/// A model that can be checkpointed.
pub trait Checkpointable: Serialize + DeserializeOwned {
    const KIND: &'static str;

    /// Every parameter slot with its shape, keyed by a stable path.
    fn shapes(&self) -> BTreeMap<String, [usize; 2]>;
}

fn add_shapes(out: &mut BTreeMap<String, [usize; 2]>, prefix: &str, p: &ParamStore) {
    for (name, m) in p.iter() {
        out.insert(format!("{prefix}{name}"), [m.rows(), m.cols()]);
    }
}

/// Stage-1 output: the pairs, the domain discriminators and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcmModel {
    pub pairs: Vec<MechanismPair>,
    pub disc: DomainDiscriminators,
    pub state: DcmTrainerState,
}

impl Checkpointable for DcmModel {
    const KIND: &'static str = "dcm";

    fn shapes(&self) -> BTreeMap<String, [usize; 2]> {
        let mut out = BTreeMap::new();
        for p in &self.pairs {
            add_shapes(&mut out, &format!("pair{}/", p.index), &p.params);
        }
        add_shapes(&mut out, "disc/", &self.disc.params);
        out
    }
}

impl Checkpointable for ProxyModel {
    const KIND: &'static str = "proxy";

    fn shapes(&self) -> BTreeMap<String, [usize; 2]> {
        let mut out = BTreeMap::new();
        add_shapes(&mut out, "", self.params());
        for p in &self.pairs {
            add_shapes(&mut out, &format!("pair{}/", p.index), &p.params);
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub kind: String,
    pub spec_hash: String,
    pub config: ExperimentConfig,
    pub shapes: BTreeMap<String, [usize; 2]>,
    pub model: T,
}

impl<T: Checkpointable> Checkpoint<T> {
    pub fn new(model: T, spec_hash: &str, config: &ExperimentConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: T::KIND.into(),
            spec_hash: spec_hash.into(),
            config: config.clone(),
            shapes: model.shapes(),
            model,
        }
    }

    pub fn to_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and checks version, kind and the shape table.
    pub fn from_json(text: &str) -> CliResult<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
            kind: String,
        }
        let h: Header = serde_json::from_str(text)
            .map_err(|e| CliError::mismatch(format!("not a checkpoint: {e}")))?;
        if h.format_version != FORMAT_VERSION {
            return Err(CliError::mismatch(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                h.format_version
            )));
        }
        if h.kind != T::KIND {
            return Err(CliError::mismatch(format!(
                "checkpoint holds a `{}` model, expected `{}`",
                h.kind,
                T::KIND
            )));
        }
        let ck: Self = serde_json::from_str(text)
            .map_err(|e| CliError::mismatch(format!("malformed {} checkpoint: {e}", T::KIND)))?;
        if ck.shapes != ck.model.shapes() {
            return Err(CliError::mismatch(format!(
                "{} checkpoint shape table does not match its parameters",
                T::KIND
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
    }

    /// Loads from `path`; a missing file is a missing prerequisite.
    pub fn load(path: &Path, remedy: &str) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::missing(path, remedy));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| e.context(path.display()))
    }

    /// Fails closed unless the checkpoint was trained on data from `spec_hash`.
    pub fn expect_spec(&self, spec_hash: &str) -> CliResult<()> {
        if self.spec_hash != spec_hash {
            return Err(CliError::mismatch(format!(
                "{} checkpoint was trained on spec {}, data is from spec {}",
                self.kind, self.spec_hash, spec_hash
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::exit;
    use tcm_core::dcm::{init_dcms, DcmConfig};
    use tcm_core::numerics::RngStream;

    fn dcm_model() -> DcmModel {
        let cfg = DcmConfig {
            k_mechanisms: 2,
            ..DcmConfig::default()
        };
        let (pairs, disc) = init_dcms(&cfg, 3, &RngStream::new(4, 0)).unwrap();
        DcmModel {
            pairs,
            disc,
            state: DcmTrainerState::new(&cfg),
        }
    }

    #[test]
    fn dcm_round_trip_is_bit_exact() {
        let ck = Checkpoint::new(dcm_model(), "abc", &ExperimentConfig::default());
        let back = Checkpoint::<DcmModel>::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back.model, ck.model);
        for (a, b) in ck.model.pairs.iter().zip(&back.model.pairs) {
            for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
                let bx: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                let by: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bx, by);
            }
        }
        assert_eq!(ck.to_json().unwrap(), back.to_json().unwrap());
    }

    #[test]
    fn version_kind_and_hash_fail_closed() {
        let ck = Checkpoint::new(dcm_model(), "abc", &ExperimentConfig::default());
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        v["format_version"] = serde_json::json!(FORMAT_VERSION + 1);
        let err = Checkpoint::<DcmModel>::from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.code, exit::MISMATCH);

        let err = Checkpoint::<ProxyModel>::from_json(&ck.to_json().unwrap()).unwrap_err();
        assert_eq!(err.code, exit::MISMATCH);
        assert!(err.message.contains("`dcm`"));

        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        v["shapes"]["disc/source.l0.w"] = serde_json::json!([1, 1]);
        assert!(Checkpoint::<DcmModel>::from_json(&v.to_string()).is_err());

        assert!(ck.expect_spec("abc").is_ok());
        assert_eq!(ck.expect_spec("def").unwrap_err().code, exit::MISMATCH);
    }

    #[test]
    fn missing_file_is_a_missing_prerequisite() {
        let err = Checkpoint::<DcmModel>::load(Path::new("/nonexistent/dcm.ckpt.json"), "run it")
            .unwrap_err();
        assert_eq!(err.code, exit::MISSING);
        assert!(err.message.contains("run it"));
    }
}
