use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::dcm::DcmConfig;
use crate::error::{Result, TcmError};
use crate::proxy::ProxyConfig;
use crate::scm::ScmConfig;

/// Everything one experiment needs. Unknown keys are rejected; a top-level
/// `_notes` value is kept verbatim for comments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(rename = "_notes", skip_serializing_if = "Option::is_none")]
    pub notes: Option<serde_json::Value>,
    pub seed: u64,
    pub scm: ScmConfig,
    pub dcm: DcmConfig,
    pub proxy: ProxyConfig,
    pub bench: BenchConfig,
    pub out: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            notes: None,
            seed: 0,
            scm: ScmConfig::default(),
            dcm: DcmConfig::default(),
            proxy: ProxyConfig::default(),
            bench: BenchConfig::default(),
            out: "runs/default".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scm.validate()?;
        self.dcm.validate()?;
        self.proxy.validate(Some(self.scm.n))?;
        self.bench.validate()
    }

    /// Parses and validates; serde errors become config errors naming the
    /// offending key where serde reports one.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.to_string();
            let field = msg
                .strip_prefix("unknown field `")
                .and_then(|m| m.split('`').next());
            let key = match (path.as_str(), field) {
                (".", Some(f)) => f.to_string(),
                (p, Some(f)) if !p.ends_with(f) => format!("{p}.{f}"),
                (".", None) => "config".to_string(),
                (p, _) => p.to_string(),
            };
            TcmError::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            TcmError::config("--config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let cfg = ExperimentConfig {
            notes: Some(serde_json::json!("benchmark defaults")),
            seed: 17,
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), cfg.to_json().unwrap());
    }

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_json("{}").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"scm": {"sigma": 1.0}}"#).unwrap_err();
        assert!(
            matches!(&err, TcmError::Config { key, .. } if key == "scm.sigma"),
            "{err}"
        );
        assert!(ExperimentConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn invalid_values_name_their_key() {
        let err = ExperimentConfig::from_json(r#"{"scm": {"sigma_u": -1.0}}"#).unwrap_err();
        assert!(err.to_string().contains("scm.sigma_u"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"proxy": {"latent_dim": 8}}"#).unwrap_err();
        assert!(err.to_string().contains("proxy.latent_dim"), "{err}");
    }
}
