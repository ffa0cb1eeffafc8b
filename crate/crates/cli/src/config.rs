use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trafficmoe::model::{ModelConfig, TrainConfig};
use trafficmoe::preprocess::PreprocessConfig;

use crate::error::CliError;

/// Everything one run needs besides the paths given on the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Label attached to every flow produced by `ingest`.
    pub label: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.preprocess.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let (p, m) = (&self.preprocess, &self.model);
        if (p.packets, p.header_bytes, p.payload_bytes) != (m.packets, m.header_bytes, m.payload_bytes) {
            return Err(CliError::Usage(format!(
                "preprocess shape {}x({}+{}) differs from model shape {}x({}+{})",
                p.packets, p.header_bytes, p.payload_bytes, m.packets, m.header_bytes, m.payload_bytes
            )));
        }
        Ok(())
    }
}

/// `out` with `suffix` appended to its file name.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n")?;
    Ok(())
}
