//! Run configuration: a single TOML file whose sections mirror the core
//! types. Each subcommand takes the sections it needs and rejects a config
//! that lacks them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tnet::dgp::{DgpSpec, GraphKind};
use tnet::estimation::{BootstrapConfig, EstimandKind, EstimandSpec, Method};
use tnet::eval::{CorruptionMode, SweepConfig};
use tnet::{ModelConfig, TnetError, TrainConfig};

use crate::CliError;

/// File name of the config echo written into every output directory.
pub const ECHO_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimandEntry {
    pub kind: EstimandKind,
    /// `(t, z)` of the first arm; the conventional pair for `kind` when absent.
    pub first: Option<(u8, f64)>,
    pub second: Option<(u8, f64)>,
}

impl EstimandEntry {
    /// Resolves the pair, filling gaps from the default contrast at `z_bar`.
    pub fn resolve(&self, z_bar: f64) -> tnet::Result<EstimandSpec> {
        match (self.first, self.second) {
            (Some(a), Some(b)) => EstimandSpec::new(self.kind, a, b),
            (None, None) => EstimandSpec::default_for(self.kind, z_bar),
            _ => {
                let d = EstimandSpec::default_for(self.kind, z_bar)?;
                EstimandSpec::new(
                    self.kind,
                    self.first.unwrap_or(d.first),
                    self.second.unwrap_or(d.second),
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub held_out_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrConfig {
    pub mode: CorruptionMode,
    pub estimand: EstimandEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub n: Option<usize>,
    pub graph_seed: Option<u64>,
    pub dataset_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dgp: Option<DgpSpec>,
    pub graph: Option<GraphKind>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub estimands: Vec<EstimandEntry>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub bootstrap: Option<BootstrapConfig>,
    pub split: Option<SplitConfig>,
    pub dr: Option<DrConfig>,
    pub sweep: Option<SweepConfig>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Tnet]
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Core(TnetError::config(path, e.into_inner().message().trim().to_string()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical JSON echo of the parsed config; the hash covers these bytes.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.echo().as_bytes()))
    }

    pub fn require<'a, T>(value: &'a Option<T>, field: &str) -> Result<&'a T, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Core(TnetError::config(field, "required by this command")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(d) = &self.dgp {
            d.validate()?;
        }
        if let Some(b) = &self.bootstrap {
            b.validate()?;
        }
        if self.methods.is_empty() {
            return Err(TnetError::config("methods", "must name at least one method").into());
        }
        Ok(())
    }
}
