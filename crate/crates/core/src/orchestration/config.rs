use std::collections::BTreeSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{MergeMode, DEFAULT_KL_CAP, DEFAULT_LAMBDA, DEFAULT_MU};
use crate::data::{self, DataError, FederationLayout, Task};
use crate::training::{ModelKind, TrainerSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("failed to parse {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("layout: {0}")]
    Layout(#[from] DataError),
    #[error("unknown site id {0}")]
    UnknownSite(u64),
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    Fedprox,
    Gcml,
    Individual,
    Pooled,
}

impl Algorithm {
    pub fn is_centralized(self) -> bool {
        matches!(self, Algorithm::Fedavg | Algorithm::Fedprox)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedprox => "fedprox",
            Algorithm::Gcml => "gcml",
            Algorithm::Individual => "individual",
            Algorithm::Pooled => "pooled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Dropped sites keep training locally but do not communicate.
    #[default]
    Disconnect,
    /// Dropped sites neither train nor communicate.
    Shutdown,
}

impl DropoutMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DropoutMode::Disconnect => "disconnect",
            DropoutMode::Shutdown => "shutdown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSettings {
    #[serde(default)]
    pub n_max: usize,
    #[serde(default)]
    pub mode: DropoutMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteAddress {
    pub id: u64,
    pub host: String,
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum LayoutRef {
    Path(PathBuf),
    Inline(FederationLayout),
}

/// On-disk shape of a federation config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    algorithm: Algorithm,
    rounds: u64,
    #[serde(default)]
    mu: Option<f64>,
    #[serde(default)]
    lambda: Option<f64>,
    #[serde(default)]
    merge_mode: MergeMode,
    #[serde(default)]
    kl_cap: Option<f64>,
    #[serde(default)]
    dropout: DropoutSettings,
    trainer: TrainerSpec,
    layout: LayoutRef,
    #[serde(default)]
    sites: Vec<SiteAddress>,
    #[serde(default)]
    server: Option<String>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    round_timeout_ms: Option<u64>,
    #[serde(default)]
    read_timeout_ms: Option<u64>,
    #[serde(default)]
    rejoin_with_global: Option<bool>,
}

pub const DEFAULT_ROUND_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_SERVER_ADDR: &str = "127.0.0.1:7700";

/// A fully resolved, validated federation configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub rounds: u64,
    pub mu: f64,
    pub lambda: f64,
    pub merge_mode: MergeMode,
    pub kl_cap: f64,
    pub dropout: DropoutSettings,
    pub trainer: TrainerSpec,
    pub layout: FederationLayout,
    /// One entry per layout site, in partition order.
    pub sites: Vec<SiteAddress>,
    pub server: String,
    pub seed: u64,
    pub round_timeout: Duration,
    pub read_timeout: Duration,
    /// Centralized mode: a rejoining site restarts from the current global
    /// model rather than its stale local one.
    pub rejoin_with_global: bool,
}

impl FederationConfig {
    /// Config with defaults for everything but the essentials; site
    /// addresses are loopback with ephemeral ports.
    pub fn new(algorithm: Algorithm, rounds: u64, trainer: TrainerSpec, layout: FederationLayout) -> Self {
        let sites = default_sites(layout.site_count);
        Self {
            algorithm,
            rounds,
            mu: DEFAULT_MU,
            lambda: DEFAULT_LAMBDA,
            merge_mode: MergeMode::default(),
            kl_cap: DEFAULT_KL_CAP,
            dropout: DropoutSettings::default(),
            trainer,
            layout,
            sites,
            server: DEFAULT_SERVER_ADDR.into(),
            seed: 0,
            round_timeout: DEFAULT_ROUND_TIMEOUT,
            read_timeout: crate::wire::DEFAULT_READ_TIMEOUT,
            rejoin_with_global: true,
        }
    }

    /// Applies one seed to training, data generation and the simulators.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.trainer.seed = seed;
        self.layout.seed = seed;
        self
    }

    pub fn site_ids(&self) -> Vec<u64> {
        self.sites.iter().map(|s| s.id).collect()
    }

    /// Partition index of `site_id`.
    pub fn site_index(&self, site_id: u64) -> Result<usize, ConfigError> {
        self.sites
            .iter()
            .position(|s| s.id == site_id)
            .ok_or(ConfigError::UnknownSite(site_id))
    }

    pub fn server_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.server
            .parse()
            .map_err(|e| invalid("server", format!("`{}`: {e}", self.server)))
    }

    /// Serializes to the config file format with the layout inlined;
    /// [`parse_config`] reads it back to an equal config.
    pub fn to_toml(&self) -> String {
        let file = ConfigFile {
            algorithm: self.algorithm,
            rounds: self.rounds,
            mu: Some(self.mu),
            lambda: Some(self.lambda),
            merge_mode: self.merge_mode,
            kl_cap: Some(self.kl_cap),
            dropout: self.dropout,
            trainer: self.trainer.clone(),
            layout: LayoutRef::Inline(self.layout.clone()),
            sites: self.sites.clone(),
            server: Some(self.server.clone()),
            seed: self.seed,
            round_timeout_ms: Some(self.round_timeout.as_millis() as u64),
            read_timeout_ms: Some(self.read_timeout.as_millis() as u64),
            rejoin_with_global: Some(self.rejoin_with_global),
        };
        toml::to_string(&file).expect("config fields are representable in TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(invalid("mu", "must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid("lambda", "must lie in [0, 1]"));
        }
        if !(self.kl_cap.is_finite() && self.kl_cap > 0.0) {
            return Err(invalid("kl_cap", "must be positive"));
        }
        self.trainer.validate().map_err(|e| invalid("trainer", e.to_string()))?;
        self.layout.validate()?;
        let n = self.layout.site_count;
        if self.dropout.n_max >= n {
            return Err(invalid("dropout.n_max", format!("must be below the site count {n}")));
        }
        if self.sites.len() != n {
            return Err(invalid("sites", format!("expected {n} entries (layout site_count), found {}", self.sites.len())));
        }
        let unique: BTreeSet<_> = self.sites.iter().map(|s| s.id).collect();
        if unique.len() != n {
            return Err(invalid("sites", "site ids must be unique"));
        }
        match (&self.layout.task, self.trainer.model_kind) {
            (Task::Classification { class_count, input_dim, .. }, ModelKind::SoftmaxClassifier) => {
                if *class_count != self.trainer.class_count || *input_dim != self.trainer.input_dim {
                    return Err(invalid("trainer", "input_dim/class_count must match the layout task"));
                }
            }
            (Task::Regression { input_dim, .. }, ModelKind::LinearRegression) => {
                if *input_dim != self.trainer.input_dim {
                    return Err(invalid("trainer", "input_dim must match the layout task"));
                }
            }
            _ => return Err(invalid("trainer", "model_kind does not fit the layout task")),
        }
        if self.algorithm == Algorithm::Gcml && !self.trainer.is_classifier() {
            return Err(invalid("trainer", "gcml requires a classifier"));
        }
        Ok(())
    }
}

fn default_sites(n: usize) -> Vec<SiteAddress> {
    (0..n as u64)
        .map(|id| SiteAddress { id, host: "127.0.0.1".into(), port: 0 })
        .collect()
}

pub fn parse_config(text: &str, origin: &Path) -> Result<FederationConfig, ConfigError> {
    let file: ConfigFile = toml::from_str(text).map_err(|source| ConfigError::Parse {
        path: origin.to_path_buf(),
        source,
    })?;
    let layout = match file.layout {
        LayoutRef::Inline(l) => l,
        LayoutRef::Path(p) => {
            let p = match origin.parent() {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p,
            };
            data::load_layout(&p)?
        }
    };
    let sites = if file.sites.is_empty() {
        default_sites(layout.site_count)
    } else {
        file.sites
    };
    let config = FederationConfig {
        algorithm: file.algorithm,
        rounds: file.rounds,
        mu: file.mu.unwrap_or(DEFAULT_MU),
        lambda: file.lambda.unwrap_or(DEFAULT_LAMBDA),
        merge_mode: file.merge_mode,
        kl_cap: file.kl_cap.unwrap_or(DEFAULT_KL_CAP),
        dropout: file.dropout,
        trainer: file.trainer,
        layout,
        sites,
        server: file.server.unwrap_or_else(|| DEFAULT_SERVER_ADDR.into()),
        seed: file.seed,
        round_timeout: file.round_timeout_ms.map(Duration::from_millis).unwrap_or(DEFAULT_ROUND_TIMEOUT),
        read_timeout: file
            .read_timeout_ms
            .map(Duration::from_millis)
            .unwrap_or(crate::wire::DEFAULT_READ_TIMEOUT),
        rejoin_with_global: file.rejoin_with_global.unwrap_or(true),
    };
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<FederationConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config(&text, path)
}
