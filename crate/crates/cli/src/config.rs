//! Run configuration: a sectioned TOML file, `VISIR__SECTION__KEY`
//! environment overrides, then command-line flags, in increasing priority.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use visir::corpus::FilterConfig;
use visir::embedding::RemoteConfig;
use visir::mining::MiningConfig;
use visir::training::TrainerConfig;

use crate::error::CliError;

pub const ENV_PREFIX: &str = "VISIR__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed; copied into every stochastic stage.
    pub seed: u64,
    /// Worker cap; 0 means one per core (one for `train`).
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, threads: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Mock embedding width.
    pub dim: usize,
    /// Seed of the mock embedding hash; independent of the run seed so that
    /// reseeding a run does not change the embedding model.
    pub mock_seed: u64,
    /// Whether the mock backend embeds composed queries natively.
    pub composed: bool,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            dim: 64,
            mock_seed: 0,
            composed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub k: usize,
    /// Candidate corpus size per screenshot task.
    pub target_size: usize,
    /// Similarity-mined negatives per SR/CSR query.
    pub negatives_per_query: usize,
    pub min_query_words: usize,
    pub max_query_chars: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            k: 1,
            target_size: 5000,
            negatives_per_query: 3,
            min_query_words: 2,
            max_query_chars: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResizeSection {
    pub max_tokens: u64,
}

impl Default for ResizeSection {
    fn default() -> Self {
        Self {
            max_tokens: visir::resize::DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub backend: BackendSection,
    pub remote: RemoteConfig,
    pub filter: FilterConfig,
    pub mining: MiningConfig,
    pub train: TrainerConfig,
    pub bench: BenchSection,
    pub resize: ResizeSection,
}

/// Parses an override as a TOML value, falling back to a plain string.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

fn set(table: &mut Table, section: &str, key: &str, value: Value) -> Result<(), CliError> {
    let entry = table
        .entry(section.to_owned())
        .or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(key.to_owned(), value);
            Ok(())
        }
        _ => Err(CliError::config(format!("{section:?} is not a section"))),
    }
}

/// CLI flags that override configuration values.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub backend: Option<BackendKind>,
}

pub fn load(
    path: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &Overrides,
) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::missing(p, e))?;
            text.parse::<Table>()
                .map_err(|e| CliError::config(format!("{}: {}", p.display(), e.message())))?
        }
        None => Table::new(),
    };
    let mut env: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    env.sort();
    for (name, raw) in env {
        let rest = &name[ENV_PREFIX.len()..];
        let Some((section, key)) = rest.split_once("__") else {
            return Err(CliError::config(format!("{name}: expected {ENV_PREFIX}SECTION__KEY")));
        };
        set(&mut table, &section.to_lowercase(), &key.to_lowercase(), parse_scalar(&raw))?;
    }
    if let Some(seed) = flags.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::config("seed must fit in 63 bits"))?;
        set(&mut table, "run", "seed", Value::Integer(seed))?;
    }
    if let Some(threads) = flags.threads {
        set(&mut table, "run", "threads", Value::Integer(threads as i64))?;
    }
    if let Some(kind) = flags.backend {
        let name = match kind {
            BackendKind::Mock => "mock",
            BackendKind::Remote => "remote",
        };
        set(&mut table, "backend", "kind", Value::String(name.into()))?;
    }
    let mut cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.message().to_owned()))?;
    cfg.mining.seed = cfg.run.seed;
    cfg.train.seed = cfg.run.seed;
    cfg.filter.validate().map_err(CliError::config)?;
    Ok(cfg)
}

impl RunConfig {
    /// The effective configuration as TOML.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
