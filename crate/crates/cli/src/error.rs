//! Single-line, machine-parsable failures with stable exit codes.

use std::fmt;
use std::path::Path;

use visir::benchmark::BenchmarkError;
use visir::corpus::CorpusError;
use visir::embedding::EmbeddingError;
use visir::index::IndexError;
use visir::mining::MiningError;
use visir::training::TrainingError;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub module: &'static str,
    pub kind: &'static str,
    pub msg: String,
    pub code: u8,
}

impl CliError {
    pub fn new(module: &'static str, kind: &'static str, code: u8, msg: impl Into<String>) -> Self {
        Self {
            module,
            kind,
            msg: msg.into(),
            code,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::new("cli", "config", EXIT_USAGE, msg)
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Self::new("cli", "usage", EXIT_USAGE, msg)
    }

    pub fn missing(path: &Path, e: std::io::Error) -> Self {
        Self::new("cli", "missing_input", EXIT_DATA, format!("{}: {e}", path.display()))
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("cli", "io", EXIT_DATA, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error: module={} kind={} msg={:?}", self.module, self.kind, self.msg)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let kind = match &e {
            CorpusError::Parse { .. } => "parse",
            CorpusError::Invalid { .. } => "invalid",
            CorpusError::Dangling { .. } => "dangling",
            CorpusError::Duplicate { .. } => "duplicate",
            CorpusError::Io { .. } => "io",
        };
        Self::new("corpus", kind, EXIT_DATA, e.to_string())
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        let (kind, code) = match &e {
            EmbeddingError::DimensionMismatch { .. } => ("dimension", EXIT_DATA),
            EmbeddingError::ZeroNorm => ("zero_norm", EXIT_NUMERIC),
            EmbeddingError::NonFinite(_) => ("non_finite", EXIT_NUMERIC),
            EmbeddingError::InvalidDim(_) => ("invalid_dim", EXIT_USAGE),
            EmbeddingError::Unsupported(_) => ("unsupported", EXIT_DATA),
            EmbeddingError::InvalidInput(_) => ("invalid_input", EXIT_DATA),
            EmbeddingError::Network { .. } => ("network", EXIT_DATA),
            EmbeddingError::Malformed(_) => ("malformed", EXIT_DATA),
            EmbeddingError::Format(_) => ("format", EXIT_DATA),
            EmbeddingError::Io { .. } => ("io", EXIT_DATA),
        };
        Self::new("embedding", kind, code, e.to_string())
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        if let IndexError::Storage(inner) = e {
            return inner.into();
        }
        let kind = match &e {
            IndexError::DimensionMismatch { .. } => "dimension",
            IndexError::InvalidK => "invalid_k",
            IndexError::DuplicateId(_) => "duplicate",
            IndexError::NotUnit { .. } => "not_unit",
            IndexError::UnknownId(_) => "unknown_id",
            IndexError::ExcludeCount { .. } => "exclude_count",
            IndexError::Storage(_) => unreachable!(),
        };
        let code = if matches!(e, IndexError::InvalidK) { EXIT_USAGE } else { EXIT_DATA };
        Self::new("index", kind, code, e.to_string())
    }
}

impl From<MiningError> for CliError {
    fn from(e: MiningError) -> Self {
        match e {
            MiningError::Index(inner) => inner.into(),
            MiningError::Embedding(inner) => inner.into(),
            MiningError::MissingFromIndex(_) => Self::new("mining", "missing_from_index", EXIT_DATA, e.to_string()),
            MiningError::CorpusTooSmall(_) => Self::new("mining", "corpus_too_small", EXIT_DATA, e.to_string()),
            MiningError::Config(_) => Self::new("mining", "config", EXIT_USAGE, e.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        let (kind, code) = match &e {
            TrainingError::Shape(_) => ("shape", EXIT_DATA),
            TrainingError::Temperature(_) => ("temperature", EXIT_USAGE),
            TrainingError::NonFinite(_) => ("non_finite", EXIT_NUMERIC),
            TrainingError::EmptyStage(_) => ("empty_stage", EXIT_DATA),
            TrainingError::Divergence { .. } => ("divergence", EXIT_NUMERIC),
            TrainingError::Features(_) => ("features", EXIT_DATA),
            TrainingError::Config(_) => ("config", EXIT_USAGE),
            TrainingError::Storage(_) => ("storage", EXIT_DATA),
        };
        Self::new("training", kind, code, e.to_string())
    }
}

impl From<BenchmarkError> for CliError {
    fn from(e: BenchmarkError) -> Self {
        match e {
            BenchmarkError::Embedding(inner) => inner.into(),
            BenchmarkError::Index(inner) => inner.into(),
            _ => {
                let kind = match &e {
                    BenchmarkError::GoldMissing { .. } => "gold_missing",
                    BenchmarkError::TargetTooSmall { .. } => "target_too_small",
                    BenchmarkError::InvalidTask { .. } => "invalid_task",
                    BenchmarkError::EmptyQueries(_) => "empty_queries",
                    BenchmarkError::UnknownScreenshot(_) => "unknown_screenshot",
                    BenchmarkError::Parse { .. } => "parse",
                    _ => "io",
                };
                Self::new("benchmark", kind, EXIT_DATA, e.to_string())
            }
        }
    }
}
