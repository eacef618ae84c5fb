//! Representation layer: embedding vectors, backends, composed-query fusion
//! and the prompt layout used by generative (MLLM-style) encoders.

mod remote;
mod store;

use std::path::PathBuf;

use crate::corpus::Screenshot;
use crate::rng::SplitMix64;
use crate::scalar::{dot64, norm64, Scalar};

pub use remote::{remote_embed, RemoteConfig, RemoteEmbedder, RemoteInput};
pub use store::{EmbeddingStore, StoredScalar, STORE_MAGIC, STORE_VERSION};

/// Tolerance on the unit-norm contract for retrieval-ready vectors.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("non-finite entry at position {0}")]
    NonFinite(usize),
    #[error("embedding dimension must be at least 2, got {0}")]
    InvalidDim(usize),
    #[error("unsupported by backend: {0}")]
    Unsupported(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("request to {endpoint} failed after {attempts} attempt(s): {message}")]
    Network {
        endpoint: String,
        attempts: usize,
        message: String,
    },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("embedding file: {0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Dense real vector. Dot products and norms accumulate in 64 bits.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    values: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(values: Vec<T>) -> Result<Self, EmbeddingError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![T::zero(); dim],
        }
    }

    /// Unit-normalized copy of `values`.
    pub fn unit(values: Vec<T>) -> Result<Self, EmbeddingError> {
        Self::new(values)?.normalized()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm64(&self.values)
    }

    /// True when the L2 norm is within [`UNIT_NORM_TOL`] of one.
    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }

    pub fn dot(&self, other: &Self) -> Result<f64, EmbeddingError> {
        self.check_dim(other.dim())?;
        Ok(dot64(&self.values, &other.values))
    }

    pub fn normalized(&self) -> Result<Self, EmbeddingError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(EmbeddingError::ZeroNorm);
        }
        Ok(Self {
            values: self
                .values
                .iter()
                .map(|&v| T::from_f64_lossy(v.to_f64_lossy() / n))
                .collect(),
        })
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), EmbeddingError> {
        if self.dim() != expected {
            return Err(EmbeddingError::DimensionMismatch {
                expected,
                found: self.dim(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Embedding<U> {
        Embedding {
            values: self
                .values
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Composes a screenshot embedding with a query embedding by addition.
///
/// Each non-zero constituent is normalized first and the sum is normalized
/// again, so the result is unit-norm and symmetric in its arguments.
pub fn fuse_clip<T: Scalar>(
    screenshot: &Embedding<T>,
    query: &Embedding<T>,
) -> Result<Embedding<T>, EmbeddingError> {
    screenshot.check_dim(query.dim())?;
    let unit_or_zero = |e: &Embedding<T>| -> Vec<f64> {
        let n = e.norm();
        e.values
            .iter()
            .map(|&v| if n > 0.0 { v.to_f64_lossy() / n } else { 0.0 })
            .collect()
    };
    let a = unit_or_zero(screenshot);
    let b = unit_or_zero(query);
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let n = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok(Embedding {
        values: sum.into_iter().map(|v| T::from_f64_lossy(v / n)).collect(),
    })
}

/// A screenshot plus a conditioned query, tagged with the task it serves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedQuery {
    pub screenshot_id: String,
    pub query_text: String,
    pub task_tag: String,
}

impl ComposedQuery {
    pub fn new(
        screenshot_id: impl Into<String>,
        query_text: impl Into<String>,
        task_tag: impl Into<String>,
    ) -> Result<Self, EmbeddingError> {
        let cq = Self {
            screenshot_id: screenshot_id.into(),
            query_text: query_text.into(),
            task_tag: task_tag.into(),
        };
        if cq.query_text.is_empty() {
            return Err(EmbeddingError::InvalidInput("query_text is empty".into()));
        }
        Ok(cq)
    }
}

/// Stand-in for the visual tokens of the screenshot inside a prompt.
pub const SCREENSHOT_PLACEHOLDER: &str = "<SCREENSHOT>";
/// Marker whose output state represents the whole input.
pub const EOS_MARKER: &str = "[EOS]";

/// Renders `[Task]: <task>, [Query]: <SCREENSHOT>, <query>, [EOS]`.
pub fn format_mllm_prompt(cq: &ComposedQuery) -> String {
    format!(
        "[Task]: {}, [Query]: {}, {}, {}",
        cq.task_tag, SCREENSHOT_PLACEHOLDER, cq.query_text, EOS_MARKER
    )
}

/// Deterministic unit vector for `key`: Gaussian entries drawn from the
/// SplitMix64 stream keyed by `(seed, key)`, then normalized.
pub fn mock_embed(seed: u64, key: &str, dim: usize) -> Result<Embedding<f32>, EmbeddingError> {
    if dim < 2 {
        return Err(EmbeddingError::InvalidDim(dim));
    }
    let mut rng = SplitMix64::keyed(seed, key);
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            return Embedding::new(raw.iter().map(|v| (v / n) as f32).collect());
        }
    }
}

/// An embedding model. Implementations must be deterministic for identical
/// inputs and return vectors of length [`EmbedderBackend::dim`].
pub trait EmbedderBackend: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<Embedding<f32>, EmbeddingError>;

    fn embed_screenshot(&self, screenshot: &Screenshot) -> Result<Embedding<f32>, EmbeddingError>;

    /// Whether [`EmbedderBackend::embed_composed`] is natively available.
    fn supports_composed(&self) -> bool {
        false
    }

    fn embed_composed(
        &self,
        _screenshot: &Screenshot,
        _query: &ComposedQuery,
    ) -> Result<Embedding<f32>, EmbeddingError> {
        Err(EmbeddingError::Unsupported("composed input".into()))
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Embedding<f32>>, EmbeddingError> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }

    fn embed_screenshots(
        &self,
        screenshots: &[&Screenshot],
    ) -> Result<Vec<Embedding<f32>>, EmbeddingError> {
        screenshots.iter().map(|s| self.embed_screenshot(s)).collect()
    }
}

/// Native composed embedding when the backend has one, otherwise additive
/// fusion of the screenshot and query embeddings.
pub fn embed_composed_or_fuse(
    backend: &dyn EmbedderBackend,
    screenshot: &Screenshot,
    query: &ComposedQuery,
) -> Result<Embedding<f32>, EmbeddingError> {
    if backend.supports_composed() {
        backend.embed_composed(screenshot, query)
    } else {
        let s = backend.embed_screenshot(screenshot)?;
        let q = backend.embed_text(&query.query_text)?;
        fuse_clip(&s, &q)
    }
}

/// Hash-based backend for tests and dry runs.
///
/// Texts are keyed by their content and screenshots by their id, so a text
/// equal to a screenshot id embeds to the same vector as that screenshot.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub seed: u64,
    dim: usize,
    composed: bool,
}

impl MockBackend {
    pub fn new(seed: u64, dim: usize) -> Result<Self, EmbeddingError> {
        if dim < 2 {
            return Err(EmbeddingError::InvalidDim(dim));
        }
        Ok(Self {
            seed,
            dim,
            composed: false,
        })
    }

    /// Enables native composed embeddings (keyed by id, task and query).
    pub fn with_composed(mut self, enabled: bool) -> Self {
        self.composed = enabled;
        self
    }
}

impl EmbedderBackend for MockBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding<f32>, EmbeddingError> {
        mock_embed(self.seed, text, self.dim)
    }

    fn embed_screenshot(&self, screenshot: &Screenshot) -> Result<Embedding<f32>, EmbeddingError> {
        mock_embed(self.seed, &screenshot.id, self.dim)
    }

    fn supports_composed(&self) -> bool {
        self.composed
    }

    fn embed_composed(
        &self,
        screenshot: &Screenshot,
        query: &ComposedQuery,
    ) -> Result<Embedding<f32>, EmbeddingError> {
        if !self.composed {
            return Err(EmbeddingError::Unsupported("composed input".into()));
        }
        let key = format!(
            "{}\u{1f}{}\u{1f}{}",
            screenshot.id, query.task_tag, query.query_text
        );
        mock_embed(self.seed, &key, self.dim)
    }
}
