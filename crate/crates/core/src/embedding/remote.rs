//! Client for an external embedding service.
//!
//! Request: `POST <endpoint>` with body
//! `{"inputs": [...], "modality": "text" | "image" | "composed"}` where text
//! inputs are strings, image inputs are image locators, and composed inputs are
//! `{"image": <locator>, "text": <query>}` objects.
//! Response: `{"vectors": [[f32, ...], ...]}`, one vector per input, in order.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ComposedQuery, EmbedderBackend, Embedding, EmbeddingError};
use crate::corpus::Screenshot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub dim: usize,
    /// Additional attempts after a transient failure.
    pub max_retries: usize,
    pub timeout_secs: u64,
    pub batch_size: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/embed".into(),
            dim: 768,
            max_retries: 3,
            timeout_secs: 60,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RemoteInput {
    Text(String),
    Image(String),
    Composed { image: String, text: String },
}

impl RemoteInput {
    fn modality(&self) -> &'static str {
        match self {
            RemoteInput::Text(_) => "text",
            RemoteInput::Image(_) => "image",
            RemoteInput::Composed { .. } => "composed",
        }
    }

    fn to_json(&self) -> Value {
        match self {
            RemoteInput::Text(t) => Value::String(t.clone()),
            RemoteInput::Image(r) => Value::String(r.clone()),
            RemoteInput::Composed { image, text } => json!({ "image": image, "text": text }),
        }
    }
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

enum Attempt {
    Transient(String),
    Fatal(EmbeddingError),
}

/// Embeds one homogeneous batch, retrying transport failures and 429/5xx
/// responses up to `cfg.max_retries` extra times. Returned vectors are
/// unit-normalized.
pub fn remote_embed(
    cfg: &RemoteConfig,
    batch: &[RemoteInput],
) -> Result<Vec<Embedding<f32>>, EmbeddingError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
        .http_status_as_error(false)
        .build()
        .into();
    embed_with_agent(&agent, cfg, batch)
}

fn embed_with_agent(
    agent: &ureq::Agent,
    cfg: &RemoteConfig,
    batch: &[RemoteInput],
) -> Result<Vec<Embedding<f32>>, EmbeddingError> {
    let first = batch
        .first()
        .ok_or_else(|| EmbeddingError::InvalidInput("empty batch".into()))?;
    let modality = first.modality();
    if batch.iter().any(|b| b.modality() != modality) {
        return Err(EmbeddingError::InvalidInput("mixed modalities in one batch".into()));
    }
    let body = json!({
        "inputs": batch.iter().map(RemoteInput::to_json).collect::<Vec<_>>(),
        "modality": modality,
    })
    .to_string();

    let attempts = cfg.max_retries + 1;
    let mut last_error = String::new();
    for _ in 0..attempts {
        match attempt(agent, &cfg.endpoint, &body) {
            Ok(text) => return decode(&text, batch.len(), cfg.dim),
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Transient(msg)) => last_error = msg,
        }
    }
    Err(EmbeddingError::Network {
        endpoint: cfg.endpoint.clone(),
        attempts,
        message: last_error,
    })
}

fn attempt(agent: &ureq::Agent, endpoint: &str, body: &str) -> Result<String, Attempt> {
    let mut resp = agent
        .post(endpoint)
        .header("content-type", "application/json")
        .send(body)
        .map_err(|e| Attempt::Transient(e.to_string()))?;
    let status = resp.status().as_u16();
    if status == 429 || status >= 500 {
        return Err(Attempt::Transient(format!("HTTP {status}")));
    }
    if !(200..300).contains(&status) {
        return Err(Attempt::Fatal(EmbeddingError::Malformed(format!("HTTP {status}"))));
    }
    resp.body_mut()
        .read_to_string()
        .map_err(|e| Attempt::Transient(e.to_string()))
}

fn decode(text: &str, expected: usize, dim: usize) -> Result<Vec<Embedding<f32>>, EmbeddingError> {
    let parsed: EmbedResponse =
        serde_json::from_str(text).map_err(|e| EmbeddingError::Malformed(e.to_string()))?;
    if parsed.vectors.len() != expected {
        return Err(EmbeddingError::Malformed(format!(
            "{} vectors for {} inputs",
            parsed.vectors.len(),
            expected
        )));
    }
    parsed
        .vectors
        .into_iter()
        .map(|v| {
            if v.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            Embedding::unit(v)
        })
        .collect()
}

/// [`EmbedderBackend`] backed by the remote service. Screenshots are sent by
/// their `image_ref`; composed inputs are supported natively.
pub struct RemoteEmbedder {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteConfig) -> Result<Self, EmbeddingError> {
        if cfg.dim < 2 {
            return Err(EmbeddingError::InvalidDim(cfg.dim));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, agent })
    }

    /// Embeds any number of inputs in `batch_size` chunks, preserving order.
    pub fn embed_many(&self, inputs: &[RemoteInput]) -> Result<Vec<Embedding<f32>>, EmbeddingError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.cfg.batch_size.max(1)) {
            out.extend(embed_with_agent(&self.agent, &self.cfg, chunk)?);
        }
        Ok(out)
    }

    fn one(&self, input: RemoteInput) -> Result<Embedding<f32>, EmbeddingError> {
        let mut v = embed_with_agent(&self.agent, &self.cfg, &[input])?;
        Ok(v.remove(0))
    }
}

impl EmbedderBackend for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding<f32>, EmbeddingError> {
        self.one(RemoteInput::Text(text.to_owned()))
    }

    fn embed_screenshot(&self, screenshot: &Screenshot) -> Result<Embedding<f32>, EmbeddingError> {
        self.one(RemoteInput::Image(screenshot.image_ref.clone()))
    }

    fn supports_composed(&self) -> bool {
        true
    }

    fn embed_composed(
        &self,
        screenshot: &Screenshot,
        query: &ComposedQuery,
    ) -> Result<Embedding<f32>, EmbeddingError> {
        self.one(RemoteInput::Composed {
            image: screenshot.image_ref.clone(),
            text: query.query_text.clone(),
        })
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Embedding<f32>>, EmbeddingError> {
        let inputs: Vec<_> = texts.iter().map(|t| RemoteInput::Text((*t).to_owned())).collect();
        self.embed_many(&inputs)
    }

    fn embed_screenshots(
        &self,
        screenshots: &[&Screenshot],
    ) -> Result<Vec<Embedding<f32>>, EmbeddingError> {
        let inputs: Vec<_> = screenshots
            .iter()
            .map(|s| RemoteInput::Image(s.image_ref.clone()))
            .collect();
        self.embed_many(&inputs)
    }
}
