//! Two-stage contrastive training of a linear dual encoder.
//!
//! Each tower is a single linear map followed by unit normalization. Stage one
//! aligns screenshots with their captions using a bidirectional InfoNCE loss;
//! stage two fine-tunes on (query, screenshot) samples with one direction of
//! the loss and hard negatives appended to the softmax denominator.
//!
//! Gradients are derived by hand (softmax cross-entropy, then the
//! normalization Jacobian, then the linear map) and checked against central
//! finite differences in the tests.

use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Screenshot};
use crate::embedding::{embed_composed_or_fuse, ComposedQuery, EmbedderBackend, EmbeddingStore};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no training data for stage {0}")]
    EmptyStage(u8),
    #[error("loss diverged at stage {stage} step {step}")]
    Divergence { stage: u8, step: usize },
    #[error("feature extraction failed: {0}")]
    Features(String),
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("parameter file: {0}")]
    Storage(String),
}

/// Which hard negatives enter each query's softmax denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSharing {
    /// Every hard negative in the batch competes with every query.
    #[default]
    Shared,
    /// Row `i` of the hard negatives only competes with query `i`.
    PerQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Bidirectional screenshot-caption alignment.
    Pretrain = 1,
    /// Query-to-screenshot fine-tuning with hard negatives.
    Finetune = 2,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

fn check_finite<T: Scalar>(a: &ArrayView2<T>, what: &'static str) -> Result<(), TrainingError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TrainingError::NonFinite(what))
    }
}

/// Value, similarity matrix and input gradients of one InfoNCE direction.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput<T> {
    pub loss: T,
    /// `u_i · c_j` for every anchor `i` and candidate `j` (positives first,
    /// then hard negatives).
    pub similarity: Array2<T>,
    pub grad_anchors: Array2<T>,
    pub grad_positives: Array2<T>,
    pub grad_extras: Option<Array2<T>>,
}

/// InfoNCE over `anchors` against row-aligned `positives` plus optional
/// `extra_negatives`:
///
/// `loss = −(1/B) Σ_i log( exp(u_i·v_i/τ) / Σ_j exp(u_i·c_j/τ) )`
///
/// with candidates `c` = all positives followed by the extra negatives
/// (restricted to row `i` of the extras under [`NegativeSharing::PerQuery`]).
/// Uses row-max subtraction.
pub fn contrastive_loss_with_grads<T: Scalar>(
    anchors: ArrayView2<T>,
    positives: ArrayView2<T>,
    temperature: T,
    extra_negatives: Option<ArrayView2<T>>,
    sharing: NegativeSharing,
) -> Result<ContrastiveOutput<T>, TrainingError> {
    let b = anchors.nrows();
    let d = anchors.ncols();
    if b == 0 {
        return Err(TrainingError::Shape("empty batch".into()));
    }
    if positives.nrows() != b || positives.ncols() != d {
        return Err(TrainingError::Shape(format!(
            "anchors {:?} vs positives {:?}",
            anchors.shape(),
            positives.shape()
        )));
    }
    if !(temperature > T::zero()) {
        return Err(TrainingError::Temperature(temperature.to_f64_lossy()));
    }
    check_finite(&anchors, "anchors")?;
    check_finite(&positives, "positives")?;
    if let Some(x) = &extra_negatives {
        if x.ncols() != d {
            return Err(TrainingError::Shape(format!(
                "extra negatives have {} columns, expected {d}",
                x.ncols()
            )));
        }
        if sharing == NegativeSharing::PerQuery && x.nrows() != b {
            return Err(TrainingError::Shape(format!(
                "per-query negatives need {b} rows, got {}",
                x.nrows()
            )));
        }
        check_finite(x, "extra negatives")?;
    }

    let candidates = match &extra_negatives {
        Some(x) => concatenate(Axis(0), &[positives.view(), x.view()])
            .map_err(|e| TrainingError::Shape(e.to_string()))?,
        None => positives.to_owned(),
    };
    let n_cand = candidates.nrows();
    let similarity = anchors.dot(&candidates.t());
    let inv_tau = T::one() / temperature;
    let batch = T::from_usize(b).expect("batch size fits the scalar");

    // d loss / d similarity
    let mut grad_sim = Array2::<T>::zeros((b, n_cand));
    let mut total = T::zero();
    for i in 0..b {
        let active = |j: usize| j < b || sharing == NegativeSharing::Shared || j == b + i;
        let row = similarity.row(i);
        let max = (0..n_cand)
            .filter(|&j| active(j))
            .map(|j| row[j] * inv_tau)
            .fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for j in (0..n_cand).filter(|&j| active(j)) {
            let e = (row[j] * inv_tau - max).exp();
            grad_sim[[i, j]] = e;
            denom = denom + e;
        }
        let lse = max + denom.ln();
        total = total + (lse - row[i] * inv_tau);
        for j in (0..n_cand).filter(|&j| active(j)) {
            let p = grad_sim[[i, j]] / denom;
            let target = if j == i { T::one() } else { T::zero() };
            grad_sim[[i, j]] = (p - target) * inv_tau / batch;
        }
    }
    let loss = total / batch;
    if !loss.is_finite() {
        return Err(TrainingError::NonFinite("loss"));
    }

    let grad_anchors = grad_sim.dot(&candidates);
    let grad_candidates = grad_sim.t().dot(&anchors);
    let grad_positives = grad_candidates.slice(s![..b, ..]).to_owned();
    let grad_extras = extra_negatives
        .as_ref()
        .map(|_| grad_candidates.slice(s![b.., ..]).to_owned());

    Ok(ContrastiveOutput {
        loss: loss.max(T::zero()),
        similarity,
        grad_anchors,
        grad_positives,
        grad_extras,
    })
}

/// Loss value and similarity matrix of one InfoNCE direction (shared negatives).
pub fn contrastive_loss<T: Scalar>(
    anchors: ArrayView2<T>,
    positives: ArrayView2<T>,
    temperature: T,
    extra_negatives: Option<ArrayView2<T>>,
) -> Result<(T, Array2<T>), TrainingError> {
    let out = contrastive_loss_with_grads(
        anchors,
        positives,
        temperature,
        extra_negatives,
        NegativeSharing::Shared,
    )?;
    Ok((out.loss, out.similarity))
}

/// Bidirectional screenshot-caption loss: `L(E_s, E_c) + L(E_c, E_s)`.
pub fn stage1_loss<T: Scalar>(
    screenshots: ArrayView2<T>,
    captions: ArrayView2<T>,
    temperature: T,
) -> Result<T, TrainingError> {
    let (a, _) = contrastive_loss(screenshots, captions, temperature, None)?;
    let (b, _) = contrastive_loss(captions, screenshots, temperature, None)?;
    Ok(a + b)
}

/// Query-to-screenshot loss with optional hard negatives.
pub fn stage2_loss<T: Scalar>(
    queries: ArrayView2<T>,
    screenshots: ArrayView2<T>,
    temperature: T,
    hard_negatives: Option<ArrayView2<T>>,
) -> Result<T, TrainingError> {
    Ok(contrastive_loss(queries, screenshots, temperature, hard_negatives)?.0)
}

/// Query and target towers, each `d_in × d_emb`, plus the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder<T> {
    pub query_proj: Array2<T>,
    pub target_proj: Array2<T>,
    pub temperature: T,
}

/// Feature rows for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub queries: Array2<T>,
    pub targets: Array2<T>,
    pub hard_negatives: Option<Array2<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(
        queries: Array2<T>,
        targets: Array2<T>,
        hard_negatives: Option<Array2<T>>,
    ) -> Result<Self, TrainingError> {
        if queries.nrows() == 0 || queries.nrows() != targets.nrows() {
            return Err(TrainingError::Shape(format!(
                "{} query rows vs {} target rows",
                queries.nrows(),
                targets.nrows()
            )));
        }
        if queries.ncols() != targets.ncols()
            || hard_negatives.as_ref().is_some_and(|h| h.ncols() != queries.ncols())
        {
            return Err(TrainingError::Shape("feature widths differ".into()));
        }
        Ok(Self {
            queries,
            targets,
            hard_negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.nrows() == 0
    }
}

/// Gradients of the batch loss with respect to both towers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub loss: T,
    pub query_proj: Array2<T>,
    pub target_proj: Array2<T>,
}

struct Encoded<T> {
    embeddings: Array2<T>,
    norms: Vec<T>,
}

fn encode<T: Scalar>(
    features: &Array2<T>,
    proj: &Array2<T>,
    layer: &'static str,
) -> Result<Encoded<T>, TrainingError> {
    let mut z = features.dot(proj);
    let mut norms = Vec::with_capacity(z.nrows());
    for mut row in z.rows_mut() {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(TrainingError::NonFinite(layer));
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok(Encoded {
        embeddings: z,
        norms,
    })
}

/// Pulls a gradient on unit embeddings back through normalization and the
/// linear map: `g_z = (g_e − e (e·g_e)) / ‖z‖`, `g_W = Xᵀ g_z`.
fn backprop<T: Scalar>(features: &Array2<T>, enc: &Encoded<T>, grad_e: &Array2<T>) -> Array2<T> {
    let mut grad_z = grad_e.clone();
    for (i, mut row) in grad_z.rows_mut().into_iter().enumerate() {
        let e = enc.embeddings.row(i);
        let proj = e.dot(&row);
        let inv = T::one() / enc.norms[i];
        for (g, &ei) in row.iter_mut().zip(e.iter()) {
            *g = (*g - ei * proj) * inv;
        }
    }
    features.t().dot(&grad_z)
}

impl<T: Scalar> DualEncoder<T> {
    /// Independent Gaussian towers scaled by `1/sqrt(d_in)`.
    pub fn init(d_in: usize, d_emb: usize, temperature: T, seed: u64) -> Result<Self, TrainingError> {
        if d_emb < 2 || d_in == 0 {
            return Err(TrainingError::Config(format!(
                "need d_in >= 1 and d_emb >= 2, got {d_in} and {d_emb}"
            )));
        }
        if !(temperature > T::zero()) {
            return Err(TrainingError::Temperature(temperature.to_f64_lossy()));
        }
        let scale = 1.0 / (d_in as f64).sqrt();
        let draw = |key: &str| {
            let mut rng = SplitMix64::keyed(seed, key);
            Array2::from_shape_fn((d_in, d_emb), |_| T::from_f64_lossy(rng.next_gaussian() * scale))
        };
        Ok(Self {
            query_proj: draw("init/query"),
            target_proj: draw("init/target"),
            temperature,
        })
    }

    pub fn d_in(&self) -> usize {
        self.query_proj.nrows()
    }

    pub fn d_emb(&self) -> usize {
        self.query_proj.ncols()
    }

    pub fn encode_queries(&self, features: &Array2<T>) -> Result<Array2<T>, TrainingError> {
        Ok(encode(features, &self.query_proj, "query tower")?.embeddings)
    }

    pub fn encode_targets(&self, features: &Array2<T>) -> Result<Array2<T>, TrainingError> {
        Ok(encode(features, &self.target_proj, "target tower")?.embeddings)
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<(), TrainingError> {
        if batch.queries.ncols() != self.d_in() {
            return Err(TrainingError::Shape(format!(
                "features have width {}, towers expect {}",
                batch.queries.ncols(),
                self.d_in()
            )));
        }
        if self.query_proj.shape() != self.target_proj.shape() {
            return Err(TrainingError::Shape("tower shapes differ".into()));
        }
        Ok(())
    }

    /// Batch loss for a stage. In the pretraining stage `queries` hold
    /// caption features and `targets` screenshot features.
    pub fn loss(&self, batch: &Batch<T>, stage: Stage, sharing: NegativeSharing) -> Result<T, TrainingError> {
        Ok(self.loss_gradients(batch, stage, sharing)?.loss)
    }

    /// Analytic gradients of the stage loss with respect to both towers.
    pub fn loss_gradients(
        &self,
        batch: &Batch<T>,
        stage: Stage,
        sharing: NegativeSharing,
    ) -> Result<Gradients<T>, TrainingError> {
        self.check_batch(batch)?;
        let q = encode(&batch.queries, &self.query_proj, "query tower")?;
        let t = encode(&batch.targets, &self.target_proj, "target tower")?;
        let tau = self.temperature;
        match stage {
            Stage::Pretrain => {
                let fwd = contrastive_loss_with_grads(
                    t.embeddings.view(),
                    q.embeddings.view(),
                    tau,
                    None,
                    sharing,
                )?;
                let bwd = contrastive_loss_with_grads(
                    q.embeddings.view(),
                    t.embeddings.view(),
                    tau,
                    None,
                    sharing,
                )?;
                let grad_t = &fwd.grad_anchors + &bwd.grad_positives;
                let grad_q = &fwd.grad_positives + &bwd.grad_anchors;
                Ok(Gradients {
                    loss: fwd.loss + bwd.loss,
                    query_proj: backprop(&batch.queries, &q, &grad_q),
                    target_proj: backprop(&batch.targets, &t, &grad_t),
                })
            }
            Stage::Finetune => {
                let hn = match &batch.hard_negatives {
                    Some(h) => Some((h, encode(h, &self.target_proj, "hard-negative tower")?)),
                    None => None,
                };
                let out = contrastive_loss_with_grads(
                    q.embeddings.view(),
                    t.embeddings.view(),
                    tau,
                    hn.as_ref().map(|(_, e)| e.embeddings.view()),
                    sharing,
                )?;
                let mut target_grad = backprop(&batch.targets, &t, &out.grad_positives);
                if let (Some((feats, enc)), Some(g)) = (&hn, &out.grad_extras) {
                    target_grad = target_grad + backprop(feats, enc, g);
                }
                Ok(Gradients {
                    loss: out.loss,
                    query_proj: backprop(&batch.queries, &q, &out.grad_anchors),
                    target_proj: target_grad,
                })
            }
        }
    }

    /// Plain SGD step.
    pub fn apply(&mut self, grads: &Gradients<T>, lr: T) {
        self.query_proj.scaled_add(-lr, &grads.query_proj);
        self.target_proj.scaled_add(-lr, &grads.target_proj);
    }
}

impl DualEncoder<f64> {
    /// Stores both towers in the embedding file format (dtype f64, row width
    /// `d_emb`): rows `query.<r>` and `target.<r>` for `r < d_in`, then a
    /// `temperature` row whose first entry is τ.
    pub fn to_store(&self) -> EmbeddingStore<f64> {
        let d_emb = self.d_emb();
        let mut ids = Vec::with_capacity(2 * self.d_in() + 1);
        let mut data = Vec::with_capacity((2 * self.d_in() + 1) * d_emb);
        for (prefix, m) in [("query", &self.query_proj), ("target", &self.target_proj)] {
            for (r, row) in m.rows().into_iter().enumerate() {
                ids.push(format!("{prefix}.{r}"));
                data.extend(row.iter().copied());
            }
        }
        ids.push("temperature".into());
        data.push(self.temperature);
        data.extend(std::iter::repeat_n(0.0, d_emb - 1));
        EmbeddingStore::from_parts(d_emb, ids, data).expect("row table is consistent")
    }

    pub fn from_store(store: &EmbeddingStore<f64>) -> Result<Self, TrainingError> {
        let bad = |m: &str| TrainingError::Storage(m.to_owned());
        let n = store.len();
        if n < 3 || n % 2 == 0 || store.ids()[n - 1] != "temperature" {
            return Err(bad("expected query rows, target rows and a temperature row"));
        }
        let d_in = (n - 1) / 2;
        let d_emb = store.dim();
        for r in 0..d_in {
            if store.ids()[r] != format!("query.{r}") || store.ids()[d_in + r] != format!("target.{r}") {
                return Err(bad("row ids out of order"));
            }
        }
        let take = |start: usize| {
            Array2::from_shape_vec((d_in, d_emb), store.data()[start * d_emb..(start + d_in) * d_emb].to_vec())
                .expect("slice length matches")
        };
        let temperature = store.row(n - 1)[0];
        if !(temperature > 0.0) {
            return Err(TrainingError::Temperature(temperature));
        }
        Ok(Self {
            query_proj: take(0),
            target_proj: take(d_in),
            temperature,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        self.to_store()
            .save(path)
            .map_err(|e| TrainingError::Storage(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        let store = EmbeddingStore::load(path).map_err(|e| TrainingError::Storage(e.to_string()))?;
        Self::from_store(&store)
    }
}

/// Maps corpus items to fixed-width feature rows for the linear towers.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn caption(&self, screenshot: &Screenshot) -> Result<Vec<f64>, TrainingError>;
    fn screenshot(&self, screenshot: &Screenshot) -> Result<Vec<f64>, TrainingError>;
    fn query(&self, text: &str) -> Result<Vec<f64>, TrainingError>;
    fn composed(&self, source: &Screenshot, text: &str) -> Result<Vec<f64>, TrainingError>;
}

/// Uses a (frozen) embedding backend as the feature source.
pub struct BackendFeatures<'a> {
    backend: &'a dyn EmbedderBackend,
}

impl<'a> BackendFeatures<'a> {
    pub fn new(backend: &'a dyn EmbedderBackend) -> Self {
        Self { backend }
    }
}

fn widen(v: crate::embedding::Embedding<f32>) -> Vec<f64> {
    v.values().iter().map(|&x| f64::from(x)).collect()
}

impl FeatureExtractor for BackendFeatures<'_> {
    fn dim(&self) -> usize {
        self.backend.dim()
    }

    fn caption(&self, screenshot: &Screenshot) -> Result<Vec<f64>, TrainingError> {
        self.backend
            .embed_text(&screenshot.caption)
            .map(widen)
            .map_err(|e| TrainingError::Features(e.to_string()))
    }

    fn screenshot(&self, screenshot: &Screenshot) -> Result<Vec<f64>, TrainingError> {
        self.backend
            .embed_screenshot(screenshot)
            .map(widen)
            .map_err(|e| TrainingError::Features(e.to_string()))
    }

    fn query(&self, text: &str) -> Result<Vec<f64>, TrainingError> {
        self.backend
            .embed_text(text)
            .map(widen)
            .map_err(|e| TrainingError::Features(e.to_string()))
    }

    fn composed(&self, source: &Screenshot, text: &str) -> Result<Vec<f64>, TrainingError> {
        let cq = ComposedQuery::new(source.id.clone(), text, "sq2s")
            .map_err(|e| TrainingError::Features(e.to_string()))?;
        embed_composed_or_fuse(self.backend, source, &cq)
            .map(widen)
            .map_err(|e| TrainingError::Features(e.to_string()))
    }
}

/// Learning rate of the generative backbone; too small for the toy towers,
/// which override it.
pub const PAPER_INITIAL_LR: f64 = 5e-6;
/// LoRA rank of the generative backbone. Recorded for reference only.
pub const LORA_RANK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub initial_lr: f64,
    pub batch_size_stage1: usize,
    pub batch_size_stage2: usize,
    pub epochs_per_stage: usize,
    pub seed: u64,
    pub temperature: f64,
    pub embedding_dim: usize,
    pub negative_sharing: NegativeSharing,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            initial_lr: PAPER_INITIAL_LR,
            batch_size_stage1: 2048,
            batch_size_stage2: 1024,
            epochs_per_stage: 1,
            seed: 0,
            temperature: 0.05,
            embedding_dim: 64,
            negative_sharing: NegativeSharing::Shared,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.initial_lr > 0.0) {
            return Err(TrainingError::Config("initial_lr must be > 0".into()));
        }
        if self.batch_size_stage1 == 0 || self.batch_size_stage2 == 0 {
            return Err(TrainingError::Config("batch sizes must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainingError::Temperature(self.temperature));
        }
        if self.embedding_dim < 2 {
            return Err(TrainingError::Config("embedding_dim must be >= 2".into()));
        }
        Ok(())
    }
}

/// Linear decay from `initial` to zero over `total` steps.
pub fn linear_decay(initial: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return initial;
    }
    initial * (1.0 - step as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DualEncoder<f64>,
    pub trace: Vec<TraceRecord>,
}

struct StageSample {
    query: Vec<f64>,
    target: Vec<f64>,
    negatives: Vec<Vec<f64>>,
}

fn stack(rows: &[&[f64]], width: usize) -> Array2<f64> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        data.extend_from_slice(r);
    }
    Array2::from_shape_vec((rows.len(), width), data).expect("rows have equal width")
}

fn check_width(v: Vec<f64>, width: usize) -> Result<Vec<f64>, TrainingError> {
    if v.len() != width {
        return Err(TrainingError::Shape(format!(
            "feature of width {} where {width} expected",
            v.len()
        )));
    }
    Ok(v)
}

fn pretrain_samples(corpus: &Corpus, fx: &dyn FeatureExtractor) -> Result<Vec<StageSample>, TrainingError> {
    let d = fx.dim();
    corpus
        .screenshots()
        .iter()
        .map(|s| {
            Ok(StageSample {
                query: check_width(fx.caption(s)?, d)?,
                target: check_width(fx.screenshot(s)?, d)?,
                negatives: Vec::new(),
            })
        })
        .collect()
}

fn finetune_samples(corpus: &Corpus, fx: &dyn FeatureExtractor) -> Result<Vec<StageSample>, TrainingError> {
    let d = fx.dim();
    let shot = |id: &str| {
        corpus
            .get(id)
            .ok_or_else(|| TrainingError::Features(format!("unknown screenshot {id:?}")))
    };
    let negatives = |ids: &[String]| -> Result<Vec<Vec<f64>>, TrainingError> {
        ids.iter().map(|id| check_width(fx.screenshot(shot(id)?)?, d)).collect()
    };
    let mut out = Vec::with_capacity(corpus.q2s().len() + corpus.sq2s().len());
    for t in corpus.q2s() {
        out.push(StageSample {
            query: check_width(fx.query(&t.query)?, d)?,
            target: check_width(fx.screenshot(shot(&t.target_id)?)?, d)?,
            negatives: negatives(&t.hard_negative_ids)?,
        });
    }
    for t in corpus.sq2s() {
        out.push(StageSample {
            query: check_width(fx.composed(shot(&t.source_id)?, &t.query)?, d)?,
            target: check_width(fx.screenshot(shot(&t.target_id)?)?, d)?,
            negatives: negatives(&t.hard_negative_ids)?,
        });
    }
    Ok(out)
}

fn run_stage(
    params: &mut DualEncoder<f64>,
    samples: &[StageSample],
    stage: Stage,
    batch_size: usize,
    cfg: &TrainerConfig,
    trace: &mut Vec<TraceRecord>,
) -> Result<(), TrainingError> {
    let width = params.d_in();
    let per_epoch = samples.len().div_ceil(batch_size);
    let total = per_epoch * cfg.epochs_per_stage;
    let mut step = 0;
    for epoch in 0..cfg.epochs_per_stage {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = SplitMix64::keyed(cfg.seed, &format!("stage{}/epoch{epoch}", stage.number()));
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let queries: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].query.as_slice()).collect();
            let targets: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].target.as_slice()).collect();
            // one hard negative per query, drawn from its mined set
            let picked: Vec<Option<&[f64]>> = chunk
                .iter()
                .map(|&i| {
                    let negs = &samples[i].negatives;
                    (!negs.is_empty()).then(|| negs[rng.below(negs.len() as u64) as usize].as_slice())
                })
                .collect();
            let hard = match (stage, cfg.negative_sharing) {
                (Stage::Pretrain, _) => None,
                (Stage::Finetune, NegativeSharing::Shared) => {
                    let rows: Vec<&[f64]> = picked.iter().flatten().copied().collect();
                    (!rows.is_empty()).then(|| stack(&rows, width))
                }
                (Stage::Finetune, NegativeSharing::PerQuery) => picked
                    .iter()
                    .copied()
                    .collect::<Option<Vec<&[f64]>>>()
                    .map(|rows| stack(&rows, width)),
            };
            let batch = Batch::new(stack(&queries, width), stack(&targets, width), hard)?;
            let lr = linear_decay(cfg.initial_lr, step, total);
            let grads = params
                .loss_gradients(&batch, stage, cfg.negative_sharing)
                .map_err(|e| match e {
                    TrainingError::NonFinite(_) => TrainingError::Divergence {
                        stage: stage.number(),
                        step,
                    },
                    other => other,
                })?;
            if !grads.loss.is_finite() {
                return Err(TrainingError::Divergence {
                    stage: stage.number(),
                    step,
                });
            }
            trace.push(TraceRecord {
                stage: stage.number(),
                step,
                lr,
                loss: grads.loss,
            });
            params.apply(&grads, lr);
            if !params.query_proj.iter().chain(params.target_proj.iter()).all(|v| v.is_finite()) {
                return Err(TrainingError::Divergence {
                    stage: stage.number(),
                    step,
                });
            }
            step += 1;
        }
    }
    Ok(())
}

/// Stage one on every screenshot's (caption, screenshot) pair, then stage two
/// on the q2s and sq2s samples, which are shuffled together. Each stage decays
/// its learning rate linearly to zero. Single-threaded and deterministic for
/// a fixed seed.
pub fn train(
    corpus: &Corpus,
    features: &dyn FeatureExtractor,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome, TrainingError> {
    train_from(
        corpus,
        features,
        cfg,
        DualEncoder::init(features.dim(), cfg.embedding_dim, cfg.temperature, cfg.seed)?,
    )
}

/// [`train`] starting from given parameters.
pub fn train_from(
    corpus: &Corpus,
    features: &dyn FeatureExtractor,
    cfg: &TrainerConfig,
    init: DualEncoder<f64>,
) -> Result<TrainOutcome, TrainingError> {
    cfg.validate()?;
    if init.d_in() != features.dim() {
        return Err(TrainingError::Shape(format!(
            "towers take {} features, extractor yields {}",
            init.d_in(),
            features.dim()
        )));
    }
    let stage1 = pretrain_samples(corpus, features)?;
    if stage1.is_empty() {
        return Err(TrainingError::EmptyStage(1));
    }
    let stage2 = finetune_samples(corpus, features)?;
    if stage2.is_empty() {
        return Err(TrainingError::EmptyStage(2));
    }
    let mut params = init;
    let mut trace = Vec::new();
    run_stage(&mut params, &stage1, Stage::Pretrain, cfg.batch_size_stage1, cfg, &mut trace)?;
    run_stage(&mut params, &stage2, Stage::Finetune, cfg.batch_size_stage2, cfg, &mut trace)?;
    Ok(TrainOutcome { params, trace })
}
