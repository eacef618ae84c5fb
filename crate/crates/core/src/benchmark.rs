//! Benchmark task construction and Recall@k evaluation.
//!
//! Four task categories are supported: screenshot retrieval (SR, text query),
//! composed screenshot retrieval (CSR, screenshot plus conditioned text),
//! screenshot question answering (SQA, screenshot plus question against
//! answer-text candidates) and open-vocabulary classification (OVC,
//! screenshot against label candidates). All four are scored as retrieval
//! over the task corpus by embedding similarity.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Screenshot};
use crate::embedding::{embed_composed_or_fuse, ComposedQuery, EmbedderBackend, Embedding, EmbeddingError};
use crate::fsio;
use crate::index::IndexError;
use crate::rng::SplitMix64;
use crate::VectorIndex;

#[derive(Debug, thiserror::Error)]
pub enum BenchmarkError {
    #[error("task {task:?}: gold id {id:?} is not in the candidate pool")]
    GoldMissing { task: String, id: String },
    #[error("task {task:?}: target size {target} is below the {golds} gold candidates")]
    TargetTooSmall { task: String, target: usize, golds: usize },
    #[error("task {task:?}: {message}")]
    InvalidTask { task: String, message: String },
    #[error("task {0:?} has no queries")]
    EmptyQueries(String),
    #[error("unknown screenshot {0:?}")]
    UnknownScreenshot(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub enum TaskCategory {
    SR,
    CSR,
    SQA,
    OVC,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 4] = [TaskCategory::SR, TaskCategory::CSR, TaskCategory::SQA, TaskCategory::OVC];

    pub fn name(self) -> &'static str {
        match self {
            TaskCategory::SR => "SR",
            TaskCategory::CSR => "CSR",
            TaskCategory::SQA => "SQA",
            TaskCategory::OVC => "OVC",
        }
    }

    /// Whether candidates are screenshots (as opposed to texts).
    pub fn screenshot_candidates(self) -> bool {
        matches!(self, TaskCategory::SR | TaskCategory::CSR)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum QueryPayload {
    Text { text: String },
    Composed { screenshot_id: String, text: String },
    Screenshot { screenshot_id: String },
}

impl QueryPayload {
    pub fn text(&self) -> Option<&str> {
        match self {
            QueryPayload::Text { text } | QueryPayload::Composed { text, .. } => Some(text),
            QueryPayload::Screenshot { .. } => None,
        }
    }

    pub fn screenshot_id(&self) -> Option<&str> {
        match self {
            QueryPayload::Composed { screenshot_id, .. } | QueryPayload::Screenshot { screenshot_id } => {
                Some(screenshot_id)
            }
            QueryPayload::Text { .. } => None,
        }
    }

    fn fits(&self, category: TaskCategory) -> bool {
        matches!(
            (category, self),
            (TaskCategory::SR, QueryPayload::Text { .. })
                | (TaskCategory::CSR, QueryPayload::Composed { .. })
                | (TaskCategory::SQA, QueryPayload::Composed { .. })
                | (TaskCategory::OVC, QueryPayload::Screenshot { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub payload: QueryPayload,
    pub gold_id: String,
    /// Pre-generated hard negatives (e.g. altered answers for SQA).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negative_candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkTask {
    pub name: String,
    pub category: TaskCategory,
    pub domain_tag: String,
    pub queries: Vec<EvalSample>,
    #[serde(default)]
    pub corpus_ids: Vec<String>,
    /// Display text of text candidates; an id without an entry is its own text.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub candidate_texts: BTreeMap<String, String>,
}

impl BenchmarkTask {
    fn invalid(&self, message: impl Into<String>) -> BenchmarkError {
        BenchmarkError::InvalidTask {
            task: self.name.clone(),
            message: message.into(),
        }
    }

    /// Payload shapes match the category, corpus ids are unique and contain every gold.
    pub fn validate(&self) -> Result<(), BenchmarkError> {
        for (i, q) in self.queries.iter().enumerate() {
            if !q.payload.fits(self.category) {
                return Err(self.invalid(format!(
                    "query {i} payload does not fit category {}",
                    self.category.name()
                )));
            }
        }
        let ids: HashSet<&str> = self.corpus_ids.iter().map(String::as_str).collect();
        if ids.len() != self.corpus_ids.len() {
            return Err(self.invalid("duplicate corpus ids"));
        }
        if let Some(q) = self.queries.iter().find(|q| !ids.contains(q.gold_id.as_str())) {
            return Err(BenchmarkError::GoldMissing {
                task: self.name.clone(),
                id: q.gold_id.clone(),
            });
        }
        Ok(())
    }

    pub fn candidate_text<'a>(&'a self, id: &'a str) -> &'a str {
        self.candidate_texts.get(id).map_or(id, String::as_str)
    }
}

/// Task names of the reference benchmark mapped to application domains.
/// The CSR tasks' placement between Wiki and Others is a best guess.
pub const DEFAULT_DOMAIN_MAP: &[(&str, &str)] = &[
    ("Product", "Prod"),
    ("Paper", "Paper"),
    ("Repo", "Repo"),
    ("News", "News"),
    ("Chart", "Others"),
    ("Document", "Others"),
    ("Slide", "Others"),
    ("Knowledge Relation", "Wiki"),
    ("News2Wiki", "Others"),
    ("Product Discovery", "Prod"),
    ("Wiki2Product", "Others"),
    ("Repo-QA", "Repo"),
    ("News-QA", "News"),
    ("Product-QA", "Prod"),
    ("Paper-QA", "Paper"),
    ("Wiki-QA", "Wiki"),
    ("Product Classification", "Prod"),
    ("News Topics", "News"),
    ("Knowledge Classification", "Wiki"),
    ("Academic Fields", "Paper"),
];

pub fn default_domain_tag(task_name: &str) -> Option<&'static str> {
    DEFAULT_DOMAIN_MAP
        .iter()
        .find(|(name, _)| *name == task_name)
        .map(|(_, tag)| *tag)
}

/// One judge's assessment of a (sample, candidate) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub clarity: bool,
    pub reasonability: bool,
    pub correctness: bool,
    pub judge_id: String,
}

impl QualityVerdict {
    pub fn passes(&self) -> bool {
        self.clarity && self.reasonability && self.correctness
    }
}

pub trait Judge: Send + Sync {
    fn id(&self) -> &str;
    fn assess(&self, sample: &EvalSample, candidate: &str) -> QualityVerdict;
}

/// Deterministic heuristic judge.
///
/// * clarity: a textual query has at least `min_query_words` words;
/// * reasonability: the query text is at most `max_query_chars` characters;
/// * correctness: the candidate is non-empty, and when it is not the gold
///   it must differ from the gold after whitespace/case folding (an altered
///   answer that is really the gold would be a false negative).
#[derive(Debug, Clone)]
pub struct RuleJudge {
    pub id: String,
    pub min_query_words: usize,
    pub max_query_chars: usize,
}

impl Default for RuleJudge {
    fn default() -> Self {
        Self {
            id: "rules".into(),
            min_query_words: 2,
            max_query_chars: 512,
        }
    }
}

fn fold(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl Judge for RuleJudge {
    fn id(&self) -> &str {
        &self.id
    }

    fn assess(&self, sample: &EvalSample, candidate: &str) -> QualityVerdict {
        let text = sample.payload.text();
        QualityVerdict {
            clarity: text.is_none_or(|t| t.split_whitespace().count() >= self.min_query_words),
            reasonability: text.is_none_or(|t| t.chars().count() <= self.max_query_chars),
            correctness: !candidate.trim().is_empty()
                && (candidate == sample.gold_id || fold(candidate) != fold(&sample.gold_id)),
            judge_id: self.id.clone(),
        }
    }
}

/// Verdicts reviewed offline (e.g. by people), one JSON line each:
/// `{"gold_id": ..., "candidate": ..., "clarity": .., "reasonability": .., "correctness": ..}`.
/// Pairs without a review fail.
#[derive(Debug, Clone, Default)]
pub struct ReviewedJudge {
    id: String,
    verdicts: BTreeMap<(String, String), QualityVerdict>,
}

#[derive(Deserialize)]
struct ReviewLine {
    gold_id: String,
    candidate: String,
    clarity: bool,
    reasonability: bool,
    correctness: bool,
}

impl ReviewedJudge {
    pub fn from_jsonl(id: impl Into<String>, text: &str) -> Result<Self, BenchmarkError> {
        let id = id.into();
        let mut verdicts = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ReviewLine = serde_json::from_str(line).map_err(|e| BenchmarkError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            verdicts.insert(
                (r.gold_id, r.candidate),
                QualityVerdict {
                    clarity: r.clarity,
                    reasonability: r.reasonability,
                    correctness: r.correctness,
                    judge_id: id.clone(),
                },
            );
        }
        Ok(Self { id, verdicts })
    }
}

impl Judge for ReviewedJudge {
    fn id(&self) -> &str {
        &self.id
    }

    fn assess(&self, sample: &EvalSample, candidate: &str) -> QualityVerdict {
        self.verdicts
            .get(&(sample.gold_id.clone(), candidate.to_owned()))
            .cloned()
            .unwrap_or(QualityVerdict {
                clarity: false,
                reasonability: false,
                correctness: false,
                judge_id: self.id.clone(),
            })
    }
}

/// True when every judge passes the pair on all three criteria.
pub fn unanimous(judges: &[&dyn Judge], sample: &EvalSample, candidate: &str) -> bool {
    judges.iter().all(|j| j.assess(sample, candidate).passes())
}

/// Splits samples into those every judge accepts against their gold and the rest.
pub fn quality_gate_samples(samples: Vec<EvalSample>, judges: &[&dyn Judge]) -> (Vec<EvalSample>, Vec<EvalSample>) {
    samples
        .into_iter()
        .partition(|s| unanimous(judges, s, &s.gold_id))
}

/// Proposes hard-negative candidate ids for a sample.
pub trait NegativeInjector {
    fn negatives(&self, sample: &EvalSample) -> Result<Vec<String>, BenchmarkError>;
}

/// No injection.
pub struct NoNegatives;

impl NegativeInjector for NoNegatives {
    fn negatives(&self, _: &EvalSample) -> Result<Vec<String>, BenchmarkError> {
        Ok(Vec::new())
    }
}

/// Uses each sample's pre-generated `negative_candidates`.
pub struct SuppliedNegatives;

impl NegativeInjector for SuppliedNegatives {
    fn negatives(&self, sample: &EvalSample) -> Result<Vec<String>, BenchmarkError> {
        Ok(sample.negative_candidates.clone())
    }
}

/// Screenshots most similar to the query (gold excluded), for SR and CSR.
pub struct SimilarityInjector<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a VectorIndex,
    pub backend: &'a dyn EmbedderBackend,
    pub task_tag: String,
    pub per_sample: usize,
}

impl NegativeInjector for SimilarityInjector<'_> {
    fn negatives(&self, sample: &EvalSample) -> Result<Vec<String>, BenchmarkError> {
        if self.per_sample == 0 {
            return Ok(Vec::new());
        }
        let q = embed_query(self.backend, self.corpus, &sample.payload, &self.task_tag)?;
        let exclude: HashSet<String> = [sample.gold_id.clone()].into();
        Ok(self
            .index
            .top_k(q.values(), self.per_sample, Some(&exclude))?
            .into_iter()
            .map(|h| h.id)
            .collect())
    }
}

/// Rule-based stand-in for LLM-altered answers: bumps every number, or
/// otherwise reverses the word order / appends a qualifier.
pub fn perturb_answer(answer: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut bumped = String::new();
    let mut digits = String::new();
    let mut changed = false;
    let flush = |digits: &mut String, bumped: &mut String, changed: &mut bool| {
        if !digits.is_empty() {
            match digits.parse::<u128>() {
                Ok(n) => {
                    bumped.push_str(&(n + 1).to_string());
                    *changed = true;
                }
                Err(_) => bumped.push_str(digits),
            }
            digits.clear();
        }
    };
    for c in answer.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
        } else {
            flush(&mut digits, &mut bumped, &mut changed);
            bumped.push(c);
        }
    }
    flush(&mut digits, &mut bumped, &mut changed);
    if changed {
        out.push(bumped);
    }
    let words: Vec<&str> = answer.split_whitespace().collect();
    if words.len() > 1 {
        let reversed: Vec<&str> = words.iter().rev().copied().collect();
        let r = reversed.join(" ");
        if r != answer {
            out.push(r);
        }
    }
    out.push(format!("not {answer}"));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub task: BenchmarkTask,
    /// The pool could not supply `target_size` candidates.
    pub undersized: bool,
    pub injected: Vec<String>,
    pub rejected_negatives: Vec<String>,
}

/// Builds the candidate corpus of a task: every gold, a seeded uniform fill
/// from `pool` up to `target_size`, then hard negatives from `injector` that
/// pass every judge. Negatives already in the corpus are not counted again.
pub fn build_task_corpus(
    task: &BenchmarkTask,
    pool: &[String],
    target_size: usize,
    injector: &dyn NegativeInjector,
    judges: &[&dyn Judge],
    seed: u64,
) -> Result<BuildOutcome, BenchmarkError> {
    let pool_set: HashSet<&str> = pool.iter().map(String::as_str).collect();
    let mut in_corpus: HashSet<String> = HashSet::new();
    let mut corpus_ids = Vec::new();
    for q in &task.queries {
        if !pool_set.contains(q.gold_id.as_str()) {
            return Err(BenchmarkError::GoldMissing {
                task: task.name.clone(),
                id: q.gold_id.clone(),
            });
        }
        if in_corpus.insert(q.gold_id.clone()) {
            corpus_ids.push(q.gold_id.clone());
        }
    }
    if target_size < corpus_ids.len() {
        return Err(BenchmarkError::TargetTooSmall {
            task: task.name.clone(),
            target: target_size,
            golds: corpus_ids.len(),
        });
    }

    let mut seen_pool = HashSet::new();
    let rest: Vec<&String> = pool
        .iter()
        .filter(|id| !in_corpus.contains(*id) && seen_pool.insert(id.as_str()))
        .collect();
    let need = target_size - corpus_ids.len();
    let undersized = need > rest.len();
    let mut rng = SplitMix64::keyed(seed, &format!("fill\u{1f}{}", task.name));
    for id in rng.sample(&rest, need) {
        in_corpus.insert(id.clone());
        corpus_ids.push(id.clone());
    }

    let mut injected = Vec::new();
    let mut rejected = Vec::new();
    for q in &task.queries {
        for cand in injector.negatives(q)? {
            if cand == q.gold_id || in_corpus.contains(&cand) {
                continue;
            }
            if unanimous(judges, q, &cand) {
                in_corpus.insert(cand.clone());
                corpus_ids.push(cand.clone());
                injected.push(cand);
            } else {
                rejected.push(cand);
            }
        }
    }

    let built = BenchmarkTask {
        corpus_ids,
        ..task.clone()
    };
    built.validate()?;
    Ok(BuildOutcome {
        task: built,
        undersized,
        injected,
        rejected_negatives: rejected,
    })
}

fn screenshot<'a>(corpus: &'a Corpus, id: &str) -> Result<&'a Screenshot, BenchmarkError> {
    corpus
        .get(id)
        .ok_or_else(|| BenchmarkError::UnknownScreenshot(id.to_owned()))
}

/// Query embedding: text for SR, native composed or fused for CSR and SQA,
/// screenshot for OVC.
pub fn embed_query(
    backend: &dyn EmbedderBackend,
    corpus: &Corpus,
    payload: &QueryPayload,
    task_tag: &str,
) -> Result<Embedding<f32>, BenchmarkError> {
    Ok(match payload {
        QueryPayload::Text { text } => backend.embed_text(text)?,
        QueryPayload::Composed { screenshot_id, text } => {
            let shot = screenshot(corpus, screenshot_id)?;
            let cq = ComposedQuery::new(screenshot_id.clone(), text.clone(), task_tag)?;
            embed_composed_or_fuse(backend, shot, &cq)?
        }
        QueryPayload::Screenshot { screenshot_id } => backend.embed_screenshot(screenshot(corpus, screenshot_id)?)?,
    })
}

/// Exact index over a task's candidates.
pub fn candidate_index(
    task: &BenchmarkTask,
    corpus: &Corpus,
    backend: &dyn EmbedderBackend,
) -> Result<VectorIndex, BenchmarkError> {
    let vectors = if task.category.screenshot_candidates() {
        let shots = task
            .corpus_ids
            .iter()
            .map(|id| screenshot(corpus, id))
            .collect::<Result<Vec<_>, _>>()?;
        backend.embed_screenshots(&shots)?
    } else {
        let texts: Vec<&str> = task.corpus_ids.iter().map(|id| task.candidate_text(id)).collect();
        backend.embed_texts(&texts)?
    };
    Ok(VectorIndex::build(
        backend.dim(),
        task.corpus_ids.iter().cloned().zip(vectors),
    )?)
}

/// Per-query rank of the gold (1-based), `None` when outside the top `k`.
pub fn gold_ranks(
    task: &BenchmarkTask,
    corpus: &Corpus,
    backend: &dyn EmbedderBackend,
    k: usize,
) -> Result<Vec<Option<usize>>, BenchmarkError> {
    task.validate()?;
    if task.queries.is_empty() {
        return Err(BenchmarkError::EmptyQueries(task.name.clone()));
    }
    let index = candidate_index(task, corpus, backend)?;
    let queries = task
        .queries
        .iter()
        .map(|q| embed_query(backend, corpus, &q.payload, &task.name))
        .collect::<Result<Vec<_>, _>>()?;
    let hits = index.batch_top_k(&queries, k, None)?;
    Ok(task
        .queries
        .iter()
        .zip(hits)
        .map(|(q, hits)| hits.iter().find(|h| h.id == q.gold_id).map(|h| h.rank))
        .collect())
}

/// Recall@k in percent: share of queries whose gold is among the top `k` hits.
pub fn evaluate_task(
    task: &BenchmarkTask,
    corpus: &Corpus,
    backend: &dyn EmbedderBackend,
    k: usize,
) -> Result<f64, BenchmarkError> {
    let ranks = gold_ranks(task, corpus, backend, k)?;
    let found = ranks.iter().filter(|r| r.is_some()).count();
    Ok(100.0 * found as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub name: String,
    pub category: TaskCategory,
    pub domain_tag: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub k: usize,
    pub per_task: Vec<TaskScore>,
    pub per_category: BTreeMap<TaskCategory, f64>,
    pub per_domain: BTreeMap<String, f64>,
    pub overall: Option<f64>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unweighted means per category, per domain tag and over all tasks.
pub fn aggregate(scores: &[TaskScore], k: usize) -> EvalReport {
    let mut by_cat: BTreeMap<TaskCategory, Vec<f64>> = BTreeMap::new();
    let mut by_dom: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in scores {
        by_cat.entry(s.category).or_default().push(s.score);
        by_dom.entry(s.domain_tag.clone()).or_default().push(s.score);
    }
    let all: Vec<f64> = scores.iter().map(|s| s.score).collect();
    EvalReport {
        k,
        per_task: scores.to_vec(),
        per_category: by_cat.into_iter().map(|(c, v)| (c, mean(&v))).collect(),
        per_domain: by_dom.into_iter().map(|(d, v)| (d, mean(&v))).collect(),
        overall: (!all.is_empty()).then(|| mean(&all)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Records,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReportRecord {
    Task {
        name: String,
        category: TaskCategory,
        domain_tag: String,
        k: usize,
        recall: f64,
    },
    Category {
        category: TaskCategory,
        k: usize,
        recall: f64,
    },
    Domain {
        domain_tag: String,
        k: usize,
        recall: f64,
    },
    Overall {
        k: usize,
        recall: f64,
    },
}

impl EvalReport {
    pub fn records(&self) -> Vec<ReportRecord> {
        let k = self.k;
        let mut out: Vec<ReportRecord> = self
            .per_task
            .iter()
            .map(|t| ReportRecord::Task {
                name: t.name.clone(),
                category: t.category,
                domain_tag: t.domain_tag.clone(),
                k,
                recall: t.score,
            })
            .collect();
        out.extend(self.per_category.iter().map(|(&category, &recall)| ReportRecord::Category { category, k, recall }));
        out.extend(self.per_domain.iter().map(|(d, &recall)| ReportRecord::Domain {
            domain_tag: d.clone(),
            k,
            recall,
        }));
        out.extend(self.overall.map(|recall| ReportRecord::Overall { k, recall }));
        out
    }
}

/// Re-reads task lines of a record-mode report (aggregate lines are derived
/// and ignored). Returns the scores and the cutoff `k`.
pub fn parse_report_records(text: &str) -> Result<(Vec<TaskScore>, usize), BenchmarkError> {
    let mut scores = Vec::new();
    let mut k = 1;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReportRecord = serde_json::from_str(line).map_err(|e| BenchmarkError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let ReportRecord::Task {
            name,
            category,
            domain_tag,
            k: task_k,
            recall,
        } = rec
        {
            k = task_k;
            scores.push(TaskScore {
                name,
                category,
                domain_tag,
                score: recall,
            });
        }
    }
    Ok((scores, k))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.2}"))
}

/// Renders a report. The table has columns SR, CSR, SQA, OVC, Overall with
/// two-decimal percentages, followed by per-domain and per-task sections;
/// an empty report renders the header only. Record mode emits one JSON line
/// per task, then category, domain and overall lines.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Records => report
            .records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect(),
        ReportFormat::Table => {
            let mut out = String::new();
            let metric = format!("Recall@{}", report.k.max(1));
            let _ = writeln!(
                out,
                "{:<12}{:>8}{:>8}{:>8}{:>8}{:>9}",
                "Metric", "SR", "CSR", "SQA", "OVC", "Overall"
            );
            if report.per_task.is_empty() {
                return out;
            }
            let cats: Vec<String> = TaskCategory::ALL
                .iter()
                .map(|c| cell(report.per_category.get(c).copied()))
                .collect();
            let _ = writeln!(
                out,
                "{:<12}{:>8}{:>8}{:>8}{:>8}{:>9}",
                metric,
                cats[0],
                cats[1],
                cats[2],
                cats[3],
                cell(report.overall)
            );
            out.push('\n');
            let _ = writeln!(out, "{:<12}{:>8}", "Domain", metric);
            for (d, v) in &report.per_domain {
                let _ = writeln!(out, "{:<12}{:>8}", d, cell(Some(*v)));
            }
            out.push('\n');
            let _ = writeln!(out, "{:<28}{:<9}{:<8}{:>8}", "Task", "Category", "Domain", metric);
            for t in &report.per_task {
                let _ = writeln!(
                    out,
                    "{:<28}{:<9}{:<8}{:>8}",
                    t.name,
                    t.category.name(),
                    t.domain_tag,
                    cell(Some(t.score))
                );
            }
            out
        }
    }
}

/// One task per line.
pub fn tasks_from_jsonl(text: &str) -> Result<Vec<BenchmarkTask>, BenchmarkError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| BenchmarkError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn tasks_to_jsonl(tasks: &[BenchmarkTask]) -> String {
    tasks
        .iter()
        .map(|t| serde_json::to_string(t).expect("tasks serialize") + "\n")
        .collect()
}

pub fn load_tasks(path: &Path) -> Result<Vec<BenchmarkTask>, BenchmarkError> {
    let text = fs::read_to_string(path).map_err(|source| BenchmarkError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    tasks_from_jsonl(&text)
}

pub fn save_tasks(tasks: &[BenchmarkTask], path: &Path) -> Result<(), BenchmarkError> {
    fsio::write_atomic(path, tasks_to_jsonl(tasks).as_bytes()).map_err(|source| BenchmarkError::Io {
        path: path.to_path_buf(),
        source,
    })
}
