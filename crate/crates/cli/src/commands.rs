use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use visir::benchmark::{
    self, aggregate, build_task_corpus, emit_report, evaluate_task, parse_report_records, BenchmarkTask, Judge,
    NegativeInjector, NoNegatives, ReportFormat, ReviewedJudge, RuleJudge, SimilarityInjector, SuppliedNegatives,
    TaskCategory, TaskScore,
};
use visir::corpus::{filter_screenshots, load_corpus, save_corpus, Corpus, Rejection};
use visir::embedding::{EmbedderBackend, EmbeddingStore, MockBackend, RemoteEmbedder};
use visir::fsio::write_atomic;
use visir::mining::{caption_index, visual_index, Miner};
use visir::resize::{smart_resize, ImageDims};
use visir::training::{train, BackendFeatures};
use visir::VectorIndex;

use crate::config::{BackendKind, RunConfig};
use crate::error::CliError;

pub fn make_backend(cfg: &RunConfig) -> Result<Box<dyn EmbedderBackend>, CliError> {
    Ok(match cfg.backend.kind {
        BackendKind::Mock => Box::new(MockBackend::new(cfg.backend.mock_seed, cfg.backend.dim)?.with_composed(cfg.backend.composed)),
        BackendKind::Remote => Box::new(RemoteEmbedder::new(cfg.remote.clone())?),
    })
}

pub fn require(path: &Path) -> Result<(), CliError> {
    std::fs::metadata(path).map(|_| ()).map_err(|e| CliError::missing(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::io(path, e))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|x| serde_json::to_string(&x).expect("records serialize") + "\n")
        .collect()
}

fn load(path: &Path) -> Result<Corpus, CliError> {
    require(path)?;
    Ok(load_corpus(path)?)
}

pub fn ingest(input: &Path, out: &Path) -> Result<String, CliError> {
    let corpus = load(input)?;
    save_corpus(&corpus, &out.join("corpus.jsonl"))?;
    Ok(format!(
        "screenshots={} q2s={} sq2s={}\n",
        corpus.len(),
        corpus.q2s().len(),
        corpus.sq2s().len()
    ))
}

pub fn filter(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<String, CliError> {
    let corpus = load(corpus)?;
    let outcome = filter_screenshots(corpus.screenshots(), &cfg.filter);
    let keep: HashSet<&str> = outcome.kept.iter().map(|s| s.id.as_str()).collect();
    save_corpus(&corpus.restrict_to(&keep), &out.join("corpus.jsonl"))?;
    let rejections = outcome.rejected.iter().map(|(s, reason)| Rejection {
        id: s.id.clone(),
        reason: *reason,
    });
    write(&out.join("rejected.jsonl"), jsonl(rejections).as_bytes())?;
    Ok(format!("kept={} rejected={}\n", outcome.kept.len(), outcome.rejected.len()))
}

#[derive(Serialize)]
struct Pair<'a> {
    seed_id: &'a str,
    partner_id: String,
}

pub fn mine(cfg: &RunConfig, corpus: &Path, pairs: bool, out: &Path) -> Result<String, CliError> {
    let corpus = load(corpus)?;
    let backend = make_backend(cfg)?;
    let text = caption_index(&corpus, backend.as_ref())?;
    let visual = if corpus.screenshots().iter().any(|s| s.visual_flag) {
        Some(visual_index(&corpus, backend.as_ref())?)
    } else {
        None
    };
    let miner = Miner::new(&corpus, &text, visual.as_ref(), backend.as_ref(), cfg.mining.clone())?;
    let (augmented, sets) = miner.augment()?;
    save_corpus(&augmented, &out.join("corpus.jsonl"))?;
    write(&out.join("negatives.jsonl"), jsonl(&sets).as_bytes())?;
    let empty = sets.iter().filter(|s| s.empty_pool).count();
    let mut summary = format!("samples={} empty_pools={empty}\n", sets.len());
    if pairs {
        let found = corpus
            .screenshots()
            .par_iter()
            .map(|s| {
                Ok(Pair {
                    seed_id: &s.id,
                    partner_id: miner.mine_sq2s_pair(s)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        write(&out.join("pairs.jsonl"), jsonl(&found).as_bytes())?;
        let _ = writeln!(summary, "pairs={}", found.len());
    }
    Ok(summary)
}

pub fn train_cmd(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<String, CliError> {
    let corpus = load(corpus)?;
    let backend = make_backend(cfg)?;
    let features = BackendFeatures::new(backend.as_ref());
    let outcome = train(&corpus, &features, &cfg.train)?;
    outcome.params.save(&out.join("params.vire"))?;
    write(&out.join("trace.jsonl"), jsonl(&outcome.trace).as_bytes())?;
    let last = |stage: u8| {
        outcome
            .trace
            .iter()
            .rev()
            .find(|t| t.stage == stage)
            .map_or_else(|| "-".to_owned(), |t| format!("{:.6}", t.loss))
    };
    Ok(format!(
        "steps={} final_loss_stage1={} final_loss_stage2={}\n",
        outcome.trace.len(),
        last(1),
        last(2)
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EmbedTarget {
    Screenshots,
    Captions,
}

pub fn embed(cfg: &RunConfig, corpus: &Path, what: EmbedTarget, out: &Path) -> Result<String, CliError> {
    let corpus = load(corpus)?;
    let backend = make_backend(cfg)?;
    let index = match what {
        EmbedTarget::Screenshots => visual_index(&corpus, backend.as_ref())?,
        EmbedTarget::Captions => caption_index(&corpus, backend.as_ref())?,
    };
    index.save(&out.join("embeddings.vire"))?;
    Ok(format!("rows={} dim={}\n", index.len(), index.dim()))
}

pub fn index(
    cfg: &RunConfig,
    embeddings: &Path,
    query: Option<&str>,
    k: usize,
    out: Option<&Path>,
) -> Result<String, CliError> {
    require(embeddings)?;
    let index = VectorIndex::from_store(EmbeddingStore::load(embeddings)?)?;
    if let Some(out) = out {
        index.save(&out.join("index.vire"))?;
    }
    let mut text = format!("rows={} dim={}\n", index.len(), index.dim());
    if let Some(q) = query {
        let backend = make_backend(cfg)?;
        let v = backend.embed_text(q)?;
        for hit in index.top_k(v.values(), k, None)? {
            let _ = writeln!(text, "{}\t{}\t{:.6}", hit.rank, hit.id, hit.score);
        }
    }
    Ok(text)
}

#[derive(Serialize)]
struct BuildRecord<'a> {
    task: &'a str,
    corpus_size: usize,
    undersized: bool,
    injected: usize,
    rejected: usize,
}

pub fn bench_build(
    cfg: &RunConfig,
    tasks: &Path,
    corpus: &Path,
    reviews: Option<&Path>,
    out: &Path,
) -> Result<String, CliError> {
    require(tasks)?;
    let tasks = benchmark::load_tasks(tasks)?;
    let corpus = load(corpus)?;
    let backend = make_backend(cfg)?;
    let rule = RuleJudge {
        min_query_words: cfg.bench.min_query_words,
        max_query_chars: cfg.bench.max_query_chars,
        ..RuleJudge::default()
    };
    let reviewed = match reviews {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::missing(p, e))?;
            Some(ReviewedJudge::from_jsonl("reviewed", &text)?)
        }
        None => None,
    };
    let mut judges: Vec<&dyn Judge> = vec![&rule];
    if let Some(r) = &reviewed {
        judges.push(r);
    }
    let needs_index = tasks.iter().any(|t| t.category.screenshot_candidates());
    let screenshots = if needs_index {
        Some(visual_index(&corpus, backend.as_ref())?)
    } else {
        None
    };
    let pool: Vec<String> = corpus.screenshots().iter().map(|s| s.id.clone()).collect();

    let mut built = Vec::with_capacity(tasks.len());
    let mut log = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let outcome = match task.category {
            TaskCategory::SR | TaskCategory::CSR => {
                let injector = SimilarityInjector {
                    corpus: &corpus,
                    index: screenshots.as_ref().expect("index built for screenshot tasks"),
                    backend: backend.as_ref(),
                    task_tag: task.name.clone(),
                    per_sample: cfg.bench.negatives_per_query,
                };
                build_task_corpus(task, &pool, cfg.bench.target_size, &injector, &judges, cfg.run.seed)?
            }
            TaskCategory::SQA | TaskCategory::OVC => {
                // text candidates: the task's own answer or label pool
                let mut own: Vec<String> = task.corpus_ids.clone();
                for q in &task.queries {
                    if !own.contains(&q.gold_id) {
                        own.push(q.gold_id.clone());
                    }
                }
                let injector: &dyn NegativeInjector = if task.category == TaskCategory::SQA {
                    &SuppliedNegatives
                } else {
                    &NoNegatives
                };
                build_task_corpus(task, &own, own.len(), injector, &judges, cfg.run.seed)?
            }
        };
        log.push(BuildRecord {
            task: &task.name,
            corpus_size: outcome.task.corpus_ids.len(),
            undersized: outcome.undersized,
            injected: outcome.injected.len(),
            rejected: outcome.rejected_negatives.len(),
        });
        built.push(outcome.task);
    }
    benchmark::save_tasks(&built, &out.join("tasks.jsonl"))?;
    write(&out.join("build.jsonl"), jsonl(&log).as_bytes())?;
    Ok(jsonl(&log))
}

pub fn evaluate_all(
    tasks: &[BenchmarkTask],
    corpus: &Corpus,
    backend: &dyn EmbedderBackend,
    k: usize,
) -> Result<Vec<TaskScore>, CliError> {
    tasks
        .par_iter()
        .map(|t| {
            Ok(TaskScore {
                name: t.name.clone(),
                category: t.category,
                domain_tag: t.domain_tag.clone(),
                score: evaluate_task(t, corpus, backend, k)?,
            })
        })
        .collect()
}

pub fn bench_eval(cfg: &RunConfig, tasks: &Path, corpus: &Path, out: &Path) -> Result<String, CliError> {
    require(tasks)?;
    let tasks = benchmark::load_tasks(tasks)?;
    let corpus = load(corpus)?;
    let backend = make_backend(cfg)?;
    let scores = evaluate_all(&tasks, &corpus, backend.as_ref(), cfg.bench.k)?;
    let report = aggregate(&scores, cfg.bench.k);
    let table = emit_report(&report, ReportFormat::Table);
    write(&out.join("report.txt"), table.as_bytes())?;
    write(&out.join("report.jsonl"), emit_report(&report, ReportFormat::Records).as_bytes())?;
    Ok(table)
}

pub fn report(records: &Path, format: ReportFormat) -> Result<String, CliError> {
    require(records)?;
    let text = std::fs::read_to_string(records).map_err(|e| CliError::io(records, e))?;
    let (scores, k) = parse_report_records(&text)?;
    Ok(emit_report(&aggregate(&scores, k), format))
}

pub fn resize(h: u64, w: u64, max_tokens: u64) -> Result<String, CliError> {
    if h == 0 || w == 0 {
        return Err(CliError::usage("--h and --w must be positive"));
    }
    if max_tokens == 0 {
        return Err(CliError::usage("--max-tokens must be positive"));
    }
    let plan = smart_resize(ImageDims::new(h, w), max_tokens);
    Ok(format!(
        "height={} width={} beta={:.6} tokens={} clamped={}\n",
        plan.out_height, plan.out_width, plan.beta, plan.token_count, plan.clamped
    ))
}

pub fn out_dir(out: Option<&PathBuf>) -> Result<&Path, CliError> {
    let out = out.ok_or_else(|| CliError::usage("this command writes artifacts and needs --out <DIR>"))?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    Ok(out)
}
