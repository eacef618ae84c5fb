//! Clustered synthetic corpora with a table-backed embedder, for smoke tests
//! and demonstrations of the training pipeline.
//!
//! Each cluster has a random center `μ`. Captions embed near `μ`, screenshots
//! near `Rμ` and queries near `Qμ` for fixed random matrices `R` and `Q`, so
//! an untrained dual encoder cannot match queries to screenshots, caption
//! pretraining alone does not transfer fully, and fine-tuning on queries
//! closes the gap.

use std::collections::HashMap;

use ndarray::Array2;

use crate::corpus::{Corpus, DomainCategory, Q2STuple, Record, Screenshot};
use crate::embedding::{EmbedderBackend, Embedding, EmbeddingError};
use crate::rng::SplitMix64;
use crate::training::{DualEncoder, TrainingError};

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub clusters: usize,
    pub dim: usize,
    /// Training queries per cluster (each cluster has one training screenshot).
    pub queries_per_cluster: usize,
    /// Noise standard deviation relative to a unit-scale center.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            clusters: 64,
            dim: 32,
            queries_per_cluster: 1,
            noise: 0.1,
            seed: 7,
        }
    }
}

/// Training corpus, held-out evaluation split and the backend that embeds both.
#[derive(Debug, Clone)]
pub struct ClusterFixture {
    pub corpus: Corpus,
    /// One unseen screenshot per cluster.
    pub held_out_screenshots: Vec<Screenshot>,
    /// Unseen query text and the id of its cluster's held-out screenshot.
    pub held_out_queries: Vec<(String, String)>,
    pub backend: TableBackend,
}

/// Backend answering from fixed lookup tables.
#[derive(Debug, Clone)]
pub struct TableBackend {
    dim: usize,
    texts: HashMap<String, Embedding<f32>>,
    screenshots: HashMap<String, Embedding<f32>>,
}

impl TableBackend {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            texts: HashMap::new(),
            screenshots: HashMap::new(),
        }
    }

    pub fn insert_text(&mut self, text: impl Into<String>, v: Embedding<f32>) {
        self.texts.insert(text.into(), v);
    }

    pub fn insert_screenshot(&mut self, id: impl Into<String>, v: Embedding<f32>) {
        self.screenshots.insert(id.into(), v);
    }
}

impl EmbedderBackend for TableBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding<f32>, EmbeddingError> {
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| EmbeddingError::InvalidInput(format!("no embedding for text {text:?}")))
    }

    fn embed_screenshot(&self, screenshot: &Screenshot) -> Result<Embedding<f32>, EmbeddingError> {
        self.screenshots
            .get(&screenshot.id)
            .cloned()
            .ok_or_else(|| EmbeddingError::InvalidInput(format!("no embedding for screenshot {:?}", screenshot.id)))
    }
}

fn gaussian(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.next_gaussian()).collect()
}

fn unit(v: &[f64]) -> Embedding<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Embedding::new(v.iter().map(|x| (x / n) as f32).collect()).expect("finite draws")
}

/// Builds a fixture. Domains alternate between a natural-image domain and a
/// text-heavy one so both mining paths are exercised.
pub fn cluster_fixture(spec: &ClusterSpec) -> ClusterFixture {
    let d = spec.dim;
    let mut rng = SplitMix64::keyed(spec.seed, "synthetic/structure");
    let scale = 1.0 / (d as f64).sqrt();
    let centers: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| gaussian(&mut rng, d).into_iter().map(|x| x * scale).collect())
        .collect();
    let mut view = || -> Vec<Vec<f64>> {
        (0..d)
            .map(|_| gaussian(&mut rng, d).into_iter().map(|x| x * scale).collect())
            .collect()
    };
    let (image_view, query_view) = (view(), view());
    let apply = |m: &[Vec<f64>], v: &[f64]| -> Vec<f64> {
        m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    };
    let mut noise_rng = SplitMix64::keyed(spec.seed, "synthetic/noise");
    let mut jitter = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| x + spec.noise * scale * noise_rng.next_gaussian())
            .collect()
    };

    let mut backend = TableBackend::new(d);
    let mut records = Vec::new();
    let mut held_out_screenshots = Vec::new();
    let mut held_out_queries = Vec::new();
    for (c, mu) in centers.iter().enumerate() {
        let domain = if c % 2 == 0 {
            DomainCategory::Products
        } else {
            DomainCategory::ResearchPapers
        };
        let image = apply(&image_view, mu);
        let asked = apply(&query_view, mu);
        for split in ["train", "test"] {
            let id = format!("c{c:03}-{split}");
            let caption = format!("caption of cluster {c} ({split})");
            backend.insert_screenshot(&id, unit(&jitter(&image)));
            backend.insert_text(&caption, unit(&jitter(mu)));
            let shot = Screenshot::new(&id, domain, format!("synthetic://{id}"), 800, 600, caption);
            if split == "train" {
                records.push(Record::Screenshot(shot));
            } else {
                held_out_screenshots.push(shot);
            }
        }
        for q in 0..spec.queries_per_cluster {
            let query = format!("query {q} about cluster {c}");
            backend.insert_text(&query, unit(&jitter(&asked)));
            records.push(Record::Q2s(Q2STuple {
                query,
                target_id: format!("c{c:03}-train"),
                hard_negative_ids: Vec::new(),
            }));
        }
        let query = format!("held-out query about cluster {c}");
        backend.insert_text(&query, unit(&jitter(&asked)));
        held_out_queries.push((query, format!("c{c:03}-test")));
    }
    ClusterFixture {
        corpus: Corpus::from_records(records).expect("fixture is consistent"),
        held_out_screenshots,
        held_out_queries,
        backend,
    }
}

impl ClusterFixture {
    /// Share of held-out queries whose own cluster's held-out screenshot
    /// scores highest (ties go to the smaller id) under `params`.
    pub fn held_out_recall_at_1(&self, params: &DualEncoder<f64>) -> Result<f64, TrainingError> {
        let features = |vs: Vec<Embedding<f32>>| -> Array2<f64> {
            let d = self.backend.dim;
            let data: Vec<f64> = vs.iter().flat_map(|v| v.values().iter().map(|&x| f64::from(x))).collect();
            Array2::from_shape_vec((vs.len(), d), data).expect("table rows have the backend width")
        };
        let lookup = |e: EmbeddingError| TrainingError::Features(e.to_string());
        let queries = self
            .held_out_queries
            .iter()
            .map(|(q, _)| self.backend.embed_text(q))
            .collect::<Result<Vec<_>, _>>()
            .map_err(lookup)?;
        let shots = self
            .held_out_screenshots
            .iter()
            .map(|s| self.backend.embed_screenshot(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(lookup)?;
        let sim = params
            .encode_queries(&features(queries))?
            .dot(&params.encode_targets(&features(shots))?.t());
        let hits = self
            .held_out_queries
            .iter()
            .enumerate()
            .filter(|(i, (_, gold))| {
                let best = (0..sim.ncols())
                    .max_by(|&a, &b| {
                        sim[[*i, a]]
                            .total_cmp(&sim[[*i, b]])
                            .then_with(|| self.held_out_screenshots[b].id.cmp(&self.held_out_screenshots[a].id))
                    })
                    .expect("fixture has screenshots");
                &self.held_out_screenshots[best].id == gold
            })
            .count();
        Ok(hits as f64 / self.held_out_queries.len() as f64)
    }
}
