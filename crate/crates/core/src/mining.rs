//! Hard-negative mining for q2s tuples and pair/negative mining for sq2s
//! triplets.
//!
//! Candidates come from exclusion windows over exact rankings of the whole
//! corpus: the top `N` hits of a probe minus its top `E` hits, which are
//! likely unlabeled positives. The positive (and, for triplets, the source)
//! is always removed. Windows are merged in a fixed order with duplicates
//! dropped, then a uniform sample is drawn without replacement from a
//! SplitMix64 stream keyed by the run seed and the sample, so results do not
//! depend on the order in which samples are processed.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Q2STuple, SQ2STriplet, Screenshot};
use crate::embedding::{EmbedderBackend, EmbeddingError};
use crate::index::IndexError;
use crate::rng::SplitMix64;
use crate::VectorIndex;

#[derive(Debug, thiserror::Error)]
pub enum MiningError {
    #[error("screenshot {0:?} is not in the index")]
    MissingFromIndex(String),
    #[error("corpus has {0} item(s); pair mining needs at least 2")]
    CorpusTooSmall(usize),
    #[error("invalid mining config: {0}")]
    Config(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub q_top: usize,
    pub q_exclude_top: usize,
    pub t_top: usize,
    pub t_exclude_top: usize,
    pub visual_top: usize,
    pub visual_exclude_top: usize,
    pub sample_count: usize,
    pub pair_top: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            q_top: 15,
            q_exclude_top: 1,
            t_top: 10,
            t_exclude_top: 3,
            visual_top: 10,
            visual_exclude_top: 2,
            sample_count: 8,
            pair_top: 10,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        let windows = [
            ("q", self.q_top, self.q_exclude_top),
            ("t", self.t_top, self.t_exclude_top),
            ("visual", self.visual_top, self.visual_exclude_top),
        ];
        for (name, top, excl) in windows {
            if excl >= top {
                return Err(MiningError::Config(format!(
                    "{name}_exclude_top ({excl}) must be below {name}_top ({top})"
                )));
            }
        }
        if self.sample_count == 0 || self.pair_top == 0 {
            return Err(MiningError::Config("sample_count and pair_top must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which probe surfaced a negative. When several windows contain the same id,
/// the first in merge order wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    FromQueryText,
    FromSourceText,
    FromSourceVisual,
    FromTargetText,
    FromTargetVisual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSet {
    pub sample_ref: String,
    pub negatives: Vec<String>,
    pub provenance: Vec<Provenance>,
    /// The merged pool was empty after exclusions.
    pub empty_pool: bool,
}

/// Ranked windows for one sample, before merging and sampling.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidatePools {
    pub windows: Vec<(Provenance, Vec<String>)>,
}

impl CandidatePools {
    /// Deduplicated union in window order, without the excluded positives.
    pub fn merged(&self, positives: &[&str]) -> Vec<(String, Provenance)> {
        let mut seen: HashSet<&str> = positives.iter().copied().collect();
        let mut out = Vec::new();
        for (prov, ids) in &self.windows {
            for id in ids {
                if seen.insert(id) {
                    out.push((id.clone(), *prov));
                }
            }
        }
        out
    }

    pub fn get(&self, provenance: Provenance) -> Option<&[String]> {
        self.windows
            .iter()
            .find(|(p, _)| *p == provenance)
            .map(|(_, ids)| ids.as_slice())
    }
}

/// Caption embeddings keyed by screenshot id.
pub fn caption_index(corpus: &Corpus, embedder: &dyn EmbedderBackend) -> Result<VectorIndex, MiningError> {
    let captions: Vec<&str> = corpus.screenshots().iter().map(|s| s.caption.as_str()).collect();
    let vectors = embedder.embed_texts(&captions)?;
    Ok(VectorIndex::build(
        embedder.dim(),
        corpus.screenshots().iter().map(|s| s.id.clone()).zip(vectors),
    )?)
}

/// Screenshot embeddings keyed by id.
pub fn visual_index(corpus: &Corpus, embedder: &dyn EmbedderBackend) -> Result<VectorIndex, MiningError> {
    let shots: Vec<&Screenshot> = corpus.screenshots().iter().collect();
    let vectors = embedder.embed_screenshots(&shots)?;
    Ok(VectorIndex::build(
        embedder.dim(),
        corpus.screenshots().iter().map(|s| s.id.clone()).zip(vectors),
    )?)
}

/// Mining context: caption-embedding index, optional screenshot-embedding
/// index, and the backend that embeds query text.
pub struct Miner<'a> {
    corpus: &'a Corpus,
    text_index: &'a VectorIndex,
    visual_index: Option<&'a VectorIndex>,
    embedder: &'a dyn EmbedderBackend,
    cfg: MiningConfig,
}

impl<'a> Miner<'a> {
    pub fn new(
        corpus: &'a Corpus,
        text_index: &'a VectorIndex,
        visual_index: Option<&'a VectorIndex>,
        embedder: &'a dyn EmbedderBackend,
        cfg: MiningConfig,
    ) -> Result<Self, MiningError> {
        cfg.validate()?;
        Ok(Self {
            corpus,
            text_index,
            visual_index,
            embedder,
            cfg,
        })
    }

    pub fn config(&self) -> &MiningConfig {
        &self.cfg
    }

    fn window_for_vector(&self, index: &VectorIndex, probe: &[f32], top: usize, skip: usize) -> Result<Vec<String>, MiningError> {
        Ok(index
            .top_k(probe, top, None)?
            .into_iter()
            .skip(skip)
            .map(|h| h.id)
            .collect())
    }

    fn window_for_id(&self, index: &VectorIndex, id: &str, top: usize, skip: usize) -> Result<Vec<String>, MiningError> {
        let probe = index
            .vector(id)
            .ok_or_else(|| MiningError::MissingFromIndex(id.to_owned()))?;
        self.window_for_vector(index, probe.values(), top, skip)
    }

    fn is_visual(&self, id: &str) -> bool {
        self.corpus.get(id).is_some_and(|s| s.visual_flag)
    }

    fn screenshot_windows(
        &self,
        id: &str,
        text: Provenance,
        visual: Provenance,
        pools: &mut CandidatePools,
    ) -> Result<(), MiningError> {
        let c = &self.cfg;
        pools
            .windows
            .push((text, self.window_for_id(self.text_index, id, c.t_top, c.t_exclude_top)?));
        if let Some(vi) = self.visual_index {
            if self.is_visual(id) {
                pools
                    .windows
                    .push((visual, self.window_for_id(vi, id, c.visual_top, c.visual_exclude_top)?));
            }
        }
        Ok(())
    }

    fn query_window(&self, query: &str) -> Result<Vec<String>, MiningError> {
        let q = self.embedder.embed_text(query)?.normalized()?;
        self.window_for_vector(self.text_index, q.values(), self.cfg.q_top, self.cfg.q_exclude_top)
    }

    /// Query-text window, target-caption window and, for domains with natural
    /// images, target-visual window.
    pub fn q2s_pools(&self, tuple: &Q2STuple) -> Result<CandidatePools, MiningError> {
        if !self.text_index.contains(&tuple.target_id) {
            return Err(MiningError::MissingFromIndex(tuple.target_id.clone()));
        }
        let mut pools = CandidatePools::default();
        pools.windows.push((Provenance::FromQueryText, self.query_window(&tuple.query)?));
        self.screenshot_windows(
            &tuple.target_id,
            Provenance::FromTargetText,
            Provenance::FromTargetVisual,
            &mut pools,
        )?;
        Ok(pools)
    }

    /// Conditioned-query window plus caption and visual windows of both the
    /// source and the target screenshot.
    pub fn sq2s_pools(&self, triplet: &SQ2STriplet) -> Result<CandidatePools, MiningError> {
        for id in [&triplet.source_id, &triplet.target_id] {
            if !self.text_index.contains(id) {
                return Err(MiningError::MissingFromIndex(id.clone()));
            }
        }
        let mut pools = CandidatePools::default();
        pools.windows.push((Provenance::FromQueryText, self.query_window(&triplet.query)?));
        self.screenshot_windows(
            &triplet.source_id,
            Provenance::FromSourceText,
            Provenance::FromSourceVisual,
            &mut pools,
        )?;
        self.screenshot_windows(
            &triplet.target_id,
            Provenance::FromTargetText,
            Provenance::FromTargetVisual,
            &mut pools,
        )?;
        Ok(pools)
    }

    fn sample(&self, key: String, pools: &CandidatePools, positives: &[&str]) -> NegativeSet {
        let merged = pools.merged(positives);
        let mut rng = SplitMix64::keyed(self.cfg.seed, &key);
        let picked = rng.sample(&merged, self.cfg.sample_count);
        NegativeSet {
            sample_ref: key,
            empty_pool: merged.is_empty(),
            negatives: picked.iter().map(|(id, _)| id.clone()).collect(),
            provenance: picked.iter().map(|(_, p)| *p).collect(),
        }
    }

    pub fn mine_q2s_negatives(&self, tuple: &Q2STuple) -> Result<NegativeSet, MiningError> {
        let pools = self.q2s_pools(tuple)?;
        Ok(self.sample(tuple.sample_key(), &pools, &[&tuple.target_id]))
    }

    pub fn mine_sq2s_negatives(&self, triplet: &SQ2STriplet) -> Result<NegativeSet, MiningError> {
        let pools = self.sq2s_pools(triplet)?;
        Ok(self.sample(
            triplet.sample_key(),
            &pools,
            &[&triplet.source_id, &triplet.target_id],
        ))
    }

    /// Candidates for the partner of `seed`: its top `pair_top` neighbours by
    /// caption (and, for visual domains with a visual index, by screenshot),
    /// itself excluded.
    pub fn pair_candidates(&self, seed: &Screenshot) -> Result<Vec<String>, MiningError> {
        if self.text_index.len() < 2 {
            return Err(MiningError::CorpusTooSmall(self.text_index.len()));
        }
        let me: HashSet<String> = [seed.id.clone()].into();
        let top = self.cfg.pair_top;
        let probe = |index: &VectorIndex| -> Result<Vec<String>, MiningError> {
            let v = index
                .vector(&seed.id)
                .ok_or_else(|| MiningError::MissingFromIndex(seed.id.clone()))?;
            Ok(index
                .top_k(v.values(), top, Some(&me))?
                .into_iter()
                .map(|h| h.id)
                .collect())
        };
        let mut pool = probe(self.text_index)?;
        if let Some(vi) = self.visual_index {
            if seed.visual_flag {
                for id in probe(vi)? {
                    if !pool.contains(&id) {
                        pool.push(id);
                    }
                }
            }
        }
        Ok(pool)
    }

    /// Uniformly picks a relevant partner screenshot for `seed`.
    pub fn mine_sq2s_pair(&self, seed: &Screenshot) -> Result<String, MiningError> {
        let pool = self.pair_candidates(seed)?;
        let mut rng = SplitMix64::keyed(self.cfg.seed, &format!("pair\u{1f}{}", seed.id));
        Ok(pool[rng.below(pool.len() as u64) as usize].clone())
    }

    /// Mines negatives for every sample of the corpus (in parallel on the
    /// current rayon pool) and returns the augmented corpus together with the
    /// per-sample negative sets in corpus order.
    pub fn augment(&self) -> Result<(Corpus, Vec<NegativeSet>), MiningError> {
        let q2s: Vec<(Q2STuple, NegativeSet)> = self
            .corpus
            .q2s()
            .par_iter()
            .map(|t| {
                let set = self.mine_q2s_negatives(t)?;
                Ok((
                    Q2STuple {
                        hard_negative_ids: set.negatives.clone(),
                        ..t.clone()
                    },
                    set,
                ))
            })
            .collect::<Result<_, MiningError>>()?;
        let sq2s: Vec<(SQ2STriplet, NegativeSet)> = self
            .corpus
            .sq2s()
            .par_iter()
            .map(|t| {
                let set = self.mine_sq2s_negatives(t)?;
                Ok((
                    SQ2STriplet {
                        hard_negative_ids: set.negatives.clone(),
                        ..t.clone()
                    },
                    set,
                ))
            })
            .collect::<Result<_, MiningError>>()?;
        let (q_samples, q_sets): (Vec<_>, Vec<_>) = q2s.into_iter().unzip();
        let (s_samples, s_sets): (Vec<_>, Vec<_>) = sq2s.into_iter().unzip();
        let corpus = self
            .corpus
            .with_samples(q_samples, s_samples)
            .expect("mined negatives reference indexed screenshots and exclude positives");
        Ok((corpus, q_sets.into_iter().chain(s_sets).collect()))
    }
}
