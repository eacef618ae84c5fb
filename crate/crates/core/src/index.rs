//! Exact top-k cosine search over unit-norm rows.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EmbeddingError, EmbeddingStore, StoredScalar, UNIT_NORM_TOL};
use crate::scalar::{dot64, norm64};

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, query has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("row {id:?} has norm {norm}, expected 1")]
    NotUnit { id: String, norm: f64 },
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("{} exclusion sets for {} queries", .found, .expected)]
    ExcludeCount { expected: usize, found: usize },
    #[error(transparent)]
    Storage(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Immutable matrix of unit-norm rows keyed by unique ids.
#[derive(Debug, Clone)]
pub struct Index<T> {
    store: EmbeddingStore<T>,
    positions: HashMap<String, usize>,
}

impl<T: StoredScalar> Index<T> {
    /// Validates uniqueness of ids and unit norm of every row.
    pub fn from_store(store: EmbeddingStore<T>) -> Result<Self, IndexError> {
        let mut positions = HashMap::with_capacity(store.len());
        for (i, id) in store.ids().iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(IndexError::DuplicateId(id.clone()));
            }
            let norm = norm64(store.row(i));
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(IndexError::NotUnit {
                    id: id.clone(),
                    norm,
                });
            }
        }
        Ok(Self { store, positions })
    }

    pub fn build<I, S>(dim: usize, rows: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = (S, Embedding<T>)>,
        S: Into<String>,
    {
        let mut store = EmbeddingStore::new(dim);
        for (id, row) in rows {
            store.push(id, &row)?;
        }
        Self::from_store(store)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::from_store(EmbeddingStore::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        Ok(self.store.save(path)?)
    }

    pub fn store(&self) -> &EmbeddingStore<T> {
        &self.store
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        self.store.ids()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn vector(&self, id: &str) -> Option<Embedding<T>> {
        self.positions
            .get(id)
            .map(|&i| Embedding::new(self.store.row(i).to_vec()).expect("rows are finite"))
    }

    /// The `k` highest-scoring rows outside `exclude`, best first, ties by
    /// ascending id. Returns fewer than `k` only when too few rows remain.
    pub fn top_k(
        &self,
        query: &[T],
        k: usize,
        exclude: Option<&HashSet<String>>,
    ) -> Result<Vec<SearchHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.len() != self.dim() {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim(),
                found: query.len(),
            });
        }
        let ids = self.store.ids();
        let mut scored: Vec<(usize, f64)> = (0..ids.len())
            .filter(|&i| exclude.is_none_or(|ex| !ex.contains(&ids[i])))
            .map(|i| (i, dot64(self.store.row(i), query)))
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(r, (i, score))| SearchHit {
                id: ids[i].clone(),
                score,
                rank: r + 1,
            })
            .collect())
    }

    /// Searches with the stored row of `id`.
    pub fn top_k_for_id(
        &self,
        id: &str,
        k: usize,
        exclude: Option<&HashSet<String>>,
    ) -> Result<Vec<SearchHit>, IndexError> {
        let &i = self
            .positions
            .get(id)
            .ok_or_else(|| IndexError::UnknownId(id.to_owned()))?;
        self.top_k(self.store.row(i), k, exclude)
    }

    /// [`Index::top_k`] for each query; output order follows input order.
    /// Runs on the current rayon pool.
    pub fn batch_top_k(
        &self,
        queries: &[Embedding<T>],
        k: usize,
        excludes: Option<&[HashSet<String>]>,
    ) -> Result<Vec<Vec<SearchHit>>, IndexError> {
        if let Some(ex) = excludes {
            if ex.len() != queries.len() {
                return Err(IndexError::ExcludeCount {
                    expected: queries.len(),
                    found: ex.len(),
                });
            }
        }
        queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| self.top_k(q.values(), k, excludes.map(|ex| &ex[i])))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::mock_embed;

    fn unit(v: &[f32]) -> Embedding<f32> {
        Embedding::unit(v.to_vec()).unwrap()
    }

    #[test]
    fn self_retrieval() {
        let idx = Index::build(
            2,
            [("a", unit(&[1.0, 0.0])), ("b", unit(&[0.6, 0.8])), ("c", unit(&[0.0, 1.0]))],
        )
        .unwrap();
        let hits = idx.top_k(unit(&[0.6, 0.8]).values(), 1, None).unwrap();
        assert_eq!(hits[0].id, "b");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(hits[0].rank, 1);
    }

    #[test]
    fn equal_vectors_tie_break_by_id() {
        let v = unit(&[0.3, 0.4]);
        let idx = Index::build(2, [("z", v.clone()), ("m", v.clone()), ("a", v.clone())]).unwrap();
        let hits = idx.top_k(v.values(), 3, None).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["a", "m", "z"]);
    }

    #[test]
    fn exclusions_and_short_results() {
        let idx = Index::build(2, [("a", unit(&[1.0, 0.0])), ("b", unit(&[0.0, 1.0]))]).unwrap();
        let ex: HashSet<String> = ["a".to_string()].into();
        let hits = idx.top_k(unit(&[1.0, 0.0]).values(), 5, Some(&ex)).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "b");
    }

    #[test]
    fn errors() {
        let idx = Index::build(2, [("a", unit(&[1.0, 0.0]))]).unwrap();
        assert!(matches!(idx.top_k(&[1.0, 0.0], 0, None), Err(IndexError::InvalidK)));
        assert!(matches!(
            idx.top_k(&[1.0, 0.0, 0.0], 1, None),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            Index::build(2, [("a", unit(&[1.0, 0.0])), ("a", unit(&[0.0, 1.0]))]),
            Err(IndexError::DuplicateId(_))
        ));
        assert!(matches!(
            Index::build(2, [("a", Embedding::new(vec![2.0f32, 0.0]).unwrap())]),
            Err(IndexError::NotUnit { .. })
        ));
    }

    #[test]
    fn batch_matches_sequential() {
        let idx = Index::build(
            16,
            (0..200).map(|i| (format!("d{i:03}"), mock_embed(1, &format!("d{i}"), 16).unwrap())),
        )
        .unwrap();
        let queries: Vec<_> = (0..100).map(|i| mock_embed(2, &format!("q{i}"), 16).unwrap()).collect();
        let batch = idx.batch_top_k(&queries, 7, None).unwrap();
        for (q, hits) in queries.iter().zip(&batch) {
            assert_eq!(&idx.top_k(q.values(), 7, None).unwrap(), hits);
        }
        let empties = vec![HashSet::new(); queries.len()];
        assert_eq!(idx.batch_top_k(&queries, 7, Some(&empties)).unwrap(), batch);
        assert_eq!(
            idx.batch_top_k(&queries[..1], 7, None).unwrap()[0],
            idx.top_k(queries[0].values(), 7, None).unwrap()
        );
    }
}
