use std::collections::HashSet;

use visir::corpus::{Corpus, DomainCategory, Q2STuple, Record, SQ2STriplet, Screenshot};
use visir::embedding::{EmbedderBackend, MockBackend};
use visir::mining::{caption_index, visual_index, Miner, MiningConfig, Provenance};
use visir::VectorIndex;

fn corpus(n: usize) -> Corpus {
    Corpus::from_records((0..n).map(|i| {
        Record::Screenshot(Screenshot::new(
            format!("s{i:02}"),
            DomainCategory::ALL[i % 7],
            format!("img/{i}"),
            800,
            600,
            format!("caption {i}"),
        ))
    }))
    .unwrap()
}

/// Ids ranked by a full sort of f64 scores, ties by id.
fn brute(index: &VectorIndex, probe: &[f32]) -> Vec<String> {
    let mut scored: Vec<(f64, &String)> = index
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let row = index.store().row(i);
            (row.iter().zip(probe).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum(), id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().map(|(_, id)| id.clone()).collect()
}

fn window(index: &VectorIndex, probe: &[f32], top: usize, skip: usize) -> Vec<String> {
    brute(index, probe)[skip..top].to_vec()
}

#[test]
fn q2s_windows_match_brute_force() {
    let c = corpus(20);
    let backend = MockBackend::new(4, 16).unwrap();
    let text = caption_index(&c, &backend).unwrap();
    let vis = visual_index(&c, &backend).unwrap();
    let cfg = MiningConfig {
        seed: 42,
        ..Default::default()
    };
    let miner = Miner::new(&c, &text, Some(&vis), &backend, cfg.clone()).unwrap();
    for s in c.screenshots() {
        let tuple = Q2STuple {
            query: format!("question about {}", s.id),
            target_id: s.id.clone(),
            hard_negative_ids: vec![],
        };
        let pools = miner.q2s_pools(&tuple).unwrap();
        let q = backend.embed_text(&tuple.query).unwrap();
        assert_eq!(pools.get(Provenance::FromQueryText).unwrap(), window(&text, q.values(), 15, 1));
        let t = text.vector(&s.id).unwrap();
        assert_eq!(pools.get(Provenance::FromTargetText).unwrap(), window(&text, t.values(), 10, 3));
        assert_eq!(pools.get(Provenance::FromTargetVisual).is_some(), s.visual_flag);

        let set = miner.mine_q2s_negatives(&tuple).unwrap();
        assert_eq!(set.negatives.len(), 8);
        assert!(!set.negatives.contains(&s.id));
        assert_eq!(set.negatives.iter().collect::<HashSet<_>>().len(), 8);
        assert_eq!(set, miner.mine_q2s_negatives(&tuple).unwrap());
        for (id, prov) in set.negatives.iter().zip(&set.provenance) {
            assert!(pools.get(*prov).unwrap().contains(id));
        }
    }
}

#[test]
fn sq2s_pools_cover_source_and_target() {
    let c = corpus(30);
    let backend = MockBackend::new(8, 16).unwrap();
    let text = caption_index(&c, &backend).unwrap();
    let vis = visual_index(&c, &backend).unwrap();
    let miner = Miner::new(&c, &text, Some(&vis), &backend, MiningConfig::default()).unwrap();
    for i in 0..30 {
        let (src, tgt) = (&c.screenshots()[i], &c.screenshots()[(i + 7) % 30]);
        let triplet = SQ2STriplet {
            source_id: src.id.clone(),
            query: format!("like {} but newer", src.id),
            target_id: tgt.id.clone(),
            hard_negative_ids: vec![],
        };
        let pools = miner.sq2s_pools(&triplet).unwrap();
        let mut allowed: HashSet<String> = HashSet::new();
        let q = backend.embed_text(&triplet.query).unwrap();
        allowed.extend(window(&text, q.values(), 15, 1));
        for s in [src, tgt] {
            allowed.extend(window(&text, text.vector(&s.id).unwrap().values(), 10, 3));
            if s.visual_flag {
                allowed.extend(window(&vis, vis.vector(&s.id).unwrap().values(), 10, 2));
            }
        }
        let merged: HashSet<String> = pools
            .merged(&[&triplet.source_id, &triplet.target_id])
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        allowed.remove(&src.id);
        allowed.remove(&tgt.id);
        assert_eq!(merged, allowed);
        let set = miner.mine_sq2s_negatives(&triplet).unwrap();
        assert!(set.negatives.iter().all(|n| n != &src.id && n != &tgt.id && allowed.contains(n)));
        if !src.visual_flag {
            assert!(!set.provenance.contains(&Provenance::FromSourceVisual));
        }
        if !tgt.visual_flag {
            assert!(!set.provenance.contains(&Provenance::FromTargetVisual));
        }
    }
}

#[test]
fn pairs_come_from_neighbour_windows() {
    let c = corpus(50);
    let backend = MockBackend::new(2, 16).unwrap();
    let text = caption_index(&c, &backend).unwrap();
    let vis = visual_index(&c, &backend).unwrap();
    let miner = Miner::new(&c, &text, Some(&vis), &backend, MiningConfig::default()).unwrap();
    for s in c.screenshots() {
        let mut allowed: HashSet<String> = brute(&text, text.vector(&s.id).unwrap().values())
            .into_iter()
            .filter(|id| id != &s.id)
            .take(10)
            .collect();
        if s.visual_flag {
            allowed.extend(
                brute(&vis, vis.vector(&s.id).unwrap().values())
                    .into_iter()
                    .filter(|id| id != &s.id)
                    .take(10),
            );
        }
        let pool: HashSet<String> = miner.pair_candidates(s).unwrap().into_iter().collect();
        assert_eq!(pool, allowed);
        let pair = miner.mine_sq2s_pair(s).unwrap();
        assert_ne!(pair, s.id);
        assert!(allowed.contains(&pair));
        assert_eq!(pair, miner.mine_sq2s_pair(s).unwrap());
    }
}

#[test]
fn augment_is_independent_of_thread_count() {
    let mut records: Vec<Record> = corpus(25).records().collect();
    records.extend((0..25).map(|i| {
        Record::Q2s(Q2STuple {
            query: format!("q{i}"),
            target_id: format!("s{i:02}"),
            hard_negative_ids: vec![],
        })
    }));
    let c = Corpus::from_records(records).unwrap();
    let backend = MockBackend::new(3, 12).unwrap();
    let text = caption_index(&c, &backend).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let miner = Miner::new(&c, &text, None, &backend, MiningConfig::default()).unwrap();
            miner.augment().unwrap()
        })
    };
    let (a, sets_a) = run(1);
    let (b, sets_b) = run(8);
    assert_eq!(a, b);
    assert_eq!(sets_a, sets_b);
    assert!(sets_a.iter().all(|s| !s.provenance.contains(&Provenance::FromTargetVisual)));
}
