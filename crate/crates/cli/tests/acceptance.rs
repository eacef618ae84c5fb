//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Run with `--nocapture` to see the lines.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use visir::benchmark::{aggregate, TaskCategory, TaskScore};
use visir::corpus::{rejection_reason, Corpus, DomainCategory, FilterConfig, Q2STuple, Record, RejectReason, Screenshot};
use visir::embedding::{EmbedderBackend, Embedding};
use visir::mining::{caption_index, visual_index, Miner, MiningConfig, Provenance};
use visir::resize::{smart_resize, ImageDims, PATCH};
use visir::rng::SplitMix64;
use visir::synthetic::{cluster_fixture, ClusterSpec, TableBackend};
use visir::training::{
    contrastive_loss, train_from, BackendFeatures, Batch, DualEncoder, NegativeSharing, Stage, TrainerConfig,
};
use visir::VectorIndex;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Mean softmax cross-entropy of each anchor row against its own positive,
/// computed with log-sum-exp over the similarity row.
fn oracle_loss(anchors: &Array2<f64>, positives: &Array2<f64>, tau: f64) -> f64 {
    let b = anchors.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = (0..b).map(|j| anchors.row(i).dot(&positives.row(j)) / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / b as f64
}

fn loss_correctness() -> Outcome {
    let eye = Array2::<f64>::eye(2);
    let mut lines = Vec::new();
    for (tau, expected) in [(1.0, 0.3132617), (0.5, 0.1269280)] {
        let (loss, _) = contrastive_loss(eye.view(), eye.view(), tau, None).map_err(|e| e.to_string())?;
        let oracle = oracle_loss(&eye, &eye, tau);
        check((loss - oracle).abs() <= 1e-9, || format!("tau={tau}: {loss} vs oracle {oracle}"))?;
        check((loss - expected).abs() <= 5e-8, || format!("tau={tau}: {loss} vs {expected}"))?;
        lines.push(format!("tau={tau} loss={loss:.7}"));
    }
    let one = ndarray::array![[0.6, 0.8]];
    let (loss, _) = contrastive_loss(one.view(), one.view(), 0.05, None).map_err(|e| e.to_string())?;
    check(loss == 0.0, || format!("|B|=1 gave {loss}"))?;
    Ok(format!("{}; |B|=1 loss=0", lines.join(" ")))
}

fn gaussian(rng: &mut SplitMix64, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.next_gaussian())
}

fn gradient_error(params: &DualEncoder<f64>, batch: &Batch<f64>, stage: Stage) -> Result<f64, String> {
    let h = 1e-5;
    let sharing = NegativeSharing::Shared;
    let grads = params.loss_gradients(batch, stage, sharing).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for tower in 0..2 {
        let analytic = if tower == 0 { &grads.query_proj } else { &grads.target_proj };
        for (idx, &a) in analytic.indexed_iter() {
            let probe = |delta: f64| {
                let mut p = params.clone();
                let w = if tower == 0 { &mut p.query_proj } else { &mut p.target_proj };
                w[idx] += delta;
                p.loss(batch, stage, sharing).expect("valid batch")
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

fn gradient_fidelity() -> Outcome {
    let seeds = 24u64;
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = SplitMix64::keyed(seed, "acceptance/gradcheck");
        let params = DualEncoder::init(8, 4, 0.5, seed).map_err(|e| e.to_string())?;
        let b1 = Batch::new(gaussian(&mut rng, 4, 8), gaussian(&mut rng, 4, 8), None).map_err(|e| e.to_string())?;
        let hard = Some(gaussian(&mut rng, 4, 8));
        let b2 = Batch::new(gaussian(&mut rng, 4, 8), gaussian(&mut rng, 4, 8), hard).map_err(|e| e.to_string())?;
        for (batch, stage) in [(&b1, Stage::Pretrain), (&b2, Stage::Finetune)] {
            let err = gradient_error(&params, batch, stage)?;
            check(err <= 1e-4, || format!("seed {seed} {stage:?}: relative error {err:e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("{seeds} seeds, both stages, max relative error {worst:.2e}"))
}

fn aggregation() -> Outcome {
    let table: [(TaskCategory, &[f64]); 4] = [
        (TaskCategory::SR, &[75.40, 90.26, 83.33, 75.96, 36.50, 50.50, 75.50]),
        (TaskCategory::CSR, &[41.00, 44.55, 51.40, 81.00]),
        (TaskCategory::SQA, &[57.00, 47.60, 25.10, 46.70, 39.60]),
        (TaskCategory::OVC, &[45.40, 69.34, 52.91, 25.40]),
    ];
    let scores: Vec<TaskScore> = table
        .iter()
        .flat_map(|(cat, values)| {
            values.iter().enumerate().map(move |(i, &score)| TaskScore {
                name: format!("{}-{i}", cat.name()),
                category: *cat,
                domain_tag: "Others".into(),
                score,
            })
        })
        .collect();
    let report = aggregate(&scores, 1);
    let expected = [
        (TaskCategory::SR, 69.64),
        (TaskCategory::CSR, 54.49),
        (TaskCategory::SQA, 43.20),
        (TaskCategory::OVC, 48.26),
    ];
    for (cat, want) in expected {
        let got = report.per_category[&cat];
        check((got - want).abs() <= 0.01, || format!("{}: {got:.4} vs {want}", cat.name()))?;
    }
    let overall = report.overall.ok_or("no overall score")?;
    check((overall - 55.72).abs() <= 0.01, || format!("overall {overall:.4} vs 55.72"))?;
    let cats: Vec<String> = expected
        .iter()
        .map(|(c, _)| format!("{}={:.2}", c.name(), report.per_category[c]))
        .collect();
    Ok(format!("{} overall={overall:.2}", cats.join(" ")))
}

fn smart_resize_properties() -> Outcome {
    let mut rng = SplitMix64::keyed(0, "acceptance/resize");
    let mut clamped = 0;
    for _ in 0..10_000 {
        let h = 1 + rng.next_u64() % 20_000;
        let w = 1 + rng.next_u64() % 20_000;
        for m in [100, 2500, 10_000] {
            let dims = ImageDims::new(h, w);
            let plan = smart_resize(dims, m);
            check(plan.token_count <= m, || format!("({h},{w},{m}): {} tokens", plan.token_count))?;
            check(
                plan.out_height % PATCH == 0 && plan.out_width % PATCH == 0 && plan.out_height > 0 && plan.out_width > 0,
                || format!("({h},{w},{m}): {}x{} not aligned", plan.out_height, plan.out_width),
            )?;
            check(plan.token_count == (plan.out_height / PATCH) * (plan.out_width / PATCH), || {
                format!("({h},{w},{m}): token count disagrees with size")
            })?;
            if plan.clamped {
                clamped += 1;
            } else {
                let d = plan.aspect_distortion(dims);
                check(d <= plan.rounding_bound() + 1e-12, || {
                    format!("({h},{w},{m}): distortion {d} > {}", plan.rounding_bound())
                })?;
            }
        }
    }
    let plan = smart_resize(ImageDims::new(3000, 4000), 2500);
    check((plan.out_height, plan.out_width) == (1204, 1596), || {
        format!("(3000,4000) -> ({}, {})", plan.out_height, plan.out_width)
    })?;
    Ok(format!("30000 plans, {clamped} clamped; (3000,4000,2500) -> (1204,1596)"))
}

fn index_exactness() -> Outcome {
    let mut rng = SplitMix64::keyed(1, "acceptance/index");
    let dim = 64;
    let mut rows: Vec<(String, Embedding<f32>)> = Vec::new();
    for i in 0..1000 {
        // every tenth row repeats an earlier vector so ties must break by id
        let v = if i % 10 == 9 {
            rows[i - 5].1.clone()
        } else {
            let raw: Vec<f32> = (0..dim).map(|_| rng.next_gaussian() as f32).collect();
            Embedding::unit(raw).map_err(|e| e.to_string())?
        };
        rows.push((format!("v{:04}", (i * 7919) % 1000), v));
    }
    let index = VectorIndex::build(dim, rows.clone()).map_err(|e| e.to_string())?;
    for q in 0..20 {
        let probe = if q % 2 == 0 {
            rows[q * 37].1.clone()
        } else {
            Embedding::unit((0..dim).map(|_| rng.next_gaussian() as f32).collect()).map_err(|e| e.to_string())?
        };
        let mut brute: Vec<(f64, &str)> = rows
            .iter()
            .map(|(id, v)| {
                let s = v.values().iter().zip(probe.values()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
                (s, id.as_str())
            })
            .collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        for k in [1, 10, 100] {
            let hits = index.top_k(probe.values(), k, None).map_err(|e| e.to_string())?;
            let got: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
            let want: Vec<&str> = brute[..k].iter().map(|(_, id)| *id).collect();
            check(got == want, || format!("query {q}, k={k}: order differs"))?;
        }
    }
    Ok("1000 rows at dim 64, 20 probes, k in {1,10,100}, ties included".into())
}

/// Twenty screenshots on an arc at distinct, non-uniformly spaced angles so
/// every ranking is unambiguous.
fn mining_fixture() -> (Corpus, TableBackend) {
    let at = |theta: f64, phase: f64| {
        Embedding::unit(vec![theta.cos() as f32, theta.sin() as f32, phase as f32]).expect("finite")
    };
    let mut backend = TableBackend::new(3);
    let mut records = Vec::new();
    for i in 0..20usize {
        let id = format!("s{i:02}");
        let caption = format!("caption {i}");
        let theta = 0.04 * (i as f64).powf(1.3);
        backend.insert_text(&caption, at(theta, 0.1));
        // screenshots follow a different order so visual neighbours differ from caption neighbours
        let shuffled = 0.04 * (((i * 7) % 20) as f64).powf(1.3);
        backend.insert_screenshot(&id, at(shuffled, 0.3));
        backend.insert_text(format!("query {i}"), at(theta + 0.013, 0.12));
        let domain = DomainCategory::ALL[i % DomainCategory::ALL.len()];
        records.push(Record::Screenshot(Screenshot::new(&id, domain, format!("img/{id}"), 800, 600, caption)));
        records.push(Record::Q2s(Q2STuple {
            query: format!("query {i}"),
            target_id: id,
            hard_negative_ids: Vec::new(),
        }));
    }
    (Corpus::from_records(records).expect("consistent"), backend)
}

fn ranked(index: &VectorIndex, probe: &[f32]) -> Vec<String> {
    let mut scored: Vec<(f64, String)> = index
        .ids()
        .iter()
        .map(|id| {
            let v = index.vector(id).expect("own id");
            let s = v.values().iter().zip(probe).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            (s, id.clone())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, id)| id).collect()
}

fn mining_soundness() -> Outcome {
    let (corpus, backend) = mining_fixture();
    let text = caption_index(&corpus, &backend).map_err(|e| e.to_string())?;
    let vis = visual_index(&corpus, &backend).map_err(|e| e.to_string())?;
    let cfg = MiningConfig {
        seed: 42,
        ..Default::default()
    };
    let miner = Miner::new(&corpus, &text, Some(&vis), &backend, cfg.clone()).map_err(|e| e.to_string())?;
    let again = Miner::new(&corpus, &text, Some(&vis), &backend, cfg).map_err(|e| e.to_string())?;
    let mut visual_seen = 0;
    for tuple in corpus.q2s() {
        let target = corpus.get(&tuple.target_id).ok_or("dangling target")?;
        let pools = miner.q2s_pools(tuple).map_err(|e| e.to_string())?;
        let q = backend.embed_text(&tuple.query).map_err(|e| e.to_string())?;
        let by_query = ranked(&text, q.values());
        let by_target = ranked(&text, text.vector(&target.id).ok_or("no caption row")?.values());
        check(pools.get(Provenance::FromQueryText) == Some(&by_query[1..15]), || {
            format!("{}: query window differs", tuple.query)
        })?;
        check(pools.get(Provenance::FromTargetText) == Some(&by_target[3..10]), || {
            format!("{}: target window differs", tuple.query)
        })?;
        let set = miner.mine_q2s_negatives(tuple).map_err(|e| e.to_string())?;
        check(set.negatives.len() == 8, || format!("{}: {} negatives", tuple.query, set.negatives.len()))?;
        check(!set.negatives.contains(&tuple.target_id), || format!("{}: positive emitted", tuple.query))?;
        check(set == again.mine_q2s_negatives(tuple).map_err(|e| e.to_string())?, || {
            format!("{}: sample not reproducible", tuple.query)
        })?;
        let visual = set.provenance.iter().any(|p| *p == Provenance::FromTargetVisual);
        check(!visual || target.visual_flag, || format!("{}: visual provenance on text domain", tuple.query))?;
        check(target.visual_flag == pools.get(Provenance::FromTargetVisual).is_some(), || {
            format!("{}: visual window presence", tuple.query)
        })?;
        visual_seen += usize::from(visual);
    }
    check(visual_seen > 0, || "no visual negatives sampled".into())?;
    Ok(format!("20 samples checked against brute-force windows, {visual_seen} with visual negatives"))
}

/// Means of five equal consecutive segments.
fn segment_means(losses: &[f64]) -> Vec<f64> {
    let n = losses.len() / 5;
    losses.chunks(n).take(5).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

fn toy_training() -> Outcome {
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let fx = cluster_fixture(&ClusterSpec::default());
        let text = caption_index(&fx.corpus, &fx.backend).map_err(|e| e.to_string())?;
        let vis = visual_index(&fx.corpus, &fx.backend).map_err(|e| e.to_string())?;
        let miner = Miner::new(&fx.corpus, &text, Some(&vis), &fx.backend, MiningConfig::default())
            .map_err(|e| e.to_string())?;
        let (mined, _) = miner.augment().map_err(|e| e.to_string())?;
        let cfg = TrainerConfig {
            initial_lr: 0.5,
            epochs_per_stage: 60,
            batch_size_stage1: 64,
            batch_size_stage2: 32,
            embedding_dim: 32,
            negative_sharing: NegativeSharing::PerQuery,
            ..Default::default()
        };
        let features = BackendFeatures::new(&fx.backend);
        let init = DualEncoder::init(32, 32, cfg.temperature, cfg.seed).map_err(|e| e.to_string())?;
        let before = fx.held_out_recall_at_1(&init).map_err(|e| e.to_string())?;
        let out = train_from(&mined, &features, &cfg, init).map_err(|e| e.to_string())?;
        let after = fx.held_out_recall_at_1(&out.params).map_err(|e| e.to_string())?;
        check(after >= 0.9 && after > before, || format!("Recall@1 {before:.3} -> {after:.3}"))?;
        for stage in [1u8, 2] {
            let losses: Vec<f64> = out.trace.iter().filter(|t| t.stage == stage).map(|t| t.loss).collect();
            let means = segment_means(&losses);
            check(means.len() == 5 && means.windows(2).all(|w| w[1] < w[0]), || {
                format!("stage {stage} segment means not decreasing: {means:?}")
            })?;
        }
        let elapsed = started.elapsed().as_secs_f64();
        check(elapsed < 120.0, || format!("took {elapsed:.1}s"))?;
        Ok(format!("Recall@1 {before:.3} -> {after:.3}, both stages decrease, {elapsed:.1}s on one thread"))
    })
}

fn filter_rules() -> Outcome {
    let cfg = FilterConfig::default();
    let long = "x".repeat(100);
    let shot = |w: u32, h: u32, caption: &str| Screenshot::new("f", DomainCategory::News, "img", w, h, caption);
    let cases = [
        ("ratio 10", shot(1000, 100, &long), Some(RejectReason::Aspect)),
        ("99-char caption", shot(800, 600, &long[..99]), Some(RejectReason::CaptionLength)),
        ("100-char caption", shot(800, 600, &long), None),
    ];
    for (name, s, want) in &cases {
        let got = rejection_reason(s, &cfg);
        check(got == *want, || format!("{name}: {got:?} vs {want:?}"))?;
    }
    Ok("ratio 10 rejected, 99 chars rejected, 100 chars kept".into())
}

fn bench_eval(threads: usize, out: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy");
    let status = Command::new(env!("CARGO_BIN_EXE_visir"))
        .args(["--threads", &threads.to_string(), "--out"])
        .arg(out)
        .arg("bench-eval")
        .arg("--tasks")
        .arg(root.join("tasks.jsonl"))
        .arg("--corpus")
        .arg(root.join("corpus.jsonl"))
        .output()
        .map_err(|e| e.to_string())?;
    check(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    let read = |name: &str| std::fs::read(out.join(name)).map_err(|e| format!("{name}: {e}"));
    Ok((read("report.txt")?, read("report.jsonl")?))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = [1usize, 1, 1, 8]
        .iter()
        .enumerate()
        .map(|(i, &t)| bench_eval(t, &dir.path().join(format!("run{i}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let distinct: HashSet<_> = runs.iter().collect();
    check(distinct.len() == 1, || format!("{} distinct report pairs", distinct.len()))?;
    Ok(format!(
        "3 runs at --threads 1 and one at --threads 8 agree byte for byte ({} + {} bytes)",
        runs[0].0.len(),
        runs[0].1.len()
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("loss correctness", loss_correctness),
        ("gradient fidelity", gradient_fidelity),
        ("aggregation", aggregation),
        ("smart resize", smart_resize_properties),
        ("index exactness", index_exactness),
        ("mining soundness", mining_soundness),
        ("toy training", toy_training),
        ("filter rules", filter_rules),
        ("bench-eval determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                println!("FAIL {name} ({secs:.2}s): {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
