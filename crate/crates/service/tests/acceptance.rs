//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use genir_core::curation::{curate, read_trajectories, CurationJob, CurationManifest};
use genir_core::eval::{
    hits_curve, oracle_curve, random_select_rate, HitsConvention, HitsCurve, SessionOutcome,
};
use genir_core::gateway::{Gateway, MockWorld, MockWorldConfig, RefineMode};
use genir_core::index::build_index;
use genir_core::rng::{gaussian_direction, stable_hash64};
use genir_core::session::{
    EmbeddedImages, Engine, FeedbackMode, LatencyClock, MemoryImageStore, NominalLatencies,
    SessionConfig, SessionTrace,
};
use genir_core::embedding::normalize;
use genir_core::{ImageRecord, IndexSnapshot};
use genir_service::api::SessionView;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Verbal, visual, oracle, random-select, oracle gain, random gain; one row
/// per dialog length 0..=10.
const TABLE: [[f64; 6]; 11] = [
    [74.48, 89.71, 93.40, 77.88, 18.92, 3.40],
    [82.73, 93.11, 95.97, 85.06, 13.25, 2.33],
    [85.83, 95.00, 97.43, 87.89, 11.60, 2.06],
    [87.97, 95.97, 97.91, 89.76, 9.95, 1.79],
    [89.13, 96.51, 98.20, 90.81, 9.07, 1.68],
    [89.96, 96.85, 98.30, 91.50, 8.35, 1.54],
    [90.49, 97.14, 98.59, 91.98, 8.10, 1.49],
    [90.98, 97.48, 98.64, 92.42, 7.67, 1.44],
    [91.27, 97.67, 98.79, 92.69, 7.52, 1.42],
    [91.80, 97.72, 98.79, 93.13, 6.99, 1.33],
    [92.33, 98.01, 98.88, 93.62, 6.55, 1.29],
];

const VISUAL_SHARE: f64 = 0.223;

/// Mock world where retrieval is hard at the first round: low dimension,
/// large database, heavy noise. The text channel is noisier than the image
/// channel.
fn acceptance_world() -> MockWorldConfig {
    MockWorldConfig {
        dim: 64,
        noise_sigma_0: 2.5,
        noise_decay: 0.8,
        seed: 2024,
        blend_alpha: 0.5,
        description_sigma: 2.5,
        text_sigma: 3.5,
    }
}

const DATABASE_SIZE: usize = 2000;

struct Fixture {
    index: Arc<IndexSnapshot>,
    gateway: Gateway,
}

impl Fixture {
    fn new() -> Self {
        let w = MockWorld::new(acceptance_world()).unwrap();
        let index = Arc::new(build_index(w.database_records(DATABASE_SIZE), 64).unwrap());
        Self {
            index,
            gateway: Gateway::mock(w),
        }
    }

    fn engine(&self, seed: u64) -> Engine {
        Engine::new(
            self.index.clone(),
            self.gateway.clone(),
            Arc::new(MemoryImageStore::new()),
            Arc::new(EmbeddedImages),
        )
        .unwrap()
        .with_clock(LatencyClock::Nominal(NominalLatencies::default()))
        .with_seed(seed)
    }

    fn run(&self, engine: &Engine, mode: FeedbackMode, sessions: usize) -> Vec<SessionTrace> {
        let config = SessionConfig::curation(mode);
        (0..sessions)
            .map(|i| {
                engine
                    .run_simulated_session(config, &MockWorld::database_id(i))
                    .unwrap()
            })
            .collect()
    }
}

fn outcomes(traces: &[SessionTrace]) -> Vec<SessionOutcome> {
    traces
        .iter()
        .map(|t| SessionOutcome::from_trace(t).unwrap())
        .collect()
}

fn fmt_rates(c: &HitsCurve) -> String {
    c.rates
        .iter()
        .map(|r| format!("{r:.1}"))
        .collect::<Vec<_>>()
        .join(" ")
}

// Plain f32 dot products with a full sort; ties by insertion order.
fn oracle_ranking(index: &IndexSnapshot, q: &[f32]) -> Vec<(usize, f32)> {
    let mut scored: Vec<(usize, f32)> = (0..index.len())
        .map(|i| {
            let mut s = 0.0f32;
            for (a, b) in index.vector_at(i).iter().zip(q) {
                s += a * b;
            }
            (i, s.clamp(-1.0, 1.0))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
}

fn retrieval_exactness() -> Check {
    let start = Instant::now();
    let mut queries = 0;
    for case in 0..50u64 {
        let h = stable_hash64(&[b"acceptance-index", &case.to_le_bytes()]);
        let dim = [8, 32, 256][case as usize % 3];
        let n = 1 + (h % 2048) as usize;
        let mut records: Vec<ImageRecord> = (0..n)
            .map(|i| {
                ImageRecord::new(
                    format!("c{case}_{i}"),
                    gaussian_direction(h ^ (i as u64).wrapping_mul(0x9e37_79b9), dim),
                )
            })
            .collect();
        if n > 3 {
            // duplicate vectors exercise tie order
            let copy = records[1].embedding.clone();
            records[n - 1].embedding = copy;
        }
        let index = build_index(records, dim).unwrap();
        for qn in 0..20u64 {
            let raw = if qn % 5 == 0 {
                index.vector_at((qn as usize * 7) % n).to_vec()
            } else {
                gaussian_direction(h.rotate_left(17) ^ qn, dim)
            };
            let q = normalize(&raw, dim).unwrap();
            let oracle = oracle_ranking(&index, q.as_slice());
            for k in [1, 10, n] {
                let got = index.top_k(&q, k).unwrap();
                let want = &oracle[..k.min(n)];
                ensure!(
                    got.entries.len() == want.len(),
                    "case {case}: expected {} results, got {}",
                    want.len(),
                    got.entries.len()
                );
                for (g, (pos, sim)) in got.entries.iter().zip(want) {
                    ensure!(
                        g.id == index.id_at(*pos),
                        "case {case} query {qn} k {k}: id {} != {}",
                        g.id,
                        index.id_at(*pos)
                    );
                    let exact: f64 = index
                        .vector_at(*pos)
                        .iter()
                        .zip(q.as_slice())
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum();
                    ensure!(
                        (g.similarity - sim).abs() <= 1e-6
                            && (g.similarity as f64 - exact).abs() <= 1e-6,
                        "case {case}: similarity {} vs {sim} / {exact}",
                        g.similarity
                    );
                }
            }
            for probe in [0, n / 2, n - 1] {
                let rank = index.rank_of(&q, index.id_at(probe)).unwrap();
                let want = oracle.iter().position(|(p, _)| *p == probe).unwrap() + 1;
                ensure!(rank == want, "case {case}: rank {rank} != {want}");
            }
            queries += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("50 indices, {queries} queries, {elapsed:.1?}"))
}

fn table_mixing() -> Check {
    let mut worst: f64 = 0.0;
    for (t, row) in TABLE.iter().enumerate() {
        let r = random_select_rate(VISUAL_SHARE, row[0], row[1]).map_err(|e| e.to_string())?;
        let err = (r - row[3]).abs();
        worst = worst.max(err);
        ensure!(err <= 0.1, "length {t}: {r:.3} vs {}", row[3]);
    }
    Ok(format!("11 rows, max deviation {worst:.3}"))
}

fn table_deltas() -> Check {
    let mut worst: f64 = 0.0;
    for (t, row) in TABLE.iter().enumerate() {
        let r = random_select_rate(VISUAL_SHARE, row[0], row[1]).map_err(|e| e.to_string())?;
        let random_gain = r - row[0];
        let oracle_gain = row[2] - row[0];
        let err = (random_gain - row[5]).abs().max((oracle_gain - row[4]).abs());
        worst = worst.max(err);
        ensure!(
            err <= 0.1,
            "length {t}: gains {random_gain:.3}/{oracle_gain:.3} vs {}/{}",
            row[5],
            row[4]
        );
    }
    Ok(format!("11 rows, max deviation {worst:.3}"))
}

struct Paired {
    verbal: Vec<SessionOutcome>,
    visual: Vec<SessionOutcome>,
}

fn oracle_bounds(p: &Paired) -> Check {
    for conv in [HitsConvention::Cumulative, HitsConvention::PerRound] {
        let oracle = oracle_curve(&p.verbal, &p.visual, 10, conv).map_err(|e| e.to_string())?;
        let v = hits_curve(&p.verbal, 10, conv).unwrap();
        let w = hits_curve(&p.visual, 10, conv).unwrap();
        let visual_by_target: BTreeMap<&str, &SessionOutcome> =
            p.visual.iter().map(|o| (o.target_id.as_str(), o)).collect();
        for t in 0..=10 {
            let union = p
                .verbal
                .iter()
                .filter(|a| {
                    let b = visual_by_target[a.target_id.as_str()];
                    let hit = |o: &SessionOutcome| match conv {
                        HitsConvention::PerRound => matches!(o.ranks[t], Some(r) if r <= 10),
                        HitsConvention::Cumulative => {
                            o.ranks[..=t].iter().any(|r| matches!(r, Some(r) if *r <= 10))
                        }
                    };
                    hit(a) || hit(b)
                })
                .count();
            let recount = 100.0 * union as f64 / p.verbal.len() as f64;
            ensure!(
                oracle.rates[t] == recount,
                "{conv} length {t}: oracle {} vs recount {recount}",
                oracle.rates[t]
            );
            let lo = v.rates[t].max(w.rates[t]);
            let hi = (v.rates[t] + w.rates[t]).min(100.0);
            ensure!(
                lo <= oracle.rates[t] && oracle.rates[t] <= hi,
                "{conv} length {t}: {} outside [{lo}, {hi}]",
                oracle.rates[t]
            );
        }
    }
    Ok(format!("{} paired sessions, both conventions", p.verbal.len()))
}

fn digest_tree(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            let bytes = if rel == "manifest.json" {
                // creation time is the only field allowed to differ
                let mut m: Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
                m.as_object_mut().unwrap().remove("created_utc");
                serde_json::to_vec(&m).unwrap()
            } else {
                fs::read(&p).unwrap()
            };
            let hex = Sha256::digest(&bytes)
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            out.insert(rel, hex);
        }
    }
    out
}

fn algorithm_fidelity(f: &Fixture) -> Check {
    let start = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let targets: Vec<String> = (0..100).map(|i| MockWorld::database_id(i * 13)).collect();
    let run = |name: &str| -> Result<CurationManifest, String> {
        let mut job = CurationJob::new(
            targets.clone(),
            SessionConfig::curation(FeedbackMode::GENERATIVE),
            root.path().join(name),
        );
        job.seed = 5;
        job.parallelism = 2;
        job.clock = LatencyClock::Nominal(NominalLatencies::default());
        curate(&job, f.index.clone(), f.gateway.clone(), Arc::new(EmbeddedImages))
            .map_err(|e| e.to_string())
    };
    let manifest = run("a")?;
    ensure!(manifest.targets_failed.is_empty(), "failures: {:?}", manifest.targets_failed);
    let records = read_trajectories(root.path().join("a/trajectories.jsonl"))
        .map_err(|e| e.to_string())?;
    ensure!(records.len() == 1100, "{} records", records.len());
    ensure!(manifest.records_written == 1100, "manifest says {}", manifest.records_written);
    let mut positives = 0;
    for r in &records {
        let top1 = r.retrieved_ids.first().map(String::as_str);
        let label = r.label == Some(1);
        ensure!(
            label == (top1 == r.target_id.as_deref()),
            "{} round {}: label {:?} top1 {top1:?}",
            r.session_id,
            r.round,
            r.label
        );
        ensure!(
            r.label.is_some() && r.rank_of_target.is_some(),
            "unlabelled record"
        );
        let img = r.synthetic_image_ref.as_deref().ok_or("missing image ref")?;
        ensure!(root.path().join("a").join(img).is_file(), "missing {img}");
        positives += usize::from(label);
    }
    run("b")?;
    let a = digest_tree(&root.path().join("a"));
    let b = digest_tree(&root.path().join("b"));
    ensure!(a.len() == 1 + 1 + 1100, "{} files", a.len());
    ensure!(a == b, "re-run differs");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "1100 records, {positives} positive labels, {} identical files, {elapsed:.1?}",
        a.len()
    ))
}

fn convergence(f: &Fixture) -> Check {
    let start = Instant::now();
    let cfg = acceptance_world();
    ensure!(cfg.blend_alpha == 0.5 && cfg.noise_decay == 0.8, "world parameters changed");
    let traces = f.run(&f.engine(1), FeedbackMode::GENERATIVE, 1000);
    let curve = hits_curve(&outcomes(&traces), 10, HitsConvention::Cumulative)
        .map_err(|e| e.to_string())?;
    ensure!(
        curve.rates.windows(2).all(|w| w[0] <= w[1]),
        "not monotone: {}",
        fmt_rates(&curve)
    );
    let rise = curve.rates[10] - curve.rates[0];
    ensure!(rise >= 20.0, "rise {rise:.1}: {}", fmt_rates(&curve));
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!("rise {rise:.1} points, Hits@10 [{}], {elapsed:.1?}", fmt_rates(&curve)))
}

/// Two-sided exact binomial test of `plus` successes out of `n` at p = 1/2.
fn sign_test(plus: usize, n: usize) -> f64 {
    let ln_choose = |n: usize, k: usize| -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
    };
    let extreme = plus.max(n - plus);
    let tail: f64 = (extreme..=n)
        .map(|k| (ln_choose(n, k) - n as f64 * 2f64.ln()).exp())
        .sum();
    (2.0 * tail).min(1.0)
}

fn channel_advantage(p: &Paired) -> Check {
    let cfg = acceptance_world();
    ensure!(
        cfg.noise_sigma_0 < cfg.text_sigma,
        "visual noise must be below verbal noise"
    );
    let verbal = &p.verbal[..200];
    let visual = &p.visual[..200];
    let gv = hits_curve(visual, 10, HitsConvention::Cumulative).unwrap();
    let vv = hits_curve(verbal, 10, HitsConvention::Cumulative).unwrap();
    for t in 0..=10 {
        ensure!(
            gv.rates[t] >= vv.rates[t],
            "length {t}: generative {} < verbal {}",
            gv.rates[t],
            vv.rates[t]
        );
    }
    let censored = 11;
    let (mut plus, mut minus) = (0, 0);
    for (a, b) in visual.iter().zip(verbal) {
        assert_eq!(a.target_id, b.target_id);
        let ga = a.first_hit(10).unwrap_or(censored);
        let gb = b.first_hit(10).unwrap_or(censored);
        if ga < gb {
            plus += 1;
        } else if ga > gb {
            minus += 1;
        }
    }
    let pval = sign_test(plus, plus + minus);
    ensure!(
        pval < 0.01 && plus > minus,
        "sign test {plus}+/{minus}- p = {pval:.3e}"
    );
    Ok(format!(
        "generative [{}] vs verbal [{}], sign test {plus}+/{minus}- p = {pval:.2e}",
        fmt_rates(&gv),
        fmt_rates(&vv)
    ))
}

fn convention_check(sets: &[&[SessionOutcome]]) -> Check {
    for (i, set) in sets.iter().enumerate() {
        for k in [1, 5, 10] {
            let cum = hits_curve(set, k, HitsConvention::Cumulative).unwrap();
            let per = hits_curve(set, k, HitsConvention::PerRound).unwrap();
            for t in 0..cum.rates.len() {
                ensure!(cum.rates[t] >= per.rates[t], "set {i} k {k} length {t}");
                ensure!(t == 0 || cum.rates[t] >= cum.rates[t - 1], "set {i} k {k} not monotone");
            }
        }
    }
    Ok(format!("{} trace sets, k in {{1, 5, 10}}", sets.len()))
}

fn api_parity(f: &Fixture) -> Check {
    let seed = 77;
    let local = f.engine(seed);
    let base = common::spawn(genir_service::api::router(
        Arc::new(genir_service::api::AppState::new(
            Arc::new(f.engine(seed)),
            genir_service::config::SessionDefaults::default(),
        )),
        &[],
    ));
    let client = common::client();
    let mut compared = 0;
    for (mode, name, target) in [
        (FeedbackMode::GENERATIVE, "generative", "img_000005"),
        (FeedbackMode::VERBAL, "verbal", "img_000042"),
        (FeedbackMode::PREDICTION, "prediction", "img_000300"),
    ] {
        let config = SessionConfig {
            max_rounds: 4,
            ..SessionConfig::live(mode)
        };
        let mut session = local
            .create_session(config, Some(target))
            .map_err(|e| e.to_string())?;
        let created: Value = client
            .post(format!("{base}/api/sessions"))
            .json(&json!({"mode": name, "k": 10, "max_rounds": 4, "target_id": target}))
            .send()
            .and_then(|r| r.json())
            .map_err(|e| e.to_string())?;
        let id = created["session_id"].as_str().unwrap_or_default().to_string();
        ensure!(id == session.id(), "session id {id} vs {}", session.id());

        let target_image = local.database_image(target)?;
        let refine_mode = match name {
            "generative" => RefineMode::Generative,
            "verbal" => RefineMode::Verbal,
            _ => RefineMode::Prediction,
        };
        let mut query = local
            .gateway()
            .initial_query(&target_image)
            .map_err(|e| e.to_string())?;
        for _ in 0..=4 {
            local.run_round(&mut session, &query).map_err(|e| e.to_string())?;
            let r = client
                .post(format!("{base}/api/sessions/{id}/rounds"))
                .json(&json!({ "query": query }))
                .send()
                .map_err(|e| e.to_string())?;
            ensure!(r.status().is_success(), "round status {}", r.status());
            query = local
                .gateway()
                .refine_query(&target_image, session.feedback(), session.history(), refine_mode)
                .map_err(|e| e.to_string())?;
        }
        let view: SessionView = client
            .get(format!("{base}/api/sessions/{id}"))
            .send()
            .and_then(|r| r.json())
            .map_err(|e| e.to_string())?;
        ensure!(
            view.trace.rounds == session.trace().rounds,
            "{name}: round records differ"
        );
        ensure!(view.trace == *session.trace(), "{name}: traces differ");
        compared += view.trace.rounds.len();
    }
    Ok(format!("3 sessions, {compared} identical round records"))
}

fn report(name: &str, outcome: Check, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL  {name}: {detail}");
        }
    }
}

fn main() {
    let mut failures = 0;
    report("retrieval exactness", retrieval_exactness(), &mut failures);
    report("random-select mixing", table_mixing(), &mut failures);
    report("hybrid gain columns", table_deltas(), &mut failures);

    let f = Fixture::new();
    let engine = f.engine(3);
    let paired = Paired {
        verbal: outcomes(&f.run(&engine, FeedbackMode::VERBAL, 500)),
        visual: outcomes(&f.run(&engine, FeedbackMode::GENERATIVE, 500)),
    };
    report("oracle bounds", oracle_bounds(&paired), &mut failures);
    report("curation fidelity", algorithm_fidelity(&f), &mut failures);
    report("convergence", convergence(&f), &mut failures);
    report("channel advantage", channel_advantage(&paired), &mut failures);
    let hybrid = outcomes(&f.run(&engine, FeedbackMode::hybrid_random(VISUAL_SHARE), 300));
    let prediction = outcomes(&f.run(&engine, FeedbackMode::PREDICTION, 300));
    report(
        "convention check",
        convention_check(&[&paired.verbal, &paired.visual, &hybrid, &prediction]),
        &mut failures,
    );
    report("api/engine parity", api_parity(&f), &mut failures);

    println!("{failures} of 9 criteria failed");
    if failures > 0 {
        std::process::exit(1);
    }
}
