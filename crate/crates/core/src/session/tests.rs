use std::sync::Arc;

use super::*;
use crate::gateway::payload::decode_vector_png;
use crate::gateway::{MockWorld, MockWorldConfig, ModelBackend};
use crate::index::build_index;

fn world(cfg: MockWorldConfig) -> MockWorld {
    MockWorld::new(cfg).unwrap()
}

fn engine_for(world: &MockWorld, n: usize) -> Engine {
    let index = build_index(world.database_records(n), world.config().dim).unwrap();
    Engine::new(
        Arc::new(index),
        Gateway::mock(world.clone()),
        Arc::new(MemoryImageStore::new()),
        Arc::new(EmbeddedImages),
    )
    .unwrap()
    .with_clock(LatencyClock::Nominal(NominalLatencies::default()))
}

fn small() -> (MockWorld, Engine) {
    let w = world(MockWorldConfig {
        dim: 16,
        ..Default::default()
    });
    let e = engine_for(&w, 200);
    (w, e)
}

fn target_query(engine: &Engine, id: &str) -> String {
    MockWorld::query_text(0, engine.index().vector_at(engine.index().position(id).unwrap()))
}

#[test]
fn create_session_starts_empty() {
    let (_, e) = small();
    let s = e
        .create_session(SessionConfig::interactive(FeedbackMode::GENERATIVE), Some("img_000003"))
        .unwrap();
    assert_eq!(s.trace().status, SessionStatus::Running);
    assert!(s.trace().rounds.is_empty());
    assert_eq!(s.trace().channel, Channel::Visual);
}

#[test]
fn create_session_rejects_unknown_target_and_bad_config() {
    let (_, e) = small();
    let cfg = SessionConfig::interactive(FeedbackMode::GENERATIVE);
    assert!(matches!(
        e.create_session(cfg, Some("nope")),
        Err(SessionError::UnknownTarget(t)) if t == "nope"
    ));
    let big_k = SessionConfig { k: 201, ..cfg };
    assert!(matches!(
        e.create_session(big_k, None),
        Err(SessionError::InvalidConfig(_))
    ));
    let zero_t = SessionConfig { max_rounds: 0, ..cfg };
    assert!(matches!(
        e.create_session(zero_t, None),
        Err(SessionError::InvalidConfig(_))
    ));
    let hybrid_without_fraction = SessionConfig {
        mode: FeedbackMode {
            kind: ModeKind::HybridRandom,
            visual_fraction: None,
        },
        ..cfg
    };
    assert!(e.create_session(hybrid_without_fraction, None).is_err());
    let verbal_with_fraction = SessionConfig {
        mode: FeedbackMode {
            kind: ModeKind::Verbal,
            visual_fraction: Some(0.5),
        },
        ..cfg
    };
    assert!(e.create_session(verbal_with_fraction, None).is_err());
}

#[test]
fn session_ids_are_unique() {
    let (_, e) = small();
    let cfg = SessionConfig::live(FeedbackMode::VERBAL);
    let ids: std::collections::HashSet<String> = (0..100)
        .map(|_| e.create_session(cfg, None).unwrap().id().to_string())
        .collect();
    assert_eq!(ids.len(), 100);
}

#[test]
fn exact_generation_of_target_hits_rank_one() {
    let w = world(MockWorldConfig {
        dim: 16,
        noise_sigma_0: 0.0,
        ..Default::default()
    });
    let e = engine_for(&w, 200);
    let mut s = e
        .create_session(SessionConfig::interactive(FeedbackMode::GENERATIVE), Some("img_000042"))
        .unwrap();
    let q = target_query(&e, "img_000042");
    let rec = e.run_round(&mut s, &q).unwrap().clone();
    assert_eq!(rec.label, Some(1));
    assert_eq!(rec.rank_of_target, Some(1));
    assert_eq!(rec.retrieved.top1(), Some("img_000042"));
    assert!(rec.synthetic_image_ref.is_some());
    assert_eq!(rec.effective_channel, Channel::Visual);
    assert_eq!(s.trace().status, SessionStatus::Succeeded);
    assert!(matches!(
        e.run_round(&mut s, &q),
        Err(SessionError::SessionFinished)
    ));
}

#[test]
fn empty_query_is_rejected_without_a_round() {
    let (_, e) = small();
    let mut s = e
        .create_session(SessionConfig::live(FeedbackMode::VERBAL), None)
        .unwrap();
    assert!(matches!(e.run_round(&mut s, "  "), Err(SessionError::EmptyQuery)));
    assert!(s.trace().rounds.is_empty());
}

#[test]
fn synthetic_image_is_stored_under_session_and_round() {
    let (_, e) = small();
    let mut s = e
        .create_session(SessionConfig::live(FeedbackMode::GENERATIVE), None)
        .unwrap();
    let rec = e.run_round(&mut s, "a harbour at dusk").unwrap().clone();
    let reference = rec.synthetic_image_ref.unwrap();
    assert_eq!(reference, format!("{}_0.png", s.id()));
    assert!(e.store().get(&reference).is_some());
    assert_eq!(rec.label, None);
    assert_eq!(rec.rank_of_target, None);
}

#[test]
fn verbal_rounds_never_generate() {
    let (_, e) = small();
    let mut s = e
        .create_session(SessionConfig::curation(FeedbackMode::VERBAL), Some("img_000001"))
        .unwrap();
    let rec = e.run_round(&mut s, "a field of tulips").unwrap();
    assert_eq!(rec.synthetic_image_ref, None);
    assert_eq!(rec.latency_ms.generate, None);
    assert_eq!(rec.effective_channel, Channel::Verbal);
    assert!(s.feedback().is_none());
}

#[test]
fn prediction_feedback_is_top1_database_image() {
    let (_, e) = small();
    let mut s = e
        .create_session(SessionConfig::curation(FeedbackMode::PREDICTION), Some("img_000001"))
        .unwrap();
    let top1 = e
        .run_round(&mut s, "a field of tulips")
        .unwrap()
        .retrieved
        .top1()
        .unwrap()
        .to_string();
    let fb = s.feedback().unwrap();
    assert_eq!(fb.origin(), crate::gateway::ImageOrigin::Database);
    assert_eq!(fb, &e.database_image(&top1).unwrap());
    assert!(s.trace().rounds[0].synthetic_image_ref.is_none());
}

#[test]
fn full_blend_converges_immediately_under_curation() {
    let w = world(MockWorldConfig {
        dim: 16,
        noise_sigma_0: 0.0,
        blend_alpha: 1.0,
        description_sigma: 2.0,
        ..Default::default()
    });
    let e = engine_for(&w, 300);
    let trace = e
        .run_simulated_session(SessionConfig::curation(FeedbackMode::GENERATIVE), "img_000007")
        .unwrap();
    assert_eq!(trace.rounds.len(), 11);
    assert_eq!(trace.status, SessionStatus::Succeeded);
    assert!(trace.rounds[1..].iter().all(|r| r.label == Some(1)));
    // the agent call that produced each query is charged to its round
    assert!(trace.rounds.iter().all(|r| r.latency_ms.agent == Some(2_000)));
}

#[test]
fn single_refinement_horizon() {
    let (_, e) = small();
    let cfg = SessionConfig {
        max_rounds: 1,
        ..SessionConfig::curation(FeedbackMode::GENERATIVE)
    };
    let trace = e.run_simulated_session(cfg, "img_000002").unwrap();
    assert_eq!(trace.rounds.len(), 2);
    assert!(matches!(
        trace.status,
        SessionStatus::Succeeded | SessionStatus::Exhausted
    ));
}

#[test]
fn interactive_semantics_stop_at_first_topk_hit() {
    let (_, e) = small();
    for i in 0..20 {
        let id = MockWorld::database_id(i);
        let trace = e
            .run_simulated_session(SessionConfig::interactive(FeedbackMode::GENERATIVE), &id)
            .unwrap();
        let first_hit = trace
            .rounds
            .iter()
            .position(|r| r.rank_of_target.unwrap() <= 10);
        match first_hit {
            Some(p) => {
                assert_eq!(trace.rounds.len(), p + 1);
                assert_eq!(trace.status, SessionStatus::Succeeded);
            }
            None => {
                assert_eq!(trace.rounds.len(), 11);
                assert_eq!(trace.status, SessionStatus::Exhausted);
            }
        }
    }
}

#[test]
fn tuple_integrity_and_mode_isolation() {
    let (_, e) = small();
    for mode in [
        FeedbackMode::GENERATIVE,
        FeedbackMode::VERBAL,
        FeedbackMode::PREDICTION,
        FeedbackMode::hybrid_random(0.5),
    ] {
        for i in 0..10 {
            let trace = e
                .run_simulated_session(SessionConfig::curation(mode), &MockWorld::database_id(i))
                .unwrap();
            assert_eq!(trace.rounds.len(), 11);
            for (t, r) in trace.rounds.iter().enumerate() {
                assert_eq!(r.round as usize, t);
                assert_eq!(r.label == Some(1), r.rank_of_target == Some(1));
                assert_eq!(
                    r.label == Some(1),
                    r.retrieved.top1() == trace.target_id.as_deref()
                );
                assert_eq!(r.synthetic_image_ref.is_some(), r.effective_channel == Channel::Visual);
                assert_eq!(r.effective_channel, trace.channel);
                assert_eq!(r.retrieved.entries.len(), 10);
            }
        }
    }
}

#[test]
fn replay_is_byte_identical() {
    let w = world(MockWorldConfig {
        dim: 16,
        seed: 5,
        ..Default::default()
    });
    let run = || {
        let e = engine_for(&w, 100).with_seed(9);
        let t = e
            .run_simulated_session(SessionConfig::curation(FeedbackMode::hybrid_random(0.5)), "img_000010")
            .unwrap();
        serde_json::to_vec(&t).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn channel_choice_degenerate_fractions() {
    for seed in 0..1000 {
        assert_eq!(
            choose_channel(&FeedbackMode::hybrid_random(0.0), seed).unwrap(),
            Channel::Verbal
        );
        assert_eq!(
            choose_channel(&FeedbackMode::hybrid_random(1.0), seed).unwrap(),
            Channel::Visual
        );
    }
    assert!(matches!(
        choose_channel(&FeedbackMode::VERBAL, 1),
        Err(SessionError::WrongMode)
    ));
}

#[test]
fn channel_choice_frequency() {
    let mode = FeedbackMode::hybrid_random(0.223);
    let n = 100_000u64;
    let visual = (0..n)
        .filter(|&s| {
            let seed = stable_hash64(&[b"freq", &s.to_le_bytes()]);
            choose_channel(&mode, seed).unwrap() == Channel::Visual
        })
        .count();
    let frac = visual as f64 / n as f64;
    assert!((frac - 0.223).abs() <= 0.005, "{frac}");
}

#[test]
fn hybrid_channel_is_fixed_per_session() {
    let (_, e) = small();
    let cfg = SessionConfig::curation(FeedbackMode::hybrid_random(0.5));
    let mut seen = std::collections::HashSet::new();
    for i in 0..30 {
        let trace = e.run_simulated_session(cfg, &MockWorld::database_id(i)).unwrap();
        assert!(trace.rounds.iter().all(|r| r.effective_channel == trace.channel));
        seen.insert(trace.channel);
    }
    assert_eq!(seen.len(), 2);
}

/// Generator that fails for selected prompts.
struct Flaky {
    inner: MockWorld,
    fail_prompt: String,
}

impl ModelBackend for Flaky {
    fn generate_image(&self, prompt: &str, seed: u64) -> Result<ImageBlob, GatewayError> {
        if prompt == self.fail_prompt {
            return Err(GatewayError::BackendTimeout {
                role: crate::gateway::Role::Generator,
            });
        }
        self.inner.generate_image(prompt, seed)
    }
    fn embed_image(&self, blob: &ImageBlob) -> Result<Vec<f32>, GatewayError> {
        self.inner.embed_image(blob)
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        self.inner.embed_text(text)
    }
    fn initial_query(&self, target: &ImageBlob) -> Result<String, GatewayError> {
        self.inner.initial_query(target)
    }
    fn refine_query(
        &self,
        target: &ImageBlob,
        feedback: Option<&ImageBlob>,
        history: &DialogHistory,
        mode: RefineMode,
    ) -> Result<String, GatewayError> {
        self.inner.refine_query(target, feedback, history, mode)
    }
}

fn flaky_engine(fail_prompt: &str) -> Engine {
    let w = world(MockWorldConfig {
        dim: 16,
        ..Default::default()
    });
    let index = build_index(w.database_records(50), 16).unwrap();
    let backend = Flaky {
        inner: w,
        fail_prompt: fail_prompt.into(),
    };
    Engine::new(
        Arc::new(index),
        Gateway::new(Arc::new(backend), 16),
        Arc::new(MemoryImageStore::new()),
        Arc::new(EmbeddedImages),
    )
    .unwrap()
}

#[test]
fn failed_stage_appends_errored_round_and_allows_retry() {
    let e = flaky_engine("broken");
    let mut s = e
        .create_session(SessionConfig::live(FeedbackMode::GENERATIVE), None)
        .unwrap();
    match e.run_round(&mut s, "broken") {
        Err(SessionError::Stage { stage, .. }) => assert_eq!(stage, Stage::Generate),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(s.trace().rounds.len(), 1);
    let errored = &s.trace().rounds[0];
    assert_eq!(errored.error.as_ref().unwrap().stage, Stage::Generate);
    assert!(errored.retrieved.entries.is_empty());
    assert_eq!(s.trace().status, SessionStatus::Running);
    let next = e.run_round(&mut s, "working").unwrap();
    assert_eq!(next.round, 1);
    assert!(next.error.is_none());
}

#[test]
fn simulated_stage_failure_marks_errored_and_keeps_rounds() {
    let w = world(MockWorldConfig {
        dim: 16,
        ..Default::default()
    });
    let index = build_index(w.database_records(50), 16).unwrap();
    let target = crate::gateway::payload::encode_vector_png(
        index.vector_at(3),
        crate::gateway::ImageOrigin::Database,
    );
    let q0 = w.initial_query(&target).unwrap();
    let e = flaky_engine(&q0);
    let trace = e
        .run_simulated_session(SessionConfig::curation(FeedbackMode::GENERATIVE), "img_000003")
        .unwrap();
    assert_eq!(trace.status, SessionStatus::Errored);
    assert_eq!(trace.rounds.len(), 1);
    assert_eq!(trace.error.unwrap().stage, Stage::Generate);
}

#[test]
fn completion_paths() {
    let (_, e) = small();
    let cfg = SessionConfig::live(FeedbackMode::GENERATIVE);

    let mut found = e.create_session(cfg, None).unwrap();
    e.run_round(&mut found, "a red kite").unwrap();
    e.run_round(&mut found, "a red kite over a beach").unwrap();
    e.complete(&mut found, Some("img_000004")).unwrap();
    assert_eq!(found.trace().status, SessionStatus::Succeeded);
    assert_eq!(found.trace().target_id.as_deref(), Some("img_000004"));
    assert!(found.trace().rounds.iter().all(|r| r.rank_of_target.is_some()));
    assert!(matches!(
        e.complete(&mut found, None),
        Err(SessionError::SessionFinished)
    ));

    let mut gave_up = e.create_session(cfg, None).unwrap();
    e.complete(&mut gave_up, None).unwrap();
    assert_eq!(gave_up.trace().status, SessionStatus::Abandoned);

    let mut bad = e.create_session(cfg, None).unwrap();
    assert!(matches!(
        e.complete(&mut bad, Some("missing")),
        Err(SessionError::UnknownTarget(_))
    ));
}

#[test]
fn manual_sessions_wait_for_the_searcher_after_last_round() {
    let (_, e) = small();
    let cfg = SessionConfig {
        max_rounds: 2,
        ..SessionConfig::live(FeedbackMode::VERBAL)
    };
    let mut s = e.create_session(cfg, Some("img_000001")).unwrap();
    for q in ["a", "b", "c"] {
        e.run_round(&mut s, q).unwrap();
    }
    assert_eq!(s.trace().status, SessionStatus::Running);
    assert!(matches!(e.run_round(&mut s, "d"), Err(SessionError::SessionFinished)));
    e.complete(&mut s, Some("img_000001")).unwrap();
    assert_eq!(s.trace().status, SessionStatus::Succeeded);
}

#[test]
fn generation_seed_depends_on_session_and_round() {
    assert_eq!(Engine::generation_seed("a", 1), Engine::generation_seed("a", 1));
    assert_ne!(Engine::generation_seed("a", 1), Engine::generation_seed("a", 2));
    assert_ne!(Engine::generation_seed("a", 1), Engine::generation_seed("b", 1));
}

#[test]
fn stored_synthetic_image_reproduces_rank() {
    let (_, e) = small();
    let trace = e
        .run_simulated_session(SessionConfig::curation(FeedbackMode::GENERATIVE), "img_000011")
        .unwrap();
    for r in &trace.rounds {
        let blob = e.store().get(r.synthetic_image_ref.as_ref().unwrap()).unwrap();
        assert!(decode_vector_png(&blob).is_ok());
        let emb = e.gateway().embed_image(&blob).unwrap();
        assert_eq!(e.index().rank_of(&emb, "img_000011").unwrap(), r.rank_of_target.unwrap());
    }
}
