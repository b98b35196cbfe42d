use std::sync::Arc;

use gbmdebug::memory::FeedbackScope;
use gbmdebug::persist::{checkpoint_hash, load_feedback, load_memory, load_session, save_memory, save_session};
use gbmdebug::protocol::{Author, DebugSession, FeedbackAction, SessionConfig, SessionState};
use gbmdebug::raster::Mask;
use gbmdebug::shapes::{generate, DataConfig, ImageId, Split};
use gbmdebug::Error;

fn session() -> DebugSession {
    let data = DataConfig {
        train_per_class: 6,
        validation_per_class: 2,
        test_per_class: 4,
        ..DataConfig::default()
    };
    let mut config = SessionConfig::default();
    config.schedule.initial_epochs = 2;
    config.schedule.refine_epochs = 2;
    config.schedule.phase_length = 1;
    DebugSession::new("s1", Arc::new(generate(&data).unwrap()), config).unwrap()
}

#[test]
fn session_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session();
    s.run_round(&mut |_| {}).unwrap();
    let x = ImageId::new(Split::Train, 2);
    let size = s.dataset().config().image_size;
    for action in [
        FeedbackAction::MarkIrrelevant {
            concept: 1,
            scope: FeedbackScope::Class { class: 0 },
        },
        FeedbackAction::ConceptRegion {
            image: x,
            concept: 3,
            region: Mask::filled(size, size, true),
        },
        FeedbackAction::MarkRelevant { concept: 4, class: 2 },
    ] {
        s.submit_feedback(action, Author::Human).unwrap();
    }
    s.run_round(&mut |_| {}).unwrap();
    save_session(dir.path(), &s).unwrap();
    for name in ["session.json", "feedback.jsonl", "metrics.jsonl", "memory.json", "checkpoints/round-2.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    assert!(dir.path().join("memory/entry-0.pgm").is_file());

    let back = load_session(dir.path(), Arc::clone(s.dataset())).unwrap();
    assert_eq!(back.round, 2);
    assert_eq!(back.state, s.state);
    assert_eq!(checkpoint_hash(&back.model), checkpoint_hash(&s.model));
    assert_eq!(back.memory, s.memory);
    assert_eq!(back.feedback, s.feedback);
    assert_eq!(back.supervision, s.supervision);
    assert_eq!(back.history, s.history);
    assert_eq!(load_feedback(dir.path()).unwrap().len(), 3);
}

#[test]
fn memory_caches_are_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session();
    s.run_round(&mut |_| {}).unwrap();
    s.submit_feedback(
        FeedbackAction::MarkIrrelevant {
            concept: 0,
            scope: FeedbackScope::Global,
        },
        Author::ScriptedOracle,
    )
    .unwrap();
    save_memory(dir.path(), &s.memory).unwrap();
    let back = load_memory(dir.path()).unwrap();
    let (a, b) = (&s.memory.entries[0].snapshot, &back.entries[0].snapshot);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.frozen_p), bits(&b.frozen_p));
    assert_eq!(bits(&a.cached_activations), bits(&b.cached_activations));
    for (m, n) in a.cached_attributions.iter().zip(&b.cached_attributions) {
        assert_eq!(bits(&m.window), bits(&n.window));
        assert_eq!(m.total.to_bits(), n.total.to_bits());
    }
    assert_eq!(back, s.memory);
}

#[test]
fn mid_round_save_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session();
    let job = s.begin_round().unwrap();
    assert!(matches!(save_session(dir.path(), &s), Err(Error::State { .. })));
    assert!(!dir.path().join("session.json").exists());
    s.finish_round(job.run(&mut |_| {})).unwrap();
    assert_eq!(s.state, SessionState::AwaitingFeedback);
    save_session(dir.path(), &s).unwrap();
}

#[test]
fn foreign_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session();
    s.run_round(&mut |_| {}).unwrap();
    save_session(dir.path(), &s).unwrap();
    let other = generate(&DataConfig {
        seed: 99,
        train_per_class: 6,
        validation_per_class: 2,
        test_per_class: 4,
        ..DataConfig::default()
    })
    .unwrap();
    assert!(matches!(load_session(dir.path(), Arc::new(other)), Err(Error::Config(_))));
}
