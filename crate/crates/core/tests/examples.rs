//! Runs each example at a small size.

macro_rules! example {
    ($name:ident) => {
        #[allow(dead_code)]
        mod $name {
            include!(concat!(
                env!("CARGO_MANIFEST_DIR"),
                "/examples/",
                stringify!($name),
                ".rs"
            ));
        }
    };
}

example!(kb_and_trie);
example!(augmentation);
example!(autodiff);
example!(constrained_generation);
example!(metrics);
example!(synthetic_corpus);
example!(end_to_end);
example!(ablation);

use eco::pipeline::{ablation_variants, ExperimentConfig};
use eco::synth::SynthSpec;

fn small() -> (ExperimentConfig, SynthSpec) {
    let mut cfg = ExperimentConfig::default();
    cfg.model.d_model = 8;
    cfg.train.epochs = 2;
    cfg.train.eval_every = 1;
    let spec = SynthSpec {
        n_entities: 8,
        n_dialogs: 30,
        ..Default::default()
    };
    (cfg, spec)
}

#[test]
fn trie_leaves_only_entity_starts_after_name() {
    let out = kb_and_trie::run().unwrap();
    let tokens: Vec<&str> = out.iter().map(|(t, _)| t.as_str()).collect();
    assert_eq!(tokens, ["curry", "gourmet", "pizza", "the"]);
    for (_, p) in &out {
        assert!((p - 0.25).abs() < 1e-12);
    }
}

#[test]
fn augmented_dialogs_are_consistent() {
    let s = augmentation::run(3, 1).unwrap();
    assert!(s.templates > 0);
    assert!(s.augmented >= s.templates);
    assert_eq!(s.consistency, 1.0);
}

#[test]
fn autodiff_matches_finite_differences() {
    assert!(autodiff::run(9) < 1e-6);
}

#[test]
fn constraint_makes_every_sample_valid() {
    let dir = tempfile::tempdir().unwrap();
    let s = constrained_generation::run(50, dir.path()).unwrap();
    assert_eq!(s.constrained, 1.0);
    assert!(s.unconstrained < 1.0);
    assert!(s.reloaded_identical);
}

#[test]
fn metrics_example_values() {
    let s = metrics::run().unwrap();
    assert_eq!(s.claims, (0.0, 1.0));
    assert!((s.f1 - 4.0 / 7.0).abs() < 1e-12);
    assert!(s.score > 100.0);
}

#[test]
fn synthetic_corpus_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_dialogs: 12,
        ..Default::default()
    };
    let s = synthetic_corpus::run(&spec, dir.path()).unwrap();
    let kb = eco::kb::KnowledgeBase::load(dir.path().join("kb.json")).unwrap();
    let dialogs = eco::augment::load_dialogs(dir.path().join("dialogs.jsonl")).unwrap();
    assert_eq!(kb.fingerprint(), s.kb.fingerprint());
    assert_eq!(dialogs, s.dialogs);
}

#[test]
fn end_to_end_small() {
    let (cfg, spec) = small();
    let out = end_to_end::run(&cfg, &spec).unwrap();
    assert!(out.report.final_loss < out.report.initial_loss);
    assert!(!out.predictions.is_empty());
    assert_eq!(out.report.test.overall.entity_validity, Some(100.0));
}

#[test]
fn ablation_small() {
    let (mut cfg, spec) = small();
    cfg.train.epochs = 1;
    let table = ablation::run(&cfg, &spec, &[1, 2]).unwrap();
    assert_eq!(table.rows.len(), ablation_variants().len());
    for row in &table.rows {
        assert_eq!(row.mean.len(), table.columns.len());
        assert!(row.mean[3].is_finite());
    }
}
