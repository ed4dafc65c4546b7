mod common;

use eco::augment::Dialog;
use eco::corpus::{build_vocabulary, turn_examples, Domains};
use eco::model::{turn_loss, LossFlags, ModelConfig, ModelParams};
use eco::pipeline::{fit, Corpus, ExperimentConfig};
use eco::synth::{synthesize, SynthSpec};
use eco::tape::Tape;

const ENCODER: std::ops::Range<usize> = 1..4;
const ENTITY_DECODER: std::ops::Range<usize> = 4..10;
const RESPONSE_DECODER: std::ops::Range<usize> = 10..16;

fn nonzero(grads: &[eco::tape::Tensor], range: std::ops::Range<usize>) -> bool {
    grads[range].iter().any(|g| !g.is_zero())
}

#[test]
fn entity_and_response_losses_share_the_encoder() {
    let (kb, dialogs) = common::tiny_setup();
    let vocab = build_vocabulary(std::slice::from_ref(&kb), &[&dialogs]);
    let domains = Domains::new(vec![kb], &vocab).unwrap();
    let config = ModelConfig {
        d_model: 6,
        max_entity_len: domains.max_entity_len(),
        init_scale: 0.5,
        ..Default::default()
    };
    let params = ModelParams::init(config, vocab.len(), 3);
    let ex = &turn_examples(&dialogs[..1], &domains, &vocab, &params.config).unwrap()[0];
    assert!(ex.entity.is_some());

    let mut tape = Tape::new();
    let mut b = params.bind(&mut tape);
    let l = turn_loss(
        &mut tape,
        &mut b,
        ex,
        domains.tries(),
        LossFlags::default(),
        params.config.max_entity_len,
    )
    .unwrap();
    let entity = b.gradients(&tape.backward(l.entity.unwrap()), &params);
    let response = b.gradients(&tape.backward(l.response), &params);

    assert!(nonzero(&entity, ENCODER));
    assert!(nonzero(&entity, ENTITY_DECODER));
    assert!(!nonzero(&entity, RESPONSE_DECODER));
    assert!(nonzero(&response, ENCODER));
    assert!(nonzero(&response, RESPONSE_DECODER));
    assert!(!nonzero(&response, ENTITY_DECODER));
}

fn small_corpus() -> Corpus {
    let s = synthesize(&SynthSpec {
        n_entities: 8,
        n_dialogs: 30,
        ..Default::default()
    })
    .unwrap();
    Corpus {
        kb: s.kb,
        dialogs: s.dialogs,
        goals: Some(s.goals),
    }
}

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    cfg.model.d_model = 8;
    cfg.train.epochs = 2;
    cfg.train.eval_every = 1;
    cfg
}

#[test]
fn fit_is_deterministic_given_the_seed() {
    let corpus = small_corpus();
    let a = fit(&corpus, &small_config(4), None).unwrap();
    let b = fit(&corpus, &small_config(4), None).unwrap();
    let c = fit(&corpus, &small_config(5), None).unwrap();
    let data = |f: &eco::pipeline::Fitted| -> Vec<Vec<f64>> {
        f.params
            .tensors()
            .iter()
            .map(|t| t.data().to_vec())
            .collect()
    };
    assert_eq!(data(&a), data(&b));
    assert_eq!(a.final_loss, b.final_loss);
    assert_ne!(data(&a), data(&c));
}

/// After full training, the gold next entity token is the argmax of the
/// teacher-forced entity distribution on at least 90% of steps.
#[test]
fn trained_model_predicts_gold_entity_tokens() {
    let s = synthesize(&SynthSpec::default()).unwrap();
    let corpus = Corpus {
        kb: s.kb,
        dialogs: s.dialogs,
        goals: Some(s.goals),
    };
    let cfg = ExperimentConfig {
        seed: 1,
        ..Default::default()
    };
    let fitted = fit(&corpus, &cfg, None).unwrap();
    let labeled: Vec<Dialog> = fitted
        .parts
        .train
        .iter()
        .filter(|d| d.is_labeled())
        .cloned()
        .collect();
    let examples = turn_examples(
        &labeled,
        &fitted.domains,
        &fitted.vocab,
        &fitted.params.config,
    )
    .unwrap();

    let (mut hits, mut steps) = (0usize, 0usize);
    for ex in examples {
        let Some(gold) = ex.entity else { continue };
        for k in 0..gold.len() {
            let dist = fitted
                .params
                .entity_step_distribution(&ex.source, &gold[..k]);
            hits += usize::from(dist.argmax() == gold[k]);
            steps += 1;
        }
    }
    let accuracy = hits as f64 / steps as f64;
    assert!(
        accuracy >= 0.9,
        "teacher-forced accuracy {accuracy:.3} over {steps} steps"
    );
}
