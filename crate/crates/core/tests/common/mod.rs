#![allow(dead_code)]

use eco::augment::Dialog;
use eco::corpus::{build_vocabulary, turn_examples, Domains};
use eco::kb::KnowledgeBase;
use eco::model::{joint_loss, LossFlags, ModelConfig, ModelParams, TurnExample};
use eco::synth::{synthesize, SynthSpec};
use eco::tape::{Tape, Tensor};

pub const STEP: f64 = 1e-5;

/// Loss with the value behind `StopGrad(W_e)` held at `frozen`, so that the
/// numeric derivative sees the same function autodiff differentiates.
pub fn loss(
    params: &ModelParams,
    frozen: &Tensor,
    batch: &[TurnExample],
    domains: &Domains,
    flags: LossFlags,
) -> f64 {
    let mut tape = Tape::new();
    let mut b = params.bind(&mut tape);
    b.pin_frozen_embedding(&mut tape, frozen.clone());
    let l = joint_loss(
        &mut tape,
        &mut b,
        batch,
        domains.tries(),
        flags,
        params.config.max_entity_len,
    )
    .unwrap();
    tape.value(l.total).item()
}

pub fn tiny_setup() -> (KnowledgeBase, Vec<Dialog>) {
    let spec = SynthSpec {
        n_entities: 4,
        n_attributes: 2,
        pool_size: 2,
        n_dialogs: 3,
        min_turns: 2,
        max_turns: 2,
        seed: 11,
        emit_spans: true,
    };
    let s = synthesize(&spec).unwrap();
    (s.kb, s.dialogs)
}

/// Largest relative error between autodiff and central differences over
/// every parameter entry.
pub fn max_relative_error(flags: LossFlags) -> f64 {
    let (kb, dialogs) = tiny_setup();
    let labeled = vec![dialogs[0].clone()];
    let unlabeled: Vec<Dialog> = dialogs[1..].iter().map(Dialog::without_labels).collect();
    let vocab = build_vocabulary(std::slice::from_ref(&kb), &[&dialogs]);
    assert!(vocab.len() <= 50, "vocab {}", vocab.len());
    let domains = Domains::new(vec![kb], &vocab).unwrap();
    let config = ModelConfig {
        d_model: 6,
        max_entity_len: domains.max_entity_len(),
        init_scale: 0.5,
        ..Default::default()
    };
    let mut batch = turn_examples(&labeled, &domains, &vocab, &config).unwrap();
    batch.extend(turn_examples(&unlabeled, &domains, &vocab, &config).unwrap());
    assert!(batch.iter().any(|e| e.entity.is_some()));
    assert!(batch.iter().any(|e| e.entity.is_none()));

    let params = ModelParams::init(config, vocab.len(), 5);
    let mut tape = Tape::new();
    let mut b = params.bind(&mut tape);
    let l = joint_loss(
        &mut tape,
        &mut b,
        &batch,
        domains.tries(),
        flags,
        params.config.max_entity_len,
    )
    .unwrap();
    let grads = b.gradients(&tape.backward(l.total), &params);

    let frozen = &params.embedding;
    let mut worst: f64 = 0.0;
    for (ti, g) in grads.iter().enumerate() {
        for j in 0..g.data().len() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data_mut()[j] += STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data_mut()[j] -= STEP;
            let numeric = (loss(&plus, frozen, &batch, &domains, flags)
                - loss(&minus, frozen, &batch, &domains, flags))
                / (2.0 * STEP);
            let analytic = g.data()[j];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
