//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eco::augment::{build_training_sets, delex, relex, Dialog};
use eco::corpus::build_vocabulary;
use eco::distribution::TokenDistribution;
use eco::eval::{bleu, consistency, evaluate, f1, inform_success, score, EmptyTurns};
use eco::generate::{
    generate_entity, predict_dialogs, DecodeConfig, DecodeMode, EvalMode, GenerateOptions,
};
use eco::kb::{normalize, KnowledgeBase, UserGoal};
use eco::model::{logit_concat, turn_loss, LossFlags, ModelConfig, ModelParams, TurnExample};
use eco::pipeline::{fit, Corpus, ExperimentConfig, Flags};
use eco::synth::{synthesize, SynthSpec};
use eco::tape::{Tape, Tensor};
use eco::trie::{constrain, AllowedSet, EntityTrie};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn trie_validity() -> Outcome {
    let spec = SynthSpec {
        n_entities: 100,
        n_dialogs: 10,
        ..Default::default()
    };
    let s = synthesize(&spec).unwrap();
    let vocab = build_vocabulary(std::slice::from_ref(&s.kb), &[&s.dialogs]);
    let trie = EntityTrie::build(&s.kb, &vocab).unwrap();
    let config = ModelConfig {
        max_entity_len: s.kb.max_linearized_len(),
        ..Default::default()
    };
    let params = ModelParams::init(config, vocab.len(), 99);
    let linearized: HashSet<Vec<String>> = (0..s.kb.len())
        .map(|i| s.kb.linearize(i).unwrap())
        .collect();
    let cfg = DecodeConfig {
        mode: DecodeMode::TopK { k: vocab.len() },
        max_entity_len: params.config.max_entity_len,
        ..Default::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let (mut valid, mut seen) = (0usize, HashSet::new());
    const N: usize = 10_000;
    for _ in 0..N {
        let len = rng.gen_range(2..12);
        let source: Vec<_> = (0..len)
            .map(|_| rng.gen_range(4..vocab.len()) as u32)
            .collect();
        let entity = generate_entity(&params, Some(&trie), &source, &cfg, &mut rng).unwrap();
        let words = vocab.decode(&entity);
        if trie.contains(&entity) && linearized.contains(&words) {
            valid += 1;
        }
        seen.insert(words);
    }
    let elapsed = start.elapsed();
    check(
        valid == N && elapsed < Duration::from_secs(30),
        format!(
            "{valid}/{N} valid, {} distinct entities, {:.1?}",
            seen.len(),
            elapsed
        ),
    )
}

fn renormalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_ratio) = (0f64, 0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(2..300);
        // Logits over a wide range give both tiny and dominant entries.
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let dist = TokenDistribution::from_logits(&logits);
        let k = rng.gen_range(1..=n);
        let ids = rand::seq::index::sample(&mut rng, n, k)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        let allowed = AllowedSet::new(ids);
        let out = constrain(&dist, &allowed).map_err(|e| e.to_string())?;

        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row_vector(dist.probs().to_vec()));
        let on_tape = tape.constrain(v, &allowed).map_err(|e| e.to_string())?;
        if tape.value(on_tape).data() != out.probs() {
            return Err("tape and value-level renormalization disagree".into());
        }

        let total: f64 = out.probs().iter().sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
        for (i, &p) in out.probs().iter().enumerate() {
            if !allowed.contains(i as u32) && p != 0.0 {
                return Err(format!("mass {p:e} outside the allowed set"));
            }
        }
        let a = allowed.ids();
        for _ in 0..20 {
            let (i, j) = (
                a[rng.gen_range(0..a.len())] as usize,
                a[rng.gen_range(0..a.len())] as usize,
            );
            let before = dist.prob(i as u32) / dist.prob(j as u32);
            let after = out.prob(i as u32) / out.prob(j as u32);
            worst_ratio = worst_ratio.max(((after - before) / before).abs());
        }
    }
    check(
        worst_sum <= 1e-6 && worst_ratio <= 1e-9,
        format!("max |sum - 1| {worst_sum:.1e}, max ratio drift {worst_ratio:.1e}"),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let with = common::max_relative_error(LossFlags::default());
    let without = common::max_relative_error(LossFlags {
        logit_concat: false,
        ..Default::default()
    });
    let elapsed = start.elapsed();
    check(
        with < 1e-4 && without < 1e-4 && elapsed < Duration::from_secs(120),
        format!("max relative error {with:.1e} (LogitConcat), {without:.1e} (token input), {elapsed:.1?}"),
    )
}

/// W_e gradient of one unlabeled turn's loss. With `pinned`, the table of
/// the LogitConcat product is a detached constant copy of W_e.
fn embedding_grad(
    params: &ModelParams,
    ex: &TurnExample,
    tries: &[EntityTrie],
    stop_grad: bool,
    pinned: bool,
) -> Tensor {
    let mut tape = Tape::new();
    let mut b = params.bind(&mut tape);
    if pinned {
        b.pin_frozen_embedding(&mut tape, params.embedding.clone());
    }
    let flags = LossFlags {
        stop_grad,
        ..Default::default()
    };
    let l = turn_loss(
        &mut tape,
        &mut b,
        ex,
        tries,
        flags,
        params.config.max_entity_len,
    )
    .unwrap();
    tape.backward(l.response)
        .wrt(b.embedding, params.embedding.shape())
}

fn stop_grad_contract() -> Outcome {
    let s = synthesize(&SynthSpec::default()).unwrap();
    let unlabeled: Vec<Dialog> = s.dialogs[..4].iter().map(Dialog::without_labels).collect();
    let vocab = build_vocabulary(std::slice::from_ref(&s.kb), &[&s.dialogs]);
    let domains = eco::corpus::Domains::new(vec![s.kb.clone()], &vocab).unwrap();
    let config = ModelConfig {
        max_entity_len: domains.max_entity_len(),
        ..Default::default()
    };
    let examples = eco::corpus::turn_examples(&unlabeled, &domains, &vocab, &config).unwrap();
    let params = ModelParams::init(config, vocab.len(), 4);

    // The product alone: the loss depends on W_e only through it.
    let mut product_only = Vec::new();
    for stop_grad in [true, false] {
        let mut tape = Tape::new();
        let mut b = params.bind(&mut tape);
        let dists: Vec<_> = [
            TokenDistribution::uniform(vocab.len()),
            TokenDistribution::one_hot(vocab.len(), 7),
        ]
        .iter()
        .map(|d| tape.constant(Tensor::row_vector(d.probs().to_vec())))
        .collect();
        let repr = logit_concat(&mut tape, &mut b, &dists, stop_grad);
        let loss = tape.sum_all(repr);
        product_only.push(
            tape.backward(loss)
                .wrt(b.embedding, params.embedding.shape()),
        );
    }
    if !product_only[0].is_zero() {
        return Err("W_e gradient through a stopped product is not the zero matrix".into());
    }
    if product_only[1].is_zero() {
        return Err("W_e gradient through an unstopped product is zero".into());
    }

    // Full unlabeled turns: stopping must equal detaching, bit for bit.
    let mut differing = 0;
    for ex in &examples {
        let stopped = embedding_grad(&params, ex, domains.tries(), true, false);
        let detached = embedding_grad(&params, ex, domains.tries(), true, true);
        if stopped.data() != detached.data() {
            return Err("StopGrad leaks gradient into W_e on a full turn".into());
        }
        let live = embedding_grad(&params, ex, domains.tries(), false, false);
        if live.data() != stopped.data() {
            differing += 1;
        }
    }
    check(
        differing == examples.len(),
        format!(
            "product-only gradient exactly zero; {} turns identical to detached copy; {differing} change without StopGrad",
            examples.len()
        ),
    )
}

fn augmentation_round_trip() -> Outcome {
    let s = synthesize(&SynthSpec::default()).unwrap();
    for d in &s.dialogs {
        let template = delex(std::slice::from_ref(d), &s.kb).map_err(|e| e.to_string())?;
        let [template] = template.as_slice() else {
            return Err(format!("{}: no template", d.id));
        };
        let entity = d
            .turns
            .iter()
            .find_map(|t| t.gold_entity)
            .ok_or(format!("{}: unlabeled", d.id))?;
        let back = relex(template, s.kb.entity(entity).unwrap())
            .ok_or(format!("{}: relex failed", d.id))?;
        if &back != d {
            return Err(format!("{}: relex(delex(d)) differs from d", d.id));
        }
    }
    let templates = delex(&s.dialogs, &s.kb).unwrap();
    let (sets, _) = build_training_sets(&s.dialogs, &templates, &s.kb, 2, 7).unwrap();
    let mut turns = 0;
    for d in &sets.d_au {
        for t in &d.turns {
            let c = consistency(
                &[(t.user.clone(), t.response.clone())],
                &s.kb,
                EmptyTurns::Consistent,
            );
            if c != Some(1.0) {
                return Err(format!("{}: inconsistent augmented turn", d.id));
            }
            turns += 1;
        }
    }
    check(
        true,
        format!(
            "{} dialogs round-trip; {} augmented dialogs, {turns} turns all consistent",
            s.dialogs.len(),
            sets.d_au.len()
        ),
    )
}

fn score_reproduction() -> Outcome {
    let a = score(12.61, 83.63, 75.37);
    let b = score(15.05, 72.57, 64.16);
    check(
        (a - 92.11).abs() <= 0.01 && (b - 83.42).abs() <= 0.01,
        format!("{a:.4}, {b:.4}"),
    )
}

fn fixture_kb() -> (KnowledgeBase, serde_json::Value) {
    let fx: serde_json::Value =
        serde_json::from_str(include_str!("fixtures/metrics.json")).unwrap();
    let kb = KnowledgeBase::from_json_str(&fx["kb"].to_string()).unwrap();
    (kb, fx)
}

fn consistency_example() -> Outcome {
    let (kb, _) = fixture_kb();
    let turn = |u: &str, r: &str| vec![(normalize(u), normalize(r))];
    let wrong = consistency(
        &turn(
            "i want italian food",
            "gourmet kitchen is a great italian restaurant",
        ),
        &kb,
        EmptyTurns::Consistent,
    );
    let right = consistency(
        &turn(
            "i want north american food",
            "gourmet kitchen serves north american food",
        ),
        &kb,
        EmptyTurns::Consistent,
    );
    check(
        wrong == Some(0.0) && right == Some(1.0),
        format!("italian claim {wrong:?}, north american claim {right:?}"),
    )
}

// Values from tests/oracle/metrics_oracle.py on tests/fixtures/metrics.json.
const F1_CORPUS: f64 = 0.6;
const F1_EACH: [f64; 5] = [
    0.8571428571428571,
    0.5714285714285714,
    0.6666666666666666,
    1.0,
    0.0,
];
const INFORM_SUCCESS: [(bool, bool); 5] = [
    (true, true),
    (true, false),
    (true, true),
    (false, false),
    (true, true),
];
const BLEU_CORPUS: f64 = 37.32965916275629;
const BLEU_EACH: [f64; 5] = [
    75.45031759729784,
    75.21206186172788,
    4.761947524651228,
    13.53352832366127,
    32.260135189272866,
];

fn metric_oracles() -> Outcome {
    let (kb, fx) = fixture_kb();
    let side = |items: &serde_json::Value, key: &str| -> Vec<Vec<String>> {
        items
            .as_array()
            .unwrap()
            .iter()
            .map(|i| normalize(i[key].as_str().unwrap()))
            .collect()
    };
    let mut worst = 0f64;
    let mut close = |got: f64, want: f64| worst = worst.max((got - want).abs());

    let (p, r) = (side(&fx["f1"], "prediction"), side(&fx["f1"], "reference"));
    close(f1(&p, &r, &kb).unwrap(), F1_CORPUS);
    for i in 0..5 {
        close(f1(&p[i..=i], &r[i..=i], &kb).unwrap(), F1_EACH[i]);
    }

    let (p, r) = (
        side(&fx["bleu"], "prediction"),
        side(&fx["bleu"], "reference"),
    );
    close(bleu(&p, &r).unwrap(), BLEU_CORPUS);
    for i in 0..5 {
        close(bleu(&p[i..=i], &r[i..=i]).unwrap(), BLEU_EACH[i]);
    }

    let mut flags = Vec::new();
    for d in fx["inform_success"].as_array().unwrap() {
        let goal: UserGoal = serde_json::from_value(d["goal"].clone()).unwrap();
        let responses: Vec<Vec<String>> = d["responses"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| normalize(r.as_str().unwrap()))
            .collect();
        flags.push(inform_success(&responses, &goal, &kb));
    }
    check(
        worst <= 1e-6 && flags == INFORM_SUCCESS,
        format!("max deviation {worst:.1e}, inform/success {flags:?}"),
    )
}

struct SeedRun {
    loss_ratio: f64,
    no_trie_loss_ratio: f64,
    validity: f64,
    no_trie_validity: f64,
    tokens_consistency: f64,
    logits_consistency: f64,
}

fn seed_run(corpus: &Corpus, seed: u64) -> SeedRun {
    let cfg = |flags: Flags| ExperimentConfig {
        seed,
        flags,
        ..Default::default()
    };
    let test_metrics =
        |cfg: &ExperimentConfig, eval_mode: EvalMode, fitted: &eco::pipeline::Fitted| {
            let decode = cfg.decode_config(fitted.domains.max_entity_len()).unwrap();
            let opts = GenerateOptions {
                eval_mode,
                ..cfg.flags.generate_options()
            };
            let preds = predict_dialogs(
                &fitted.params,
                &fitted.vocab,
                &fitted.domains,
                &fitted.parts.test,
                &decode,
                opts,
            )
            .unwrap();
            evaluate(
                &preds,
                &fitted.parts.test,
                &fitted.domains,
                corpus.goals.as_ref(),
                cfg.empty_turns,
            )
            .unwrap()
            .overall
        };

    let full_cfg = cfg(Flags::default());
    let full = fit(corpus, &full_cfg, None).unwrap();
    let tokens = test_metrics(&full_cfg, EvalMode::Tokens, &full);
    let logits = test_metrics(&full_cfg, EvalMode::Logits, &full);

    let no_trie_cfg = cfg(Flags {
        no_trie: true,
        ..Default::default()
    });
    let no_trie = fit(corpus, &no_trie_cfg, None).unwrap();
    let unconstrained = test_metrics(&no_trie_cfg, EvalMode::Tokens, &no_trie);

    SeedRun {
        loss_ratio: full.final_loss / full.initial_loss,
        no_trie_loss_ratio: no_trie.final_loss / no_trie.initial_loss,
        validity: tokens.entity_validity.unwrap_or(f64::NAN),
        no_trie_validity: unconstrained.entity_validity.unwrap_or(f64::NAN),
        tokens_consistency: tokens.consistency,
        logits_consistency: logits.consistency,
    }
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn mean(runs: &BTreeMap<u64, SeedRun>, f: impl Fn(&SeedRun) -> f64) -> f64 {
    runs.values().map(f).sum::<f64>() / runs.len() as f64
}

/// The trie guarantee must hold on every run; the gap to the unconstrained
/// ablation is compared on the seed means.
fn toy_training(runs: &BTreeMap<u64, SeedRun>, elapsed: Duration) -> Outcome {
    let mut ok = elapsed < Duration::from_secs(600);
    let mut lines = Vec::new();
    for (seed, r) in runs {
        ok &= r.loss_ratio <= 0.2 && r.no_trie_loss_ratio <= 0.2;
        ok &= r.validity == 100.0;
        lines.push(format!(
            "seed {seed}: loss {:.1}%/{:.1}%, validity {:.1} vs {:.1} w/o trie",
            100.0 * r.loss_ratio,
            100.0 * r.no_trie_loss_ratio,
            r.validity,
            r.no_trie_validity
        ));
    }
    let (with, without) = (
        mean(runs, |r| r.validity),
        mean(runs, |r| r.no_trie_validity),
    );
    ok &= without < with;
    check(
        ok,
        format!(
            "{}; mean {with:.2} vs {without:.2}; {:.0?} for 6 trainings",
            lines.join("; "),
            elapsed
        ),
    )
}

fn logit_eval_gap(runs: &BTreeMap<u64, SeedRun>) -> Outcome {
    let (tokens, logits) = (
        mean(runs, |r| r.tokens_consistency),
        mean(runs, |r| r.logits_consistency),
    );
    let lines: Vec<String> = runs
        .iter()
        .map(|(seed, r)| {
            format!(
                "seed {seed}: {:.2} tokens vs {:.2} logits",
                r.tokens_consistency, r.logits_consistency
            )
        })
        .collect();
    check(
        tokens >= logits,
        format!("{}; mean {tokens:.2} vs {logits:.2}", lines.join("; ")),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: std::thread::Result<Outcome>| {
        let outcome = outcome.unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    };

    report(1, "trie validity", catch_unwind(trie_validity));
    report(2, "renormalization", catch_unwind(renormalization));
    report(3, "gradient check", catch_unwind(gradient_check));
    report(4, "StopGrad contract", catch_unwind(stop_grad_contract));
    report(
        5,
        "augmentation round trip",
        catch_unwind(augmentation_round_trip),
    );
    report(6, "score formula", catch_unwind(score_reproduction));
    report(7, "consistency example", catch_unwind(consistency_example));

    let s = synthesize(&SynthSpec::default()).unwrap();
    let corpus = Corpus {
        kb: s.kb,
        dialogs: s.dialogs,
        goals: Some(s.goals),
    };
    let start = Instant::now();
    let runs = catch_unwind(AssertUnwindSafe(|| {
        SEEDS
            .iter()
            .map(|&seed| (seed, seed_run(&corpus, seed)))
            .collect::<BTreeMap<_, _>>()
    }));
    let elapsed = start.elapsed();
    match runs {
        Ok(runs) => {
            report(8, "toy training", Ok(toy_training(&runs, elapsed)));
            report(9, "LogitEval gap", Ok(logit_eval_gap(&runs)));
        }
        Err(p) => {
            report(8, "toy training", Err(p));
            report(9, "LogitEval gap", Ok(Err("training failed".into())));
        }
    }
    report(10, "metric oracles", catch_unwind(metric_oracles));

    if failed > 0 {
        println!("{failed} of 10 criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
