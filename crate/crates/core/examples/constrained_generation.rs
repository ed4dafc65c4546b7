// Samples entities from an untrained model with and without the trie
// constraint, then round-trips the parameters through a checkpoint file.
//
// `cargo run --release --example constrained_generation [samples]`

use std::path::Path;

use eco::corpus::build_vocabulary;
use eco::generate::{generate_entity, validity_rate, DecodeConfig, DecodeMode};
use eco::model::{Checkpoint, ModelConfig, ModelParams};
use eco::synth::{synthesize, SynthSpec};
use eco::trie::EntityTrie;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Summary {
    pub constrained: f64,
    pub unconstrained: f64,
    pub reloaded_identical: bool,
}

pub fn run(samples: usize, dir: &Path) -> eco::Result<Summary> {
    let s = synthesize(&SynthSpec {
        n_entities: 50,
        n_dialogs: 10,
        ..Default::default()
    })?;
    let vocab = build_vocabulary(std::slice::from_ref(&s.kb), &[&s.dialogs]);
    let trie = EntityTrie::build(&s.kb, &vocab)?;
    let config = ModelConfig {
        d_model: 16,
        max_entity_len: s.kb.max_linearized_len(),
        ..Default::default()
    };
    let params = ModelParams::init(config, vocab.len(), 11);
    let cfg = DecodeConfig {
        mode: DecodeMode::TopK { k: vocab.len() },
        max_entity_len: s.kb.max_linearized_len(),
        ..Default::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sources: Vec<Vec<u32>> = (0..samples)
        .map(|_| {
            (0..8)
                .map(|_| rng.gen_range(0..vocab.len()) as u32)
                .collect()
        })
        .collect();
    let mut with_trie = Vec::new();
    let mut without = Vec::new();
    for src in &sources {
        with_trie.push(generate_entity(&params, Some(&trie), src, &cfg, &mut rng)?);
        without.push(generate_entity(&params, None, src, &cfg, &mut rng)?);
    }
    let constrained = validity_rate(&with_trie, &trie);
    let unconstrained = validity_rate(&without, &trie);
    println!("{samples} samples, {} entities in the KB", s.kb.len());
    println!(
        "constrained:   {:.1}% valid, e.g. {}",
        100.0 * constrained,
        vocab.detokenize(&with_trie[0])
    );
    println!(
        "unconstrained: {:.1}% valid, e.g. {}",
        100.0 * unconstrained,
        vocab.detokenize(&without[0])
    );

    let path = dir.join("random.json");
    Checkpoint::new(&params, &vocab, vec![s.kb.fingerprint()], 11, 0).save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let restored = loaded.params()?;
    let reloaded_identical = restored
        .tensors()
        .iter()
        .zip(params.tensors())
        .all(|(a, b)| a.data() == b.data())
        && loaded.vocabulary()?.tokens() == vocab.tokens();
    println!(
        "checkpoint {} restores identical parameters: {reloaded_identical}",
        path.display()
    );
    Ok(Summary {
        constrained,
        unconstrained,
        reloaded_identical,
    })
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(500);
    let dir = std::env::temp_dir().join("eco-constrained-generation");
    std::fs::create_dir_all(&dir)?;
    run(samples, &dir)?;
    Ok(())
}
