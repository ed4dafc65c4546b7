// Synthesizes the reference restaurant corpus and runs one full experiment:
// augment, train with dev-set checkpoint selection, generate on the test
// split, evaluate.
//
// `cargo run --release --example end_to_end [config.toml]`

use std::time::Instant;

use eco::pipeline::{run as run_experiment, Corpus, ExperimentConfig, RunOutput};
use eco::synth::{synthesize, SynthSpec};

pub fn run(cfg: &ExperimentConfig, spec: &SynthSpec) -> eco::Result<RunOutput> {
    let s = synthesize(spec)?;
    let corpus = Corpus {
        kb: s.kb,
        dialogs: s.dialogs,
        goals: Some(s.goals),
    };
    let start = Instant::now();
    let out = run_experiment(&corpus, cfg, None)?;
    let r = &out.report;
    println!(
        "{} training turns, vocab {}, {} parameters",
        r.training_turns, r.vocab_size, r.parameters
    );
    println!(
        "loss {:.4} -> {:.4} ({:.1}% of initial), best epoch {}, {:.1?}",
        r.initial_loss,
        r.final_loss,
        100.0 * r.final_loss / r.initial_loss,
        r.best_epoch,
        start.elapsed()
    );
    for p in out.predictions.iter().take(6) {
        println!(
            "{}#{} [{}] {}",
            p.dialog_id, p.turn, p.generated_entity, p.generated_response
        );
    }
    println!("{}", serde_json::to_string_pretty(&r.test.overall)?);
    Ok(out)
}

#[allow(dead_code)]
fn main() -> eco::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    run(&cfg, &SynthSpec::default()).map(|_| ())
}
