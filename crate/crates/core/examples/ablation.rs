// Runs every ablation variant on the synthetic corpus over a few seeds and
// prints the mean ± std table.
//
// `cargo run --release --example ablation [config.toml] [seeds]`
//
// Six variants × three seeds at the default settings take several minutes;
// lower `train.epochs` in the config for a quick look.

use eco::pipeline::{ablate, AblationTable, Corpus, ExperimentConfig};
use eco::synth::{synthesize, SynthSpec};

pub fn run(cfg: &ExperimentConfig, spec: &SynthSpec, seeds: &[u64]) -> eco::Result<AblationTable> {
    let s = synthesize(spec)?;
    let corpus = Corpus {
        kb: s.kb,
        dialogs: s.dialogs,
        goals: Some(s.goals),
    };
    let table = ablate(&corpus, cfg, seeds)?;
    print!("{}", table.render());
    Ok(table)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let seeds = match args.next() {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<Vec<u64>, _>>()?,
        None => vec![1, 2, 3],
    };
    run(&cfg, &SynthSpec::default(), &seeds)?;
    Ok(())
}
