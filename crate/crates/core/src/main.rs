use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eco::augment::{augment_batch, delex_with_report, load_dialogs, save_dialogs, Dialog};
use eco::corpus::Domains;
use eco::eval::{evaluate, load_predictions, save_predictions, EmptyTurns};
use eco::generate::{predict_dialogs, DecodeConfig, DecodeMode, EvalMode, GenerateOptions};
use eco::kb::{load_goals, KnowledgeBase, UserGoal, Vocabulary};
use eco::model::Checkpoint;
use eco::pipeline::{ablate, fit, run, Corpus, ExperimentConfig};
use eco::synth::{synthesize, SynthSpec};
use eco::trie::EntityTrie;
use eco::{EcoError, Result};

#[derive(Parser)]
#[command(
    name = "eco",
    version,
    about = "Entity-consistent task-oriented dialog generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic KB, dialog corpus and goals to a directory.
    Synth(SynthArgs),
    /// Delexicalize annotated dialogs and relexicalize them with KB entities.
    Augment(AugmentArgs),
    /// Inspect entity tries.
    Trie {
        #[command(subcommand)]
        command: TrieCommand,
    },
    /// Split, augment and train; writes checkpoints to the output directory.
    Train(ExperimentArgs),
    /// Generate entities and responses for every turn with a checkpoint.
    Generate(GenerateArgs),
    /// Score predictions against reference dialogs.
    Eval(EvalArgs),
    /// Train, generate on the test split and evaluate.
    Pipeline(ExperimentArgs),
    /// Run every ablation variant over several seeds.
    Ablate(AblateArgs),
}

#[derive(Subcommand)]
enum TrieCommand {
    /// Print the trie of a KB as JSON.
    Dump(TrieDumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    entities: usize,
    #[arg(long, default_value_t = 4)]
    attributes: usize,
    #[arg(long, default_value_t = 10)]
    pool_size: usize,
    #[arg(long, default_value_t = 200)]
    dialogs: usize,
    #[arg(long, env = "ECO_SEED", default_value_t = 7)]
    seed: u64,
    /// Leave every dialog unannotated.
    #[arg(long)]
    no_spans: bool,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    dialogs: PathBuf,
    #[arg(long)]
    goals: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    p: usize,
    #[arg(long, env = "ECO_SEED", default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrieDumpArgs {
    #[arg(long)]
    kb: PathBuf,
    /// Use this checkpoint's vocabulary instead of one built from the KB.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `data.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    dialogs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_trie: bool,
    /// Feed the entity to the response encoder as LogitConcat vectors.
    #[arg(long)]
    logit_eval: bool,
    /// Sample from the `k` most likely tokens instead of greedy decoding.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, env = "ECO_SEED", default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    dialogs: PathBuf,
    #[arg(long)]
    goals: Option<PathBuf>,
    /// Drop turns with no extracted values from Consistency.
    #[arg(long)]
    exclude_empty: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Augment(a) => augment(a).map_err(|e| e.in_stage("augment")),
        Command::Trie {
            command: TrieCommand::Dump(a),
        } => trie_dump(a).map_err(|e| e.in_stage("trie")),
        Command::Train(a) => {
            let (cfg, out) = experiment(&a)?;
            let fitted = fit(&Corpus::load(&cfg.data)?, &cfg, Some(&out))?;
            println!(
                "best epoch {}, loss {:.4} -> {:.4}, checkpoint {}",
                fitted.best_epoch,
                fitted.initial_loss,
                fitted.final_loss,
                out.join("best.json").display()
            );
            Ok(())
        }
        Command::Generate(a) => generate(a).map_err(|e| e.in_stage("generate")),
        Command::Eval(a) => eval(a).map_err(|e| e.in_stage("eval")),
        Command::Pipeline(a) => {
            let (cfg, out) = experiment(&a)?;
            let output = run(&Corpus::load(&cfg.data)?, &cfg, Some(&out))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&output.report.test.overall)?
            );
            Ok(())
        }
        Command::Ablate(a) => {
            let cfg = load_config(&a.config)?;
            let table = ablate(&Corpus::load(&cfg.data)?, &cfg, &a.seeds)?;
            println!("{}", table.render());
            if let Some(out) = a.out {
                write(&out, &serde_json::to_string_pretty(&table)?)?;
            }
            Ok(())
        }
    }
}

/// Loads a config; `ECO_SEED` takes precedence over its seed.
fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Ok(seed) = std::env::var("ECO_SEED") {
        cfg.seed = seed.parse().map_err(|_| {
            EcoError::InvalidConfig(format!("ECO_SEED `{seed}` is not an unsigned integer"))
        })?;
    }
    Ok(cfg)
}

fn experiment(a: &ExperimentArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = load_config(&a.config)?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.data.out_dir.clone())
        .ok_or_else(|| {
            EcoError::InvalidConfig("no output directory: pass --out or set data.out_dir".into())
        })?;
    Ok((cfg, out))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| EcoError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn with_goals(mut dialogs: Vec<Dialog>, goals: Option<&BTreeMap<String, UserGoal>>) -> Vec<Dialog> {
    if let Some(goals) = goals {
        for d in &mut dialogs {
            if let Some(g) = goals.get(&d.id) {
                d.goal = g.clone();
            }
        }
    }
    dialogs
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_entities: a.entities,
        n_attributes: a.attributes,
        pool_size: a.pool_size,
        n_dialogs: a.dialogs,
        seed: a.seed,
        emit_spans: !a.no_spans,
        ..Default::default()
    };
    let s = synthesize(&spec)?;
    s.write(&a.out)?;
    println!(
        "{} entities, {} dialogs written to {}",
        s.kb.len(),
        s.dialogs.len(),
        a.out.display()
    );
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<()> {
    let kb = KnowledgeBase::load(&a.kb)?;
    let goals = a.goals.as_ref().map(load_goals).transpose()?;
    let dialogs = with_goals(load_dialogs(&a.dialogs)?, goals.as_ref());
    let (templates, delexed) = delex_with_report(&dialogs, &kb)?;
    let (augmented, report) = augment_batch(&templates, &kb, a.p, a.seed)?;
    save_dialogs(&a.out, &augmented)?;
    eprintln!("{}", serde_json::to_string_pretty(&delexed)?);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn trie_dump(a: TrieDumpArgs) -> Result<()> {
    let kb = KnowledgeBase::load(&a.kb)?;
    let vocab = match &a.checkpoint {
        Some(path) => Checkpoint::load(path)?.vocabulary()?,
        None => Vocabulary::build(&[&kb], std::iter::empty()),
    };
    let trie = EntityTrie::build(&kb, &vocab)?;
    let text = serde_json::to_string_pretty(&trie.dump(&vocab))?;
    match a.out {
        Some(out) => write(&out, &text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let params = checkpoint.params()?;
    let vocab = checkpoint.vocabulary()?;
    let domains = Domains::new(vec![KnowledgeBase::load(&a.kb)?], &vocab)?;
    domains.check_fingerprints(&checkpoint.kb_fingerprints)?;
    let dialogs = load_dialogs(&a.dialogs)?;
    let cfg = DecodeConfig {
        mode: a
            .top_k
            .map_or(DecodeMode::Greedy, |k| DecodeMode::TopK { k }),
        temperature: a.temperature,
        max_entity_len: params.config.max_entity_len,
        max_response_len: params.config.max_response_len,
        seed: a.seed,
    };
    let opts = GenerateOptions {
        use_trie: !a.no_trie,
        eval_mode: if a.logit_eval {
            EvalMode::Logits
        } else {
            EvalMode::Tokens
        },
    };
    let predictions = predict_dialogs(&params, &vocab, &domains, &dialogs, &cfg, opts)?;
    save_predictions(&a.out, &predictions)?;
    println!("{} turns written to {}", predictions.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let kb = KnowledgeBase::load(&a.kb)?;
    let vocab = Vocabulary::build(&[&kb], std::iter::empty());
    let domains = Domains::new(vec![kb], &vocab)?;
    let goals = a.goals.as_ref().map(load_goals).transpose()?;
    let predictions = load_predictions(&a.predictions)?;
    let references = load_dialogs(&a.dialogs)?;
    let empty = if a.exclude_empty {
        EmptyTurns::Excluded
    } else {
        EmptyTurns::Consistent
    };
    let report = evaluate(&predictions, &references, &domains, goals.as_ref(), empty)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        write(out, &text)?;
    }
    println!("{text}");
    Ok(())
}
