//! End-to-end experiments: split, augment, train, generate, evaluate; and
//! the ablation matrix over several seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{
    build_training_sets, delex, load_dialogs, save_dialogs, stream_seed, AugmentReport, Dialog,
    TrainingSets,
};
use crate::corpus::{build_vocabulary, turn_examples, Domains};
use crate::error::{EcoError, Result};
use crate::eval::{evaluate, save_predictions, EmptyTurns, EvalReport, MetricsReport};
use crate::generate::{predict_dialogs, DecodeConfig, DecodeMode, EvalMode, GenerateOptions};
use crate::kb::{load_goals, KnowledgeBase, UserGoal, Vocabulary};
use crate::model::{Checkpoint, LossFlags, ModelConfig, ModelParams};
use crate::train::{train, EpochStats, TrainConfig};
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub kb: PathBuf,
    pub dialogs: PathBuf,
    pub goals: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub d_model: usize,
    pub max_len: usize,
    pub max_response_len: usize,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.d_model,
            max_len: m.max_len,
            max_response_len: m.max_response_len,
            init_scale: m.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSection {
    /// `greedy` or `top_k`.
    pub mode: String,
    pub k: usize,
    pub temperature: f64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            mode: "greedy".into(),
            k: 1,
            temperature: 1.0,
        }
    }
}

impl DecodeSection {
    pub fn mode(&self) -> Result<DecodeMode> {
        match self.mode.as_str() {
            "greedy" => Ok(DecodeMode::Greedy),
            "top_k" | "topk" => Ok(DecodeMode::TopK { k: self.k }),
            other => Err(EcoError::InvalidConfig(format!(
                "unknown decode mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flags {
    pub no_trie: bool,
    pub no_logit_concat: bool,
    pub logit_eval: bool,
    /// Train on the augmented dialogs only.
    pub au_only: bool,
    /// Train on the original dialogs only, without augmentation.
    pub tr_only: bool,
}

impl Flags {
    pub fn validate(&self) -> Result<()> {
        if self.au_only && self.tr_only {
            return Err(EcoError::InvalidConfig(
                "au_only and tr_only cannot both be set".into(),
            ));
        }
        Ok(())
    }

    pub fn loss_flags(&self) -> LossFlags {
        LossFlags {
            logit_concat: !self.no_logit_concat,
            stop_grad: true,
            use_trie: !self.no_trie,
        }
    }

    pub fn generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            use_trie: !self.no_trie,
            eval_mode: if self.logit_eval {
                EvalMode::Logits
            } else {
                EvalMode::Tokens
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Augmented dialogs per template.
    pub p: usize,
    /// Shares of the corpus used for training and development; the rest is
    /// the test split.
    pub train_share: f64,
    pub dev_share: f64,
    pub empty_turns: EmptyTurns,
    pub data: DataPaths,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub flags: Flags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            p: 4,
            train_share: 0.8,
            dev_share: 0.1,
            empty_turns: EmptyTurns::Consistent,
            data: DataPaths::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            decode: DecodeSection::default(),
            flags: Flags::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the file ends in `.json`. Relative data
    /// paths resolve against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| EcoError::io(path, e))?;
        let mut cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| EcoError::json(path, e))?
        } else {
            toml::from_str(&text)
                .map_err(|e| EcoError::InvalidConfig(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.kb);
        resolve(&mut cfg.data.dialogs);
        if let Some(g) = cfg.data.goals.as_mut() {
            resolve(g);
        }
        if let Some(o) = cfg.data.out_dir.as_mut() {
            resolve(o);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if self.p == 0 {
            return Err(EcoError::InvalidConfig("p must be at least 1".into()));
        }
        let shares_ok = self.train_share > 0.0
            && self.dev_share > 0.0
            && self.train_share + self.dev_share < 1.0;
        if !shares_ok {
            return Err(EcoError::InvalidConfig(
                "train_share and dev_share must be positive and leave a test split".into(),
            ));
        }
        if self.model.d_model == 0 || self.model.max_len < 2 {
            return Err(EcoError::InvalidConfig(
                "model dimensions are too small".into(),
            ));
        }
        self.train_config().validate()?;
        self.decode.mode()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            clip_norm: self.train.clip_norm,
            eval_every: self.train.eval_every,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, max_entity_len: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            max_len: self.model.max_len,
            max_entity_len,
            max_response_len: self.model.max_response_len,
            init_scale: self.model.init_scale,
        }
    }

    pub fn decode_config(&self, max_entity_len: usize) -> Result<DecodeConfig> {
        Ok(DecodeConfig {
            mode: self.decode.mode()?,
            temperature: self.decode.temperature,
            max_entity_len,
            max_response_len: self.model.max_response_len,
            seed: self.seed,
        })
    }
}

/// Inputs of one experiment, already in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub kb: KnowledgeBase,
    pub dialogs: Vec<Dialog>,
    /// Overrides the goals embedded in the dialogs, keyed by dialog id.
    pub goals: Option<BTreeMap<String, UserGoal>>,
}

impl Corpus {
    pub fn load(paths: &DataPaths) -> Result<Self> {
        let kb = KnowledgeBase::load(&paths.kb)?;
        let dialogs = load_dialogs(&paths.dialogs)?;
        let goals = paths.goals.as_ref().map(load_goals).transpose()?;
        Ok(Corpus { kb, dialogs, goals })
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Dialog>,
    pub dev: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

/// Contiguous split in file order.
pub fn split(dialogs: &[Dialog], train_share: f64, dev_share: f64) -> Result<Split> {
    let n = dialogs.len();
    let n_train = (n as f64 * train_share).round() as usize;
    let n_dev = (n as f64 * dev_share).round() as usize;
    if n_train == 0 || n_dev == 0 || n_train + n_dev >= n {
        return Err(EcoError::InvalidConfig(format!(
            "{n} dialogs are too few for a train/dev/test split"
        )));
    }
    Ok(Split {
        train: dialogs[..n_train].to_vec(),
        dev: dialogs[n_train..n_train + n_dev].to_vec(),
        test: dialogs[n_train + n_dev..].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevEvaluation {
    pub epoch: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub seed: u64,
    pub flags: Flags,
    pub train_dialogs: usize,
    pub dev_dialogs: usize,
    pub test_dialogs: usize,
    pub training_dialogs: usize,
    pub training_turns: usize,
    pub augmentation: AugmentReport,
    pub vocab_size: usize,
    pub parameters: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub history: Vec<EpochStats>,
    pub dev: Vec<DevEvaluation>,
    pub best_epoch: usize,
    pub test: EvalReport,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub checkpoint: Checkpoint,
    pub predictions: Vec<crate::eval::TurnPrediction>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| EcoError::io(path, e))
}

/// A trained model together with the data it was fitted on.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub parts: Split,
    pub vocab: Vocabulary,
    pub domains: Domains,
    pub params: ModelParams,
    pub checkpoint: Checkpoint,
    pub augmentation: AugmentReport,
    pub training_dialogs: usize,
    pub training_turns: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub history: Vec<EpochStats>,
    pub dev: Vec<DevEvaluation>,
    pub best_epoch: usize,
}

/// Splits, augments, builds the trie and trains with dev-set selection.
/// With `out_dir`, writes `augmented.jsonl`, `trie.json`,
/// `ckpt-epoch-NNN.json` and `best.json`.
pub fn fit(corpus: &Corpus, cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Fitted> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| EcoError::io(dir, e))?;
    }
    let kb = &corpus.kb;
    let parts =
        split(&corpus.dialogs, cfg.train_share, cfg.dev_share).map_err(|e| e.in_stage("split"))?;

    let templates = delex(&parts.train, kb).map_err(|e| e.in_stage("augment"))?;
    // Augmentation is drawn afresh every epoch from an epoch-indexed seed.
    let training_sets = |epoch: usize| {
        build_training_sets(
            &parts.train,
            &templates,
            kb,
            cfg.p,
            stream_seed(cfg.seed, epoch),
        )
        .map_err(|e| e.in_stage("augment"))
    };
    let choose = |sets: TrainingSets| {
        if cfg.flags.au_only {
            sets.d_au
        } else if cfg.flags.tr_only {
            sets.d_tr
        } else {
            sets.d_fn
        }
    };
    let (first, augmentation) = training_sets(1)?;
    if let Some(dir) = out_dir {
        save_dialogs(dir.join("augmented.jsonl"), &first.d_au)
            .map_err(|e| e.in_stage("augment"))?;
    }
    let first = choose(first);

    // Relexicalization only inserts KB values, which the vocabulary already
    // holds, so every epoch's sample shares it.
    let vocab = build_vocabulary(std::slice::from_ref(kb), &[&parts.train]);
    let domains = Domains::new(vec![kb.clone()], &vocab).map_err(|e| e.in_stage("trie"))?;
    if let Some(dir) = out_dir {
        write_json(&dir.join("trie.json"), &domains.tries()[0].dump(&vocab))
            .map_err(|e| e.in_stage("trie"))?;
    }

    let max_entity_len = domains.max_entity_len();
    let model_config = cfg.model_config(max_entity_len);
    let decode = cfg.decode_config(max_entity_len)?;
    let training_dialogs = first.len();
    let mut first = Some(first);
    let mut training_turns = 0;
    let data = |epoch: usize| {
        let dialogs = match first.take() {
            Some(d) if epoch == 1 => d,
            _ => choose(training_sets(epoch)?.0),
        };
        let examples = turn_examples(&dialogs, &domains, &vocab, &model_config)?;
        if epoch == 1 {
            training_turns = examples.len();
        }
        Ok(examples)
    };
    let params = ModelParams::init(model_config.clone(), vocab.len(), cfg.seed);
    let gen_opts = cfg.flags.generate_options();
    let fingerprints = domains.fingerprints();

    let mut dev = Vec::new();
    let outcome = train(
        params,
        data,
        domains.tries(),
        cfg.flags.loss_flags(),
        &cfg.train_config(),
        |epoch, p| {
            let preds = predict_dialogs(p, &vocab, &domains, &parts.dev, &decode, gen_opts)?;
            let report = evaluate(
                &preds,
                &parts.dev,
                &domains,
                corpus.goals.as_ref(),
                cfg.empty_turns,
            )?;
            if let Some(dir) = out_dir {
                Checkpoint::new(p, &vocab, fingerprints.clone(), cfg.seed, epoch)
                    .save(dir.join(format!("ckpt-epoch-{epoch:03}.json")))?;
            }
            let score = report.overall.score;
            dev.push(DevEvaluation {
                epoch,
                metrics: report.overall,
            });
            Ok(score)
        },
    )
    .map_err(|e| e.in_stage("train"))?;

    let checkpoint = Checkpoint::new(
        &outcome.params,
        &vocab,
        fingerprints,
        cfg.seed,
        outcome.best_epoch,
    );
    if let Some(dir) = out_dir {
        checkpoint
            .save(dir.join("best.json"))
            .map_err(|e| e.in_stage("train"))?;
    }
    Ok(Fitted {
        parts,
        vocab,
        domains,
        params: outcome.params,
        checkpoint,
        augmentation,
        training_dialogs,
        training_turns,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        history: outcome.history,
        dev,
        best_epoch: outcome.best_epoch,
    })
}

/// Runs one experiment: [`fit`], then generation and evaluation on the test
/// split. With `out_dir`, also writes `predictions.jsonl` and `report.json`.
pub fn run(corpus: &Corpus, cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    let fitted = fit(corpus, cfg, out_dir)?;
    let Fitted {
        parts,
        vocab,
        domains,
        params,
        checkpoint,
        ..
    } = &fitted;
    let decode = cfg.decode_config(domains.max_entity_len())?;
    let predictions = predict_dialogs(
        params,
        vocab,
        domains,
        &parts.test,
        &decode,
        cfg.flags.generate_options(),
    )
    .map_err(|e| e.in_stage("generate"))?;
    let test = evaluate(
        &predictions,
        &parts.test,
        domains,
        corpus.goals.as_ref(),
        cfg.empty_turns,
    )
    .map_err(|e| e.in_stage("eval"))?;

    let report = RunReport {
        version: FORMAT_VERSION,
        seed: cfg.seed,
        flags: cfg.flags,
        train_dialogs: parts.train.len(),
        dev_dialogs: parts.dev.len(),
        test_dialogs: parts.test.len(),
        training_dialogs: fitted.training_dialogs,
        training_turns: fitted.training_turns,
        augmentation: fitted.augmentation.clone(),
        vocab_size: vocab.len(),
        parameters: params.num_parameters(),
        initial_loss: fitted.initial_loss,
        final_loss: fitted.final_loss,
        history: fitted.history.clone(),
        dev: fitted.dev.clone(),
        best_epoch: fitted.best_epoch,
        test,
    };
    if let Some(dir) = out_dir {
        (|| {
            save_predictions(dir.join("predictions.jsonl"), &predictions)?;
            write_json(&dir.join("report.json"), &report)
        })()
        .map_err(|e| e.in_stage("report"))?;
    }
    Ok(RunOutput {
        report,
        checkpoint: checkpoint.clone(),
        predictions,
    })
}

/// The ablation variants, in table order.
pub fn ablation_variants() -> Vec<(&'static str, Flags)> {
    let base = Flags::default();
    vec![
        ("ECO", base),
        (
            "w/o trie",
            Flags {
                no_trie: true,
                ..base
            },
        ),
        (
            "w/o LogitConcat",
            Flags {
                no_logit_concat: true,
                ..base
            },
        ),
        (
            "w/ LogitEval",
            Flags {
                logit_eval: true,
                ..base
            },
        ),
        (
            "w/ au",
            Flags {
                au_only: true,
                ..base
            },
        ),
        (
            "w/ tr",
            Flags {
                tr_only: true,
                ..base
            },
        ),
    ]
}

pub const TABLE_COLUMNS: [&str; 7] = [
    "BLEU",
    "Inform",
    "Success",
    "Score",
    "F1",
    "Consistency",
    "Validity",
];

fn columns(m: &MetricsReport) -> [f64; 7] {
    [
        m.bleu,
        m.inform,
        m.success,
        m.score,
        m.f1,
        m.consistency,
        m.entity_validity.unwrap_or(f64::NAN),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub flags: Flags,
    pub seeds: Vec<u64>,
    pub mean: Vec<f64>,
    /// Sample standard deviation; zero for a single seed.
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub version: u32,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Plain-text table, numbers as `mean ± std` to 2 decimals.
    pub fn render(&self) -> String {
        let mut out = format!("{:<16}", "Model");
        for c in &self.columns {
            out.push_str(&format!(" {c:>15}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<16}", row.variant));
            for (m, s) in row.mean.iter().zip(&row.std) {
                out.push_str(&format!(" {:>15}", format!("{m:.2} ± {s:.2}")));
            }
            out.push('\n');
        }
        out
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every ablation variant with each of `seeds`.
pub fn ablate(corpus: &Corpus, base: &ExperimentConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(EcoError::InvalidConfig(
            "ablation needs at least one seed".into(),
        ));
    }
    let mut rows = Vec::new();
    for (name, flags) in ablation_variants() {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = ExperimentConfig {
                seed,
                flags,
                ..base.clone()
            };
            log::info!("ablation {name}, seed {seed}");
            let out = run(corpus, &cfg, None)?;
            per_seed.push(columns(&out.report.test.overall));
        }
        let (mean, std) = (0..TABLE_COLUMNS.len())
            .map(|c| mean_std(&per_seed.iter().map(|r| r[c]).collect::<Vec<_>>()))
            .unzip();
        rows.push(AblationRow {
            variant: name.to_string(),
            flags,
            seeds: seeds.to_vec(),
            mean,
            std,
        });
    }
    Ok(AblationTable {
        version: FORMAT_VERSION,
        columns: TABLE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}
