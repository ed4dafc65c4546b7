//! Autoregressive decoding: entities under the trie constraint, then
//! responses conditioned on them.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{stream_seed, Dialog};
use crate::corpus::Domains;
use crate::distribution::argmax;
use crate::error::{EcoError, Result};
use crate::eval::TurnPrediction;
use crate::kb::{TokenId, Vocabulary, EOS_ID};
use crate::model::{
    decode_entity, encode, encode_with_entity, logit_concat, source_ids, DecoderKind, EntityInput,
    ModelParams, StepDecoder,
};
use crate::tape::Tape;
use crate::trie::{AllowedSet, EntityTrie};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    TopK { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(flatten)]
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_entity_len: usize,
    pub max_response_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            max_entity_len: 32,
            max_response_len: 40,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if let DecodeMode::TopK { k: 0 } = self.mode {
            return Err(EcoError::InvalidConfig("top-k needs k >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(EcoError::InvalidConfig(
                "temperature must be positive".into(),
            ));
        }
        if self.max_entity_len == 0 || self.max_response_len == 0 {
            return Err(EcoError::InvalidConfig(
                "decode lengths must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// How the generated entity reaches the response encoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Tokens,
    /// LogitConcat vectors, as during training on unlabeled dialogs.
    Logits,
}

/// Picks the next token from `probs`. Greedy ties go to the lowest id.
/// Top-k keeps the `k` most likely tokens with nonzero mass (lowest id
/// first on ties) and samples from `p^(1/T)`.
pub fn choose_token(
    probs: &[f64],
    mode: DecodeMode,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> TokenId {
    match mode {
        DecodeMode::Greedy => argmax(probs) as TokenId,
        DecodeMode::TopK { k } => {
            let mut ids: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
            ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            ids.truncate(k);
            if ids.len() <= 1 {
                return ids.first().map_or(argmax(probs), |&i| i) as TokenId;
            }
            let logs: Vec<f64> = ids.iter().map(|&i| probs[i].ln() / temperature).collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
            let dist = WeightedIndex::new(&weights).expect("weights are positive");
            ids[dist.sample(rng)] as TokenId
        }
    }
}

/// Decodes an entity for `source`. With a trie the result is a complete
/// root-to-EOS path of it.
pub fn generate_entity(
    params: &ModelParams,
    trie: Option<&EntityTrie>,
    source: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let g = encode(&mut tape, &b, source);
    let soft = decode_entity(
        &mut tape,
        &b,
        &g,
        trie,
        cfg.max_entity_len,
        |p, _: Option<&AllowedSet>| choose_token(p, cfg.mode, cfg.temperature, rng),
    )?;
    if trie.is_some() {
        assert_eq!(
            soft.tokens.last(),
            Some(&EOS_ID),
            "constrained entity decode stopped before EOS; max_entity_len is shorter than a KB path"
        );
    }
    Ok(soft.tokens)
}

/// Decodes a response given the encoder input `[source; entity]`. The
/// returned tokens exclude the final EOS.
pub fn generate_response(
    params: &ModelParams,
    source: &[TokenId],
    entity: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<TokenId> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let h = encode_with_entity(&mut tape, &b, source, EntityInput::Tokens(entity));
    decode_response(&mut tape, &b, &h, cfg, rng)
}

fn decode_response(
    tape: &mut Tape,
    b: &crate::model::Bound,
    h: &crate::model::Encoded,
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<TokenId> {
    let mut dec = StepDecoder::new(DecoderKind::Response, h);
    let mut prev = crate::kb::BOS_ID;
    let mut out = Vec::new();
    for _ in 0..cfg.max_response_len {
        let logits = dec.step(tape, b, prev);
        let probs = tape.softmax(logits);
        let tok = choose_token(tape.value(probs).row(0), cfg.mode, cfg.temperature, rng);
        if tok == EOS_ID {
            break;
        }
        out.push(tok);
        prev = tok;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedTurn {
    /// Entity tokens including the final EOS; empty for domains without a KB.
    pub entity: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// Generates entity and response for one turn from its encoder source.
pub fn generate_turn(
    params: &ModelParams,
    trie: Option<&EntityTrie>,
    source: &[TokenId],
    cfg: &DecodeConfig,
    mode: EvalMode,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedTurn> {
    match (mode, trie) {
        (EvalMode::Logits, Some(t)) => {
            let mut tape = Tape::new();
            let mut b = params.bind(&mut tape);
            let g = encode(&mut tape, &b, source);
            let soft = decode_entity(&mut tape, &b, &g, Some(t), cfg.max_entity_len, |p, _| {
                choose_token(p, cfg.mode, cfg.temperature, rng)
            })?;
            let repr = logit_concat(&mut tape, &mut b, &soft.dists, true);
            let h = encode_with_entity(&mut tape, &b, source, EntityInput::Repr(repr));
            let response = decode_response(&mut tape, &b, &h, cfg, rng);
            Ok(GeneratedTurn {
                entity: soft.tokens,
                response,
            })
        }
        _ => {
            let entity = match trie {
                Some(_) => generate_entity(params, trie, source, cfg, rng)?,
                None => Vec::new(),
            };
            let response = generate_response(params, source, &entity, cfg, rng);
            Ok(GeneratedTurn { entity, response })
        }
    }
}

/// Inference options beyond the decode configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Decode entities without the trie constraint (the decode still stops
    /// at EOS or `max_entity_len`).
    pub use_trie: bool,
    pub eval_mode: EvalMode,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            use_trie: true,
            eval_mode: EvalMode::Tokens,
        }
    }
}

/// Predicts every turn of every dialog, conditioning on the gold history.
/// Each dialog draws from its own RNG stream.
pub fn predict_dialogs(
    params: &ModelParams,
    vocab: &Vocabulary,
    domains: &Domains,
    dialogs: &[Dialog],
    cfg: &DecodeConfig,
    opts: GenerateOptions,
) -> Result<Vec<TurnPrediction>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (di, dialog) in dialogs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, di));
        let trie = domains.trie(&dialog.domain);
        let constraint = if opts.use_trie { trie } else { None };
        for (t, turn) in dialog.turns.iter().enumerate() {
            let source = source_ids(
                vocab,
                &dialog.context(t),
                &turn.user,
                params.config.max_len,
                params.config.max_entity_len,
            );
            let gen = match (trie, constraint) {
                // Without the constraint the entity is still decoded for a
                // KB domain; only the masking is dropped.
                (Some(_), None) => {
                    let entity = generate_entity(params, None, &source, cfg, &mut rng)?;
                    let response = generate_response(params, &source, &entity, cfg, &mut rng);
                    GeneratedTurn { entity, response }
                }
                _ => generate_turn(params, constraint, &source, cfg, opts.eval_mode, &mut rng)?,
            };
            out.push(TurnPrediction {
                dialog_id: dialog.id.clone(),
                turn: t,
                generated_entity: vocab.detokenize(&gen.entity),
                generated_response: vocab.detokenize(&gen.response),
            });
        }
    }
    Ok(out)
}

/// Share of `entities` that are complete paths of `trie`, in [0, 1].
pub fn validity_rate(entities: &[Vec<TokenId>], trie: &EntityTrie) -> f64 {
    if entities.is_empty() {
        return 1.0;
    }
    let valid = entities.iter().filter(|e| trie.contains(e)).count();
    valid as f64 / entities.len() as f64
}
