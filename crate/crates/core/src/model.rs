//! Shared-encoder sequence-to-sequence model with an entity decoder and a
//! response decoder.
//!
//! One embedding matrix `W_e` serves the input lookup, both decoders'
//! output projections (`logits = o · W_eᵀ + b`) and the LogitConcat product.
//! The encoder is a single-layer tanh RNN whose attention memory adds each
//! input row to its recurrent state. Each decoder is a tanh RNN initialized
//! from the last encoder state, with dot-product attention over the memory.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::TokenDistribution;
use crate::error::{EcoError, Result};
use crate::kb::{TokenId, Vocabulary, BOS_ID, EOS_ID};
use crate::tape::{Gradients, Tape, Tensor, Var};
use crate::trie::EntityTrie;
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Cap on the encoder input, entity segment included.
    pub max_len: usize,
    pub max_entity_len: usize,
    pub max_response_len: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            max_len: 256,
            max_entity_len: 32,
            max_response_len: 40,
            init_scale: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnCell {
    pub w_in: Tensor,
    pub w_rec: Tensor,
    pub bias: Tensor,
}

impl RnnCell {
    fn init(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        RnnCell {
            w_in: Tensor::uniform(d, d, scale, rng),
            w_rec: Tensor::uniform(d, d, scale, rng),
            bias: Tensor::zeros(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub cell: RnnCell,
    /// Combines `[state; attention context]` into the output vector.
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub vocab_bias: Tensor,
}

impl DecoderParams {
    fn init(d: usize, vocab: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        DecoderParams {
            cell: RnnCell::init(d, scale, rng),
            w_out: Tensor::uniform(2 * d, d, scale, rng),
            b_out: Tensor::zeros(1, d),
            vocab_bias: Tensor::zeros(1, vocab),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub encoder: RnnCell,
    pub entity_decoder: DecoderParams,
    pub response_decoder: DecoderParams,
}

const PARAM_NAMES: [&str; 16] = [
    "embedding",
    "encoder.w_in",
    "encoder.w_rec",
    "encoder.bias",
    "entity.w_in",
    "entity.w_rec",
    "entity.bias",
    "entity.w_out",
    "entity.b_out",
    "entity.vocab_bias",
    "response.w_in",
    "response.w_rec",
    "response.bias",
    "response.w_out",
    "response.b_out",
    "response.vocab_bias",
];

pub fn param_names() -> impl Iterator<Item = &'static str> {
    PARAM_NAMES.into_iter()
}

impl ModelParams {
    /// Uniform(−scale, scale) weights, zero biases.
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let s = config.init_scale;
        ModelParams {
            embedding: Tensor::uniform(vocab_size, d, s, &mut rng),
            encoder: RnnCell::init(d, s, &mut rng),
            entity_decoder: DecoderParams::init(d, vocab_size, s, &mut rng),
            response_decoder: DecoderParams::init(d, vocab_size, s, &mut rng),
            config,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let e = &self.entity_decoder;
        let r = &self.response_decoder;
        vec![
            &self.embedding,
            &self.encoder.w_in,
            &self.encoder.w_rec,
            &self.encoder.bias,
            &e.cell.w_in,
            &e.cell.w_rec,
            &e.cell.bias,
            &e.w_out,
            &e.b_out,
            &e.vocab_bias,
            &r.cell.w_in,
            &r.cell.w_rec,
            &r.cell.bias,
            &r.w_out,
            &r.b_out,
            &r.vocab_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let e = &mut self.entity_decoder;
        let r = &mut self.response_decoder;
        vec![
            &mut self.embedding,
            &mut self.encoder.w_in,
            &mut self.encoder.w_rec,
            &mut self.encoder.bias,
            &mut e.cell.w_in,
            &mut e.cell.w_rec,
            &mut e.cell.bias,
            &mut e.w_out,
            &mut e.b_out,
            &mut e.vocab_bias,
            &mut r.cell.w_in,
            &mut r.cell.w_rec,
            &mut r.cell.bias,
            &mut r.w_out,
            &mut r.b_out,
            &mut r.vocab_bias,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        Bound::from_vars(&vars)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundCell {
    pub w_in: Var,
    pub w_rec: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDecoder {
    pub cell: BoundCell,
    pub w_out: Var,
    pub b_out: Var,
    pub vocab_bias: Var,
}

/// Parameters recorded on a tape. The same encoder handles serve entity
/// generation and response generation.
#[derive(Debug, Clone)]
pub struct Bound {
    pub embedding: Var,
    pub encoder: BoundCell,
    pub entity: BoundDecoder,
    pub response: BoundDecoder,
    frozen_embedding: Option<Var>,
}

impl Bound {
    fn from_vars(v: &[Var]) -> Self {
        let cell = |i: usize| BoundCell {
            w_in: v[i],
            w_rec: v[i + 1],
            bias: v[i + 2],
        };
        let dec = |i: usize| BoundDecoder {
            cell: cell(i),
            w_out: v[i + 3],
            b_out: v[i + 4],
            vocab_bias: v[i + 5],
        };
        Bound {
            embedding: v[0],
            encoder: cell(1),
            entity: dec(4),
            response: dec(10),
            frozen_embedding: None,
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![
            self.embedding,
            self.encoder.w_in,
            self.encoder.w_rec,
            self.encoder.bias,
        ];
        for d in [&self.entity, &self.response] {
            out.extend([
                d.cell.w_in,
                d.cell.w_rec,
                d.cell.bias,
                d.w_out,
                d.b_out,
                d.vocab_bias,
            ]);
        }
        out
    }

    /// `StopGrad(W_e)`, recorded once per tape.
    pub fn frozen_embedding(&mut self, tape: &mut Tape) -> Var {
        *self
            .frozen_embedding
            .get_or_insert_with(|| tape.stop_grad(self.embedding))
    }

    /// Pins the value behind `StopGrad(W_e)` to `value` instead of the live
    /// embedding. Finite-difference checks use this to hold the stopped copy
    /// fixed while `W_e` is perturbed.
    pub fn pin_frozen_embedding(&mut self, tape: &mut Tape, value: Tensor) {
        let c = tape.constant(value);
        self.frozen_embedding = Some(tape.stop_grad(c));
    }

    /// Parameter gradients in [`ModelParams::tensors`] order.
    pub fn gradients(&self, grads: &Gradients, params: &ModelParams) -> Vec<Tensor> {
        self.vars()
            .into_iter()
            .zip(params.tensors())
            .map(|(v, t)| grads.wrt(v, t.shape()))
            .collect()
    }

    fn decoder(&self, kind: DecoderKind) -> BoundDecoder {
        match kind {
            DecoderKind::Entity => self.entity,
            DecoderKind::Response => self.response,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Entity,
    Response,
}

/// Encoder output for one input sequence.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Attention memory, `n × d`: each recurrent state plus its input row.
    pub states: Var,
    pub last: Var,
    pub len: usize,
}

fn to_usize(ids: &[TokenId]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

pub fn embed(tape: &mut Tape, b: &Bound, ids: &[TokenId]) -> Var {
    tape.gather(b.embedding, &to_usize(ids))
}

/// Runs the encoder RNN over already-embedded rows (`n × d`).
pub fn encode_inputs(tape: &mut Tape, b: &Bound, inputs: Var) -> Encoded {
    let n = tape.value(inputs).rows();
    assert!(n > 0, "encoder input is empty");
    let d = tape.value(inputs).cols();
    let projected = tape.matmul(inputs, b.encoder.w_in);
    let mut h = tape.constant(Tensor::zeros(1, d));
    let mut states = Vec::with_capacity(n);
    for t in 0..n {
        let x = tape.row(projected, t);
        let r = tape.matmul(h, b.encoder.w_rec);
        let pre = tape.add(x, r);
        let pre = tape.add(pre, b.encoder.bias);
        h = tape.tanh(pre);
        states.push(h);
    }
    let hidden = tape.concat_rows(&states);
    let memory = tape.add(hidden, inputs);
    Encoded {
        states: memory,
        last: h,
        len: n,
    }
}

pub fn encode(tape: &mut Tape, b: &Bound, ids: &[TokenId]) -> Encoded {
    let x = embed(tape, b, ids);
    encode_inputs(tape, b, x)
}

/// What follows `[C_t; U_t]` in the encoder input.
#[derive(Debug, Clone, Copy)]
pub enum EntityInput<'a> {
    /// Gold or generated entity tokens, embedded through `W_e`.
    Tokens(&'a [TokenId]),
    /// LogitConcat vectors (`m × d`), appended after the embedded source.
    Repr(Var),
}

pub fn encode_with_entity(
    tape: &mut Tape,
    b: &Bound,
    source: &[TokenId],
    entity: EntityInput<'_>,
) -> Encoded {
    match entity {
        EntityInput::Tokens(ids) => {
            let mut all = Vec::with_capacity(source.len() + ids.len());
            all.extend_from_slice(source);
            all.extend_from_slice(ids);
            encode(tape, b, &all)
        }
        EntityInput::Repr(repr) => {
            let src = embed(tape, b, source);
            let x = tape.concat_rows(&[src, repr]);
            encode_inputs(tape, b, x)
        }
    }
}

/// One decoder step. Returns the new recurrent state and the output vector.
fn decoder_step(
    tape: &mut Tape,
    dec: BoundDecoder,
    enc: &Encoded,
    prev: Var,
    projected_input: Var,
) -> (Var, Var) {
    let d = tape.value(prev).cols();
    let r = tape.matmul(prev, dec.cell.w_rec);
    let pre = tape.add(projected_input, r);
    let pre = tape.add(pre, dec.cell.bias);
    let state = tape.tanh(pre);
    let scores = tape.matmul_bt(state, enc.states);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax(scores);
    let context = tape.matmul(attn, enc.states);
    let joined = tape.concat_cols(state, context);
    let o = tape.matmul(joined, dec.w_out);
    let o = tape.add(o, dec.b_out);
    (state, tape.tanh(o))
}

/// `outputs · W_eᵀ + b` for stacked output vectors.
fn project(tape: &mut Tape, b: &Bound, dec: BoundDecoder, outputs: Var) -> Var {
    let logits = tape.matmul_bt(outputs, b.embedding);
    tape.add_row(logits, dec.vocab_bias)
}

/// Teacher-forced logits: step `k` reads target `k − 1` (BOS first).
pub fn teacher_forced_logits(
    tape: &mut Tape,
    b: &Bound,
    kind: DecoderKind,
    enc: &Encoded,
    targets: &[TokenId],
) -> Var {
    let dec = b.decoder(kind);
    let mut inputs = Vec::with_capacity(targets.len());
    inputs.push(BOS_ID);
    inputs.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
    let x = embed(tape, b, &inputs);
    let projected = tape.matmul(x, dec.cell.w_in);
    let mut state = enc.last;
    let mut outs = Vec::with_capacity(targets.len());
    for k in 0..targets.len() {
        let xk = tape.row(projected, k);
        let (s, o) = decoder_step(tape, dec, enc, state, xk);
        state = s;
        outs.push(o);
    }
    let stacked = tape.concat_rows(&outs);
    project(tape, b, dec, stacked)
}

/// Incremental decoder used for free-running generation.
pub struct StepDecoder<'e> {
    kind: DecoderKind,
    enc: &'e Encoded,
    state: Var,
}

impl<'e> StepDecoder<'e> {
    pub fn new(kind: DecoderKind, enc: &'e Encoded) -> Self {
        StepDecoder {
            kind,
            enc,
            state: enc.last,
        }
    }

    /// Feeds `prev` and returns the `1 × V` logits of the next token.
    pub fn step(&mut self, tape: &mut Tape, b: &Bound, prev: TokenId) -> Var {
        let dec = b.decoder(self.kind);
        let x = embed(tape, b, &[prev]);
        let x = tape.matmul(x, dec.cell.w_in);
        let (s, o) = decoder_step(tape, dec, self.enc, self.state, x);
        self.state = s;
        project(tape, b, dec, o)
    }
}

/// `ĥ_k = P_k · StopGrad(W_e)` for each step distribution, stacked `m × d`.
pub fn logit_concat(tape: &mut Tape, b: &mut Bound, dists: &[Var], stop_grad: bool) -> Var {
    let table = if stop_grad {
        b.frozen_embedding(tape)
    } else {
        b.embedding
    };
    let stacked = tape.concat_rows(dists);
    tape.matmul(stacked, table)
}

/// Value-level LogitConcat for inspection and tests.
pub fn entity_repr(dists: &[TokenDistribution], embedding: &Tensor) -> Tensor {
    let d = embedding.cols();
    let mut out = Tensor::zeros(dists.len(), d);
    for (k, dist) in dists.iter().enumerate() {
        for (v, &p) in dist.probs().iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for c in 0..d {
                out.data_mut()[k * d + c] += p * embedding.get(v, c);
            }
        }
    }
    out
}

/// A free-running entity decode recorded on the tape.
#[derive(Debug, Clone)]
pub struct SoftEntity {
    pub tokens: Vec<TokenId>,
    /// Per-step distributions (`1 × V`), trie-renormalized when a trie was given.
    pub dists: Vec<Var>,
}

/// Decodes an entity step by step. `choose` picks the next token from the
/// (possibly constrained) distribution.
pub fn decode_entity<F>(
    tape: &mut Tape,
    b: &Bound,
    enc: &Encoded,
    trie: Option<&EntityTrie>,
    max_len: usize,
    mut choose: F,
) -> Result<SoftEntity>
where
    F: FnMut(&[f64], Option<&crate::trie::AllowedSet>) -> TokenId,
{
    let mut dec = StepDecoder::new(DecoderKind::Entity, enc);
    let mut node = 0usize;
    let mut prev = BOS_ID;
    let mut tokens = Vec::new();
    let mut dists = Vec::new();
    while tokens.len() < max_len {
        let logits = dec.step(tape, b, prev);
        let probs = tape.softmax(logits);
        let (dist, allowed) = match trie {
            Some(t) => {
                let allowed = t.children(node);
                (tape.constrain(probs, &allowed)?, Some(allowed))
            }
            None => (probs, None),
        };
        let tok = choose(tape.value(dist).row(0), allowed.as_ref());
        tokens.push(tok);
        dists.push(dist);
        if let Some(t) = trie {
            node = t.step(node, tok).ok_or_else(|| {
                EcoError::Contract(format!("sampled token {tok} is not a trie child"))
            })?;
        }
        if tok == EOS_ID {
            break;
        }
        prev = tok;
    }
    Ok(SoftEntity { tokens, dists })
}

/// Greedy choice; ties go to the lowest id.
pub fn greedy(probs: &[f64], _allowed: Option<&crate::trie::AllowedSet>) -> TokenId {
    crate::distribution::argmax(probs) as TokenId
}

/// `[BOS] + [C_t; U_t]`, truncated from the oldest side so that the
/// entity segment of `reserve` tokens still fits within `max_len`.
pub fn source_ids(
    vocab: &Vocabulary,
    context: &[String],
    utterance: &[String],
    max_len: usize,
    reserve: usize,
) -> Vec<TokenId> {
    let budget = max_len.saturating_sub(reserve + 1).max(1);
    let total = context.len() + utterance.len();
    let skip = total.saturating_sub(budget);
    if skip > 0 {
        log::warn!("encoder input of {total} tokens truncated by {skip} from the left");
    }
    let mut ids = Vec::with_capacity(total - skip + 1);
    ids.push(BOS_ID);
    ids.extend(
        context
            .iter()
            .chain(utterance.iter())
            .skip(skip)
            .map(|t| vocab.id(t).unwrap_or(crate::kb::UNK_ID)),
    );
    ids
}

/// One training turn, already mapped to token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnExample {
    pub source: Vec<TokenId>,
    /// Linearized gold entity (EOS included), for labeled turns only.
    pub entity: Option<Vec<TokenId>>,
    /// Gold response followed by EOS.
    pub response: Vec<TokenId>,
    /// Index of the domain trie, `None` for domains without a KB.
    pub trie: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    /// Feed LogitConcat vectors for unlabeled turns; otherwise the greedy
    /// entity tokens are fed as constants.
    pub logit_concat: bool,
    pub stop_grad: bool,
    /// Constrain entity decoding of unlabeled turns with the trie.
    pub use_trie: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            logit_concat: true,
            stop_grad: true,
            use_trie: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TurnLoss {
    pub entity: Option<Var>,
    pub response: Var,
}

/// Entity and response losses of one turn. Labeled turns condition the
/// response on the gold entity; unlabeled turns decode an entity greedily
/// and, with LogitConcat, feed its distributions to the encoder.
pub fn turn_loss(
    tape: &mut Tape,
    b: &mut Bound,
    ex: &TurnExample,
    tries: &[EntityTrie],
    flags: LossFlags,
    max_entity_len: usize,
) -> Result<TurnLoss> {
    let response_targets = to_usize(&ex.response);
    match (&ex.entity, ex.trie) {
        (Some(gold), _) => {
            let g = encode(tape, b, &ex.source);
            let logits = teacher_forced_logits(tape, b, DecoderKind::Entity, &g, gold);
            let entity = tape.cross_entropy(logits, &to_usize(gold));
            let h = encode_with_entity(tape, b, &ex.source, EntityInput::Tokens(gold));
            let logits = teacher_forced_logits(tape, b, DecoderKind::Response, &h, &ex.response);
            let response = tape.cross_entropy(logits, &response_targets);
            Ok(TurnLoss {
                entity: Some(entity),
                response,
            })
        }
        (None, Some(trie_index)) => {
            let trie = flags.use_trie.then(|| &tries[trie_index]);
            let g = encode(tape, b, &ex.source);
            let soft = decode_entity(tape, b, &g, trie, max_entity_len, greedy)?;
            let h = if flags.logit_concat {
                let repr = logit_concat(tape, b, &soft.dists, flags.stop_grad);
                encode_with_entity(tape, b, &ex.source, EntityInput::Repr(repr))
            } else {
                encode_with_entity(tape, b, &ex.source, EntityInput::Tokens(&soft.tokens))
            };
            let logits = teacher_forced_logits(tape, b, DecoderKind::Response, &h, &ex.response);
            Ok(TurnLoss {
                entity: None,
                response: tape.cross_entropy(logits, &response_targets),
            })
        }
        (None, None) => {
            let h = encode(tape, b, &ex.source);
            let logits = teacher_forced_logits(tape, b, DecoderKind::Response, &h, &ex.response);
            Ok(TurnLoss {
                entity: None,
                response: tape.cross_entropy(logits, &response_targets),
            })
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    /// `(Σ L_en + Σ L_re) / turns`
    pub total: Var,
    pub entity_sum: f64,
    pub response_sum: f64,
    pub turns: usize,
    pub labeled: usize,
}

pub fn joint_loss(
    tape: &mut Tape,
    b: &mut Bound,
    batch: &[TurnExample],
    tries: &[EntityTrie],
    flags: LossFlags,
    max_entity_len: usize,
) -> Result<JointLoss> {
    if batch.is_empty() {
        return Err(EcoError::Contract("empty batch".into()));
    }
    let mut terms = Vec::with_capacity(2 * batch.len());
    let mut entity_sum = 0.0;
    let mut response_sum = 0.0;
    let mut labeled = 0;
    for ex in batch {
        let l = turn_loss(tape, b, ex, tries, flags, max_entity_len)?;
        if let Some(e) = l.entity {
            entity_sum += tape.value(e).item();
            labeled += 1;
            terms.push(e);
        }
        response_sum += tape.value(l.response).item();
        terms.push(l.response);
    }
    let sum = tape.sum(&terms);
    let total = tape.scale(sum, 1.0 / batch.len() as f64);
    Ok(JointLoss {
        total,
        entity_sum,
        response_sum,
        turns: batch.len(),
        labeled,
    })
}

impl ModelParams {
    /// Unconstrained distribution of the next entity token after `prefix`.
    pub fn entity_step_distribution(
        &self,
        source: &[TokenId],
        prefix: &[TokenId],
    ) -> TokenDistribution {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let g = encode(&mut tape, &b, source);
        let mut dec = StepDecoder::new(DecoderKind::Entity, &g);
        let mut logits = dec.step(&mut tape, &b, BOS_ID);
        for &tok in prefix {
            logits = dec.step(&mut tape, &b, tok);
        }
        TokenDistribution::from_logits(tape.value(logits).row(0))
    }

    /// Encoder states for `ids` as a plain matrix.
    pub fn encode_values(&self, ids: &[TokenId]) -> Tensor {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let enc = encode(&mut tape, &b, ids);
        tape.value(enc.states).clone()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Serialized parameters plus everything needed to decode with them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub vocab: Vec<String>,
    pub vocab_reserved: usize,
    /// Fingerprints of the KBs the model was trained against.
    pub kb_fingerprints: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(
        params: &ModelParams,
        vocab: &Vocabulary,
        kb_fingerprints: Vec<String>,
        seed: u64,
        epoch: usize,
    ) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            config: params.config.clone(),
            seed,
            epoch,
            vocab: vocab.tokens().to_vec(),
            vocab_reserved: vocab.reserved(),
            kb_fingerprints,
            tensors: param_names()
                .zip(params.tensors())
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        let vocab_size = self.vocab.len();
        let mut params = ModelParams::init(self.config.clone(), vocab_size, 0);
        if self.tensors.len() != params.tensors().len() {
            return Err(EcoError::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.tensors().len(),
                self.tensors.len()
            )));
        }
        for ((slot, stored), name) in params
            .tensors_mut()
            .into_iter()
            .zip(&self.tensors)
            .zip(param_names())
        {
            if stored.name != name || (stored.rows, stored.cols) != slot.shape() {
                return Err(EcoError::Checkpoint(format!(
                    "tensor {} ({}×{}) does not fit {name} {:?}",
                    stored.name,
                    stored.rows,
                    stored.cols,
                    slot.shape()
                )));
            }
            *slot = Tensor::from_vec(stored.rows, stored.cols, stored.data.clone());
        }
        Ok(params)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(self.vocab.clone(), self.vocab_reserved)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| EcoError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| EcoError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| EcoError::json(path, e))?;
        if ck.version != FORMAT_VERSION {
            return Err(EcoError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize, seed: u64) -> ModelParams {
        let config = ModelConfig {
            d_model: 6,
            max_len: 32,
            max_entity_len: 8,
            max_response_len: 8,
            init_scale: 0.5,
        };
        ModelParams::init(config, vocab, seed)
    }

    #[test]
    fn encode_shape_and_determinism() {
        let p = tiny(12, 1);
        let ids = [BOS_ID, 5, 6, 7];
        let a = p.encode_values(&ids);
        assert_eq!(a.shape(), (4, 6));
        assert_eq!(a, p.encode_values(&ids));
    }

    #[test]
    fn zero_output_layer_gives_uniform() {
        let mut p = tiny(10, 2);
        for t in [
            &mut p.entity_decoder.w_out,
            &mut p.entity_decoder.b_out,
            &mut p.entity_decoder.vocab_bias,
        ] {
            t.data_mut().fill(0.0);
        }
        let d = p.entity_step_distribution(&[BOS_ID, 4, 5], &[6]);
        assert!(d.probs().iter().all(|&x| (x - 0.1).abs() < 1e-15));
    }

    #[test]
    fn step_distribution_is_valid() {
        let p = tiny(10, 3);
        let d = p.entity_step_distribution(&[BOS_ID, 4, 5], &[6, 7]);
        assert!(d.probs().iter().all(|&x| x > 0.0));
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_hot_repr_selects_embedding_rows() {
        let p = tiny(10, 4);
        let dists = [TokenDistribution::one_hot(10, 3)];
        let h = entity_repr(&dists, &p.embedding);
        assert_eq!(h.row(0), p.embedding.row(3));

        let mut probs = vec![0.0; 10];
        probs[1] = 0.5;
        probs[7] = 0.5;
        let h = entity_repr(&[TokenDistribution::new(probs).unwrap()], &p.embedding);
        for c in 0..6 {
            let mean = 0.5 * (p.embedding.get(1, c) + p.embedding.get(7, c));
            assert!((h.get(0, c) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_repr_matches_token_encoding() {
        let p = tiny(10, 5);
        let source = [BOS_ID, 4, 5];
        let entity = [6, 8, EOS_ID];

        let mut tape = Tape::new();
        let mut b = p.bind(&mut tape);
        let by_tokens = encode_with_entity(&mut tape, &b, &source, EntityInput::Tokens(&entity));
        let dists: Vec<Var> = entity
            .iter()
            .map(|&t| {
                let d = TokenDistribution::one_hot(10, t);
                tape.constant(Tensor::row_vector(d.into_probs()))
            })
            .collect();
        let repr = logit_concat(&mut tape, &mut b, &dists, true);
        let by_repr = encode_with_entity(&mut tape, &b, &source, EntityInput::Repr(repr));
        assert_eq!(tape.value(by_tokens.states), tape.value(by_repr.states));

        let plain = encode(&mut tape, &b, &source);
        let empty = encode_with_entity(&mut tape, &b, &source, EntityInput::Tokens(&[]));
        assert_eq!(tape.value(plain.states), tape.value(empty.states));
    }

    #[test]
    fn source_is_left_truncated() {
        let kb = crate::kb::KnowledgeBase::from_records(
            "x",
            &["name"],
            &[[("name".to_string(), "a".to_string())]
                .into_iter()
                .collect()],
        )
        .unwrap();
        let words: Vec<String> = ["w1", "w2", "w3", "w4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let vocab = Vocabulary::build(&[&kb], words.iter().map(String::as_str));
        let ids = source_ids(&vocab, &words[..2], &words[2..], 5, 1);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], BOS_ID);
        assert_eq!(vocab.decode(&ids[1..]), ["w2", "w3", "w4"]);
        let ids = source_ids(&vocab, &[], &words[2..], 256, 8);
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let kb = crate::kb::KnowledgeBase::from_records(
            "x",
            &["name"],
            &[[("name".to_string(), "a".to_string())]
                .into_iter()
                .collect()],
        )
        .unwrap();
        let vocab = Vocabulary::build(&[&kb], ["b", "c"]);
        let p = ModelParams::init(
            ModelConfig {
                d_model: 4,
                ..Default::default()
            },
            vocab.len(),
            9,
        );
        let ck = Checkpoint::new(&p, &vocab, vec![kb.fingerprint()], 9, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params().unwrap(), p);
        assert_eq!(back.vocabulary().unwrap(), vocab);
    }
}
