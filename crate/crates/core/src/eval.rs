//! BLEU, Inform, Success, Score, F1 and Consistency.
//!
//! Rates are reported on a 0 to 100 scale, like BLEU, so that
//! `score = bleu + (inform + success) / 2` holds on the reported numbers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::Dialog;
use crate::corpus::Domains;
use crate::error::{EcoError, Result};
use crate::kb::{goal_matches, is_none_value, KnowledgeBase, UserGoal, EOS, NAME_ATTRIBUTE};
use crate::FORMAT_VERSION;

/// `(attribute, value tokens)` pairs found in a text.
pub type Extracted = BTreeSet<(String, Vec<String>)>;

/// Longest-first, then leftmost, non-overlapping lexicon matcher.
#[derive(Debug, Clone)]
pub struct Extractor {
    /// Value tokens to the attribute with the lowest schema index that
    /// takes this value.
    values: HashMap<Vec<String>, String>,
    longest: usize,
}

impl Extractor {
    pub fn new(kb: &KnowledgeBase) -> Self {
        let mut values: HashMap<Vec<String>, String> = HashMap::new();
        let rank = |a: &str| kb.schema().index_of(a).unwrap_or(usize::MAX);
        for (attr, value) in kb.value_lexicon() {
            if is_none_value(value) {
                continue;
            }
            match values.get(value) {
                Some(existing) if rank(existing) <= rank(attr) => {}
                _ => {
                    values.insert(value.clone(), attr.clone());
                }
            }
        }
        let longest = values.keys().map(Vec::len).max().unwrap_or(0);
        Extractor { values, longest }
    }

    pub fn extract(&self, tokens: &[String]) -> Extracted {
        let mut found = Vec::new();
        for len in (1..=self.longest.min(tokens.len())).rev() {
            for start in 0..=tokens.len() - len {
                if let Some(attr) = self.values.get(&tokens[start..start + len]) {
                    found.push((start, len, attr));
                }
            }
        }
        // `found` is already ordered longest first, then leftmost.
        let mut taken = vec![false; tokens.len()];
        let mut out = Extracted::new();
        for (start, len, attr) in found {
            if taken[start..start + len].iter().any(|&t| t) {
                continue;
            }
            taken[start..start + len].fill(true);
            out.insert((attr.clone(), tokens[start..start + len].to_vec()));
        }
        out
    }
}

pub fn extract_info(tokens: &[String], kb: &KnowledgeBase) -> Extracted {
    Extractor::new(kb).extract(tokens)
}

/// What a turn with nothing extracted counts as.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyTurns {
    #[default]
    Consistent,
    Excluded,
}

/// Definition by scan: some entity carries every extracted pair.
pub fn is_consistent(info: &Extracted, kb: &KnowledgeBase) -> bool {
    kb.entities().iter().any(|e| {
        info.iter()
            .all(|(attr, value)| e.value(attr) == Some(value.as_slice()))
    })
}

/// Hash-indexed equivalent of [`is_consistent`].
#[derive(Debug, Clone)]
pub struct ConsistencyIndex {
    postings: HashMap<(String, Vec<String>), Vec<usize>>,
    entities: usize,
}

impl ConsistencyIndex {
    pub fn new(kb: &KnowledgeBase) -> Self {
        let mut postings: HashMap<(String, Vec<String>), Vec<usize>> = HashMap::new();
        for (i, e) in kb.entities().iter().enumerate() {
            for (attr, value) in e.values() {
                postings
                    .entry((attr.to_string(), value.to_vec()))
                    .or_default()
                    .push(i);
            }
        }
        ConsistencyIndex {
            postings,
            entities: kb.len(),
        }
    }

    pub fn is_consistent(&self, info: &Extracted) -> bool {
        if info.is_empty() {
            return self.entities > 0;
        }
        let mut lists: Vec<&Vec<usize>> = Vec::with_capacity(info.len());
        for pair in info {
            match self.postings.get(pair) {
                Some(l) => lists.push(l),
                None => return false,
            }
        }
        lists.sort_by_key(|l| l.len());
        lists[0]
            .iter()
            .any(|i| lists[1..].iter().all(|l| l.binary_search(i).is_ok()))
    }
}

/// Mean turn consistency over `(user, response)` pairs, in [0, 1].
/// Returns `None` when every turn was excluded.
pub fn consistency(
    turns: &[(Vec<String>, Vec<String>)],
    kb: &KnowledgeBase,
    empty: EmptyTurns,
) -> Option<f64> {
    let extractor = Extractor::new(kb);
    let index = ConsistencyIndex::new(kb);
    let mut total = 0.0;
    let mut counted = 0usize;
    for (user, response) in turns {
        let mut info = extractor.extract(user);
        info.extend(extractor.extract(response));
        if info.is_empty() {
            if empty == EmptyTurns::Excluded {
                continue;
            }
            total += 1.0;
        } else if index.is_consistent(&info) {
            total += 1.0;
        }
        counted += 1;
    }
    (counted > 0).then(|| total / counted as f64)
}

/// Micro-averaged F1 over turn-level extracted pairs, in [0, 1]. Two sides
/// with no pairs at all agree perfectly and score 1.
pub fn f1(
    predictions: &[Vec<String>],
    references: &[Vec<String>],
    kb: &KnowledgeBase,
) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(EcoError::LengthMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    let extractor = Extractor::new(kb);
    let (mut tp, mut np, mut nr) = (0usize, 0usize, 0usize);
    for (p, r) in predictions.iter().zip(references) {
        let p = extractor.extract(p);
        let r = extractor.extract(r);
        tp += p.intersection(&r).count();
        np += p.len();
        nr += r.len();
    }
    Ok(f1_from_counts(tp, np, nr))
}

fn f1_from_counts(tp: usize, np: usize, nr: usize) -> f64 {
    if np == 0 && nr == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / np as f64;
    let r = tp as f64 / nr as f64;
    2.0 * p * r / (p + r)
}

/// Dialog-level `(inform, success)`.
///
/// Inform: some response names (by `name` value) an entity that satisfies
/// every goal constraint. Success: inform holds and, for one such named
/// entity, every requested attribute value appears in the responses.
/// Requested values recorded as `none` count as provided.
pub fn inform_success(
    responses: &[Vec<String>],
    goal: &UserGoal,
    kb: &KnowledgeBase,
) -> (bool, bool) {
    let extractor = Extractor::new(kb);
    let mut said = Extracted::new();
    for r in responses {
        said.extend(extractor.extract(r));
    }
    let offered: Vec<_> = kb
        .entities()
        .iter()
        .filter(|e| {
            e.value(NAME_ATTRIBUTE)
                .is_some_and(|n| said.contains(&(NAME_ATTRIBUTE.to_string(), n.to_vec())))
        })
        .filter(|e| goal_matches(e, goal))
        .collect();
    let inform = !offered.is_empty();
    let success = offered.iter().any(|e| {
        goal.requests.iter().all(|attr| match e.value(attr) {
            Some(v) if !is_none_value(v) => said.contains(&(attr.clone(), v.to_vec())),
            _ => true,
        })
    });
    (inform, inform && success)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 on a 0 to 100 scale, with add-one smoothing on orders 2
/// to 4 and the usual brevity penalty.
pub fn bleu(predictions: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(EcoError::LengthMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EcoError::EmptyCorpus);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (p, rf) in predictions.iter().zip(references) {
        c += p.len();
        r += rf.len();
        for n in 1..=4 {
            let pc = ngram_counts(p, n);
            let rc = ngram_counts(rf, n);
            for (g, k) in &pc {
                matched[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = (matched[0] as f64 / total[0] as f64).ln();
    for n in 1..4 {
        log_sum += ((matched[n] + 1) as f64 / (total[n] + 1) as f64).ln();
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

/// `bleu + (inform + success) / 2`, all on the 0 to 100 scale.
pub fn score(bleu: f64, inform: f64, success: f64) -> f64 {
    bleu + (inform + success) / 2.0
}

/// One predicted turn, as written to the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub dialog_id: String,
    pub turn: usize,
    pub generated_entity: String,
    pub generated_response: String,
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    version: u32,
    #[serde(flatten)]
    prediction: TurnPrediction,
}

pub fn save_predictions(path: impl AsRef<Path>, preds: &[TurnPrediction]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| EcoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        let line = PredictionLine {
            version: FORMAT_VERSION,
            prediction: p.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| EcoError::io(path, e))?;
    }
    w.flush().map_err(|e| EcoError::io(path, e))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<TurnPrediction>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| EcoError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| EcoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: PredictionLine = serde_json::from_str(&line).map_err(|e| EcoError::json(path, e))?;
        out.push(l.prediction);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dialogs: usize,
    pub turns: usize,
    pub bleu: f64,
    pub inform: f64,
    pub success: f64,
    pub score: f64,
    pub f1: f64,
    pub consistency: f64,
    /// Share of generated entities that are KB linearizations.
    pub entity_validity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub overall: MetricsReport,
    pub per_domain: BTreeMap<String, MetricsReport>,
    pub single_count: usize,
    pub multi_count: usize,
    pub single: Option<MetricsReport>,
    pub multi: Option<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchBucket {
    /// No entity matches the goal.
    None,
    Single,
    Multi,
}

pub fn match_bucket(goal: &UserGoal, kb: &KnowledgeBase) -> MatchBucket {
    match kb.matching_entities(goal).len() {
        0 => MatchBucket::None,
        1 => MatchBucket::Single,
        _ => MatchBucket::Multi,
    }
}

/// Indices of dialogs whose goal matches exactly one entity, and of those
/// matching more than one.
pub fn matched_entity_split(goals: &[&UserGoal], kb: &KnowledgeBase) -> (Vec<usize>, Vec<usize>) {
    let mut single = Vec::new();
    let mut multi = Vec::new();
    for (i, g) in goals.iter().enumerate() {
        match match_bucket(g, kb) {
            MatchBucket::Single => single.push(i),
            MatchBucket::Multi => multi.push(i),
            MatchBucket::None => {}
        }
    }
    (single, multi)
}

struct Scored<'a> {
    dialog: &'a Dialog,
    goal: &'a UserGoal,
    preds: Vec<&'a TurnPrediction>,
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn metrics(items: &[&Scored<'_>], domains: &Domains, empty: EmptyTurns) -> Result<MetricsReport> {
    let mut preds = Vec::new();
    let mut refs = Vec::new();
    let (mut tp, mut np, mut nr) = (0usize, 0usize, 0usize);
    let (mut inform, mut success) = (0usize, 0usize);
    let (mut cons_sum, mut cons_n) = (0.0, 0usize);
    let (mut valid, mut generated) = (0usize, 0usize);
    let mut extractors: HashMap<&str, (Extractor, ConsistencyIndex, BTreeSet<Vec<String>>)> =
        HashMap::new();

    for item in items {
        let kb = domains.kb(&item.dialog.domain);
        let tools = kb.map(|kb| {
            &*extractors.entry(kb.domain()).or_insert_with(|| {
                let lins = (0..kb.len()).filter_map(|i| kb.linearize(i).ok()).collect();
                (Extractor::new(kb), ConsistencyIndex::new(kb), lins)
            })
        });
        let mut responses = Vec::with_capacity(item.preds.len());
        for (turn, pred) in item.dialog.turns.iter().zip(&item.preds) {
            let response = words(&pred.generated_response);
            preds.push(response.clone());
            refs.push(turn.response.clone());
            if let Some((ex, index, lins)) = tools {
                let p = ex.extract(&response);
                let r = ex.extract(&turn.response);
                tp += p.intersection(&r).count();
                np += p.len();
                nr += r.len();
                let mut info = ex.extract(&turn.user);
                info.extend(p);
                if info.is_empty() {
                    if empty == EmptyTurns::Consistent {
                        cons_sum += 1.0;
                        cons_n += 1;
                    }
                } else {
                    cons_sum += if index.is_consistent(&info) { 1.0 } else { 0.0 };
                    cons_n += 1;
                }
                let entity = words(&pred.generated_entity);
                if !entity.is_empty() {
                    generated += 1;
                    if lins.contains(&entity) {
                        valid += 1;
                    }
                }
            }
            responses.push(response);
        }
        if let Some(kb) = kb {
            let (i, s) = inform_success(&responses, item.goal, kb);
            inform += i as usize;
            success += s as usize;
        }
    }
    let n = items.len().max(1) as f64;
    let b = bleu(&preds, &refs)?;
    let inform = 100.0 * inform as f64 / n;
    let success = 100.0 * success as f64 / n;
    Ok(MetricsReport {
        dialogs: items.len(),
        turns: preds.len(),
        bleu: b,
        inform,
        success,
        score: score(b, inform, success),
        f1: 100.0 * f1_from_counts(tp, np, nr),
        consistency: if cons_n == 0 {
            100.0
        } else {
            100.0 * cons_sum / cons_n as f64
        },
        entity_validity: (generated > 0).then(|| 100.0 * valid as f64 / generated as f64),
    })
}

/// Scores predictions against reference dialogs. Goals come from `goals`
/// when given (keyed by dialog id), otherwise from each dialog.
pub fn evaluate(
    predictions: &[TurnPrediction],
    references: &[Dialog],
    domains: &Domains,
    goals: Option<&BTreeMap<String, UserGoal>>,
    empty: EmptyTurns,
) -> Result<EvalReport> {
    if references.is_empty() {
        return Err(EcoError::EmptyCorpus);
    }
    let mut by_key: HashMap<(&str, usize), &TurnPrediction> = HashMap::new();
    for p in predictions {
        by_key.insert((p.dialog_id.as_str(), p.turn), p);
    }
    let mut items = Vec::with_capacity(references.len());
    for d in references {
        let preds = (0..d.turns.len())
            .map(|t| {
                by_key
                    .get(&(d.id.as_str(), t))
                    .copied()
                    .ok_or_else(|| EcoError::LengthMismatch {
                        predictions: predictions.len(),
                        references: references.iter().map(|d| d.turns.len()).sum(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let goal = goals.and_then(|g| g.get(&d.id)).unwrap_or(&d.goal);
        items.push(Scored {
            dialog: d,
            goal,
            preds,
        });
    }

    let all: Vec<&Scored> = items.iter().collect();
    let overall = metrics(&all, domains, empty)?;

    let mut per_domain = BTreeMap::new();
    let names: BTreeSet<&str> = items.iter().map(|i| i.dialog.domain.as_str()).collect();
    for name in names {
        let subset: Vec<&Scored> = items.iter().filter(|i| i.dialog.domain == name).collect();
        per_domain.insert(name.to_string(), metrics(&subset, domains, empty)?);
    }

    let bucket = |i: &Scored| {
        domains
            .kb(&i.dialog.domain)
            .map_or(MatchBucket::None, |kb| match_bucket(i.goal, kb))
    };
    let single: Vec<&Scored> = items
        .iter()
        .filter(|i| bucket(i) == MatchBucket::Single)
        .collect();
    let multi: Vec<&Scored> = items
        .iter()
        .filter(|i| bucket(i) == MatchBucket::Multi)
        .collect();
    Ok(EvalReport {
        version: FORMAT_VERSION,
        overall,
        per_domain,
        single_count: single.len(),
        multi_count: multi.len(),
        single: (!single.is_empty())
            .then(|| metrics(&single, domains, empty))
            .transpose()?,
        multi: (!multi.is_empty())
            .then(|| metrics(&multi, domains, empty))
            .transpose()?,
    })
}

/// Strips a trailing EOS token from a rendered entity.
pub fn entity_words(entity: &[String]) -> &[String] {
    match entity.last() {
        Some(t) if t == EOS => &entity[..entity.len() - 1],
        _ => entity,
    }
}
