//! Dialog corpus types, template extraction (DELEX) and entity insertion
//! (RELEX).
//!
//! A template is a dialog whose annotated value spans were collapsed into
//! attribute placeholders. Relexicalizing a template with one KB entity
//! fills every placeholder from that entity, so the synthesized dialog is
//! entity-consistent by construction and carries the entity as its label.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EcoError, Result};
use crate::kb::{is_none_value, Entity, KnowledgeBase, UserGoal};
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Response,
}

/// Token range `[start, end)` on one side of a turn holding a value of
/// `attribute`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub side: Side,
    pub start: usize,
    pub end: usize,
    pub attribute: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTurn {
    #[serde(with = "words")]
    pub user: Vec<String>,
    #[serde(with = "words")]
    pub response: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spans: Vec<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_entity: Option<usize>,
}

impl DialogTurn {
    pub fn new(user: &str, response: &str) -> Self {
        DialogTurn {
            user: crate::kb::normalize(user),
            response: crate::kb::normalize(response),
            spans: Vec::new(),
            gold_entity: None,
        }
    }

    pub fn side(&self, side: Side) -> &[String] {
        match side {
            Side::User => &self.user,
            Side::Response => &self.response,
        }
    }

    /// Tokens covered by `span`.
    pub fn span_tokens(&self, span: &Span) -> &[String] {
        &self.side(span.side)[span.start..span.end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub domain: String,
    #[serde(default)]
    pub goal: UserGoal,
    pub turns: Vec<DialogTurn>,
}

impl Dialog {
    /// `C_t`: user and response tokens of every turn before `t`.
    pub fn context(&self, t: usize) -> Vec<String> {
        self.turns[..t]
            .iter()
            .flat_map(|turn| turn.user.iter().chain(turn.response.iter()).cloned())
            .collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.turns.iter().any(|t| t.gold_entity.is_some())
    }

    pub fn without_labels(&self) -> Dialog {
        let mut d = self.clone();
        for t in &mut d.turns {
            t.gold_entity = None;
        }
        d
    }

    /// Checks span ranges, overlaps and attributes against `kb`'s schema.
    pub fn validate(&self, kb: &KnowledgeBase) -> Result<()> {
        let err = |reason: String| EcoError::Annotation {
            dialog: self.id.clone(),
            reason,
        };
        if self.turns.is_empty() {
            return Err(err("dialog has no turns".into()));
        }
        for (t, turn) in self.turns.iter().enumerate() {
            let mut spans = turn.spans.clone();
            spans.sort();
            for (i, s) in spans.iter().enumerate() {
                if !kb.schema().contains(&s.attribute) {
                    return Err(err(format!(
                        "turn {t}: span attribute `{}` is not in the schema",
                        s.attribute
                    )));
                }
                if s.start >= s.end || s.end > turn.side(s.side).len() {
                    return Err(err(format!(
                        "turn {t}: span {}..{} is out of range",
                        s.start, s.end
                    )));
                }
                if let Some(prev) = i.checked_sub(1).map(|j| &spans[j]) {
                    if prev.side == s.side && prev.end > s.start {
                        return Err(err(format!("turn {t}: overlapping spans")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every `(attribute, value)` mention across the dialog.
    pub fn mentions(&self) -> BTreeSet<(String, Vec<String>)> {
        self.turns
            .iter()
            .flat_map(|t| {
                t.spans
                    .iter()
                    .map(move |s| (s.attribute.clone(), t.span_tokens(s).to_vec()))
            })
            .collect()
    }
}

/// A delexicalized dialog: each span is a single placeholder token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub domain: String,
    pub goal: UserGoal,
    pub turns: Vec<DialogTurn>,
    pub matched_attributes: BTreeSet<String>,
    /// KB entities that agree with every value the source dialog mentioned.
    pub source_entities: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelexReport {
    pub dialogs: usize,
    pub templates: usize,
    pub skipped_no_spans: Vec<String>,
    pub skipped_no_entity: Vec<String>,
    pub skipped_other_domain: Vec<String>,
}

pub fn delex(dialogs: &[Dialog], kb: &KnowledgeBase) -> Result<Vec<Template>> {
    delex_with_report(dialogs, kb).map(|(t, _)| t)
}

pub fn delex_with_report(
    dialogs: &[Dialog],
    kb: &KnowledgeBase,
) -> Result<(Vec<Template>, DelexReport)> {
    let mut report = DelexReport {
        dialogs: dialogs.len(),
        ..Default::default()
    };
    let mut templates = Vec::new();
    for dialog in dialogs {
        if dialog.domain != kb.domain() {
            report.skipped_other_domain.push(dialog.id.clone());
            continue;
        }
        dialog.validate(kb)?;
        let mentions = dialog.mentions();
        if mentions.is_empty() {
            report.skipped_no_spans.push(dialog.id.clone());
            continue;
        }
        let sources: Vec<usize> = kb
            .entities()
            .iter()
            .filter(|e| {
                mentions
                    .iter()
                    .all(|(a, v)| e.value(a) == Some(v.as_slice()))
            })
            .map(|e| e.id)
            .collect();
        if sources.is_empty() {
            report.skipped_no_entity.push(dialog.id.clone());
            continue;
        }
        let turns = dialog
            .turns
            .iter()
            .map(|turn| delex_turn(turn, kb))
            .collect();
        templates.push(Template {
            id: dialog.id.clone(),
            domain: dialog.domain.clone(),
            goal: dialog.goal.clone(),
            turns,
            matched_attributes: mentions.into_iter().map(|(a, _)| a).collect(),
            source_entities: sources,
        });
    }
    report.templates = templates.len();
    Ok((templates, report))
}

fn delex_turn(turn: &DialogTurn, kb: &KnowledgeBase) -> DialogTurn {
    let mut out = DialogTurn {
        user: Vec::new(),
        response: Vec::new(),
        spans: Vec::new(),
        gold_entity: None,
    };
    for side in [Side::User, Side::Response] {
        let (tokens, spans) = splice(turn, side, |span| {
            let ph =
                kb.schema().placeholders()[kb.schema().index_of(&span.attribute).unwrap()].clone();
            vec![ph]
        });
        *match side {
            Side::User => &mut out.user,
            Side::Response => &mut out.response,
        } = tokens;
        out.spans.extend(spans);
    }
    out
}

/// Rebuilds one side of `turn`, substituting each span by `fill(span)` and
/// returning the re-indexed spans.
fn splice<F>(turn: &DialogTurn, side: Side, mut fill: F) -> (Vec<String>, Vec<Span>)
where
    F: FnMut(&Span) -> Vec<String>,
{
    let source = turn.side(side);
    let mut spans: Vec<&Span> = turn.spans.iter().filter(|s| s.side == side).collect();
    spans.sort_by_key(|s| s.start);
    let mut tokens = Vec::with_capacity(source.len());
    let mut new_spans = Vec::with_capacity(spans.len());
    let mut cursor = 0;
    for span in spans {
        tokens.extend_from_slice(&source[cursor..span.start]);
        let filler = fill(span);
        let start = tokens.len();
        tokens.extend(filler);
        new_spans.push(Span {
            side,
            start,
            end: tokens.len(),
            attribute: span.attribute.clone(),
        });
        cursor = span.end;
    }
    tokens.extend_from_slice(&source[cursor..]);
    (tokens, new_spans)
}

/// Fills every placeholder of `template` from `entity`. Returns `None` when
/// the entity has no value for one of the template's attributes.
pub fn relex(template: &Template, entity: &Entity) -> Option<Dialog> {
    if let Some(a) = template
        .matched_attributes
        .iter()
        .find(|a| !entity.has_value(a))
    {
        log::debug!(
            "template {}: entity {} has no value for `{a}`, skipped",
            template.id,
            entity.id
        );
        return None;
    }
    let mut turns = Vec::with_capacity(template.turns.len());
    for turn in &template.turns {
        let mut out = DialogTurn {
            user: Vec::new(),
            response: Vec::new(),
            spans: Vec::new(),
            gold_entity: None,
        };
        for side in [Side::User, Side::Response] {
            let (tokens, spans) = splice(turn, side, |span| {
                entity.value(&span.attribute).unwrap_or_default().to_vec()
            });
            *match side {
                Side::User => &mut out.user,
                Side::Response => &mut out.response,
            } = tokens;
            out.spans.extend(spans);
        }
        if !out.spans.is_empty() {
            out.gold_entity = Some(entity.id);
        }
        turns.push(out);
    }
    let mut goal = template.goal.clone();
    for (attr, value) in goal.constraints.iter_mut() {
        if let Some(v) = entity.value(attr).filter(|v| !is_none_value(v)) {
            *value = v.join(" ");
        }
    }
    Some(Dialog {
        id: template.id.clone(),
        domain: template.domain.clone(),
        goal,
        turns,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub templates: usize,
    pub generated: usize,
    /// Templates whose goal no KB entity satisfies.
    pub skipped_no_match: Vec<String>,
    /// Relex attempts dropped because the sampled entity lacked a value.
    pub skipped_missing_value: usize,
}

/// Seed of the independent RNG stream number `index`.
pub fn stream_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Relexicalizes each template with up to `p` distinct entities drawn
/// uniformly from those matching the template's goal.
pub fn augment_batch(
    templates: &[Template],
    kb: &KnowledgeBase,
    p: usize,
    seed: u64,
) -> Result<(Vec<Dialog>, AugmentReport)> {
    if p == 0 {
        return Err(EcoError::InvalidConfig(
            "augmentation count p must be ≥ 1".into(),
        ));
    }
    let mut report = AugmentReport {
        templates: templates.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for (i, template) in templates.iter().enumerate() {
        let candidates = kb.matching_entities(&template.goal);
        if candidates.is_empty() {
            report.skipped_no_match.push(template.id.clone());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, i));
        let k = p.min(candidates.len());
        for j in index::sample(&mut rng, candidates.len(), k).into_iter() {
            let entity = &kb.entities()[candidates[j]];
            match relex(template, entity) {
                Some(mut d) => {
                    d.id = format!("{}/au{}-{}", template.id, seed, entity.id);
                    out.push(d);
                }
                None => report.skipped_missing_value += 1,
            }
        }
    }
    report.generated = out.len();
    Ok((out, report))
}

/// `d_tr` (unlabeled), `d_au` (labeled) and their union `d_fn`.
#[derive(Debug, Clone, Default)]
pub struct TrainingSets {
    pub d_tr: Vec<Dialog>,
    pub d_au: Vec<Dialog>,
    pub d_fn: Vec<Dialog>,
}

pub fn build_training_sets(
    d_tr: &[Dialog],
    templates: &[Template],
    kb: &KnowledgeBase,
    p: usize,
    seed: u64,
) -> Result<(TrainingSets, AugmentReport)> {
    let d_tr: Vec<Dialog> = d_tr.iter().map(Dialog::without_labels).collect();
    let (d_au, report) = augment_batch(templates, kb, p, seed)?;
    let d_fn = d_tr.iter().chain(d_au.iter()).cloned().collect();
    Ok((TrainingSets { d_tr, d_au, d_fn }, report))
}

#[derive(Serialize)]
struct Record<'a> {
    version: u32,
    #[serde(flatten)]
    dialog: &'a Dialog,
}

pub fn save_dialogs(path: impl AsRef<Path>, dialogs: &[Dialog]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| EcoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for dialog in dialogs {
        let line = serde_json::to_string(&Record {
            version: FORMAT_VERSION,
            dialog,
        })?;
        writeln!(w, "{line}").map_err(|e| EcoError::io(path, e))?;
    }
    w.flush().map_err(|e| EcoError::io(path, e))
}

pub fn load_dialogs(path: impl AsRef<Path>) -> Result<Vec<Dialog>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| EcoError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| EcoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EcoError::json(path, e))?);
    }
    Ok(out)
}

mod words {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(tokens: &[String], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&tokens.join(" "))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
        let text = String::deserialize(d)?;
        Ok(crate::kb::normalize(&text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn kb() -> KnowledgeBase {
        let rec = |n: &str, a: &str, f: &str| -> BTreeMap<String, String> {
            [("name", n), ("area", a), ("food", f)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        };
        KnowledgeBase::from_records(
            "restaurant",
            &["name", "area", "food"],
            &[
                rec("gourmet kitchen", "north", "north american"),
                rec("pizza palace", "north", "italian"),
                rec("curry garden", "centre", "indian"),
            ],
        )
        .unwrap()
    }

    fn span(side: Side, start: usize, end: usize, attribute: &str) -> Span {
        Span {
            side,
            start,
            end,
            attribute: attribute.into(),
        }
    }

    fn sample_dialog() -> Dialog {
        let mut t1 = DialogTurn::new(
            "i want a restaurant in the north",
            "gourmet kitchen serves north american food",
        );
        t1.spans = vec![
            span(Side::User, 6, 7, "area"),
            span(Side::Response, 0, 2, "name"),
            span(Side::Response, 3, 5, "food"),
        ];
        let t2 = DialogTurn::new("thanks", "goodbye");
        let mut goal = UserGoal::default();
        goal.constraints.insert("area".into(), "north".into());
        goal.requests.insert("food".into());
        Dialog {
            id: "d1".into(),
            domain: "restaurant".into(),
            goal,
            turns: vec![t1, t2],
        }
    }

    #[test]
    fn delex_replaces_spans_with_placeholders() {
        let kb = kb();
        let templates = delex(&[sample_dialog()], &kb).unwrap();
        assert_eq!(templates.len(), 1);
        let t = &templates[0];
        assert_eq!(
            t.turns[0].user.join(" "),
            "i want a restaurant in the [area]"
        );
        assert_eq!(t.turns[0].response.join(" "), "[name] serves [food] food");
        assert_eq!(t.source_entities, vec![0]);
        assert_eq!(
            t.matched_attributes.iter().cloned().collect::<Vec<_>>(),
            ["area", "food", "name"]
        );
    }

    #[test]
    fn delex_skips_dialogs_without_spans_or_match() {
        let kb = kb();
        let mut plain = sample_dialog();
        plain.turns.iter_mut().for_each(|t| t.spans.clear());
        let mut conflicting = sample_dialog();
        conflicting.id = "d2".into();
        conflicting.turns[0].user[6] = "centre".into();
        let (templates, report) = delex_with_report(&[plain, conflicting], &kb).unwrap();
        assert!(templates.is_empty());
        assert_eq!(report.skipped_no_spans, ["d1"]);
        assert_eq!(report.skipped_no_entity, ["d2"]);
    }

    #[test]
    fn delex_rejects_foreign_attribute() {
        let kb = kb();
        let mut d = sample_dialog();
        d.turns[0].spans[0].attribute = "stars".into();
        assert!(matches!(delex(&[d], &kb), Err(EcoError::Annotation { .. })));
        let mut d = sample_dialog();
        d.turns[0].spans[0].end = 99;
        assert!(matches!(delex(&[d], &kb), Err(EcoError::Annotation { .. })));
    }

    #[test]
    fn relex_fills_from_one_entity() {
        let kb = kb();
        let t = &delex(&[sample_dialog()], &kb).unwrap()[0];
        let d = relex(t, &kb.entities()[1]).unwrap();
        assert_eq!(
            d.turns[0].user.join(" "),
            "i want a restaurant in the north"
        );
        assert_eq!(
            d.turns[0].response.join(" "),
            "pizza palace serves italian food"
        );
        assert_eq!(d.turns[0].gold_entity, Some(1));
        assert_eq!(d.turns[1].gold_entity, None);
        for s in &d.turns[0].spans {
            let value = d.turns[0].span_tokens(s);
            assert_eq!(kb.entities()[1].value(&s.attribute), Some(value));
        }
    }

    #[test]
    fn relex_round_trip() {
        let kb = kb();
        let d = sample_dialog();
        let t = &delex(std::slice::from_ref(&d), &kb).unwrap()[0];
        let back = relex(t, &kb.entities()[0]).unwrap();
        assert_eq!(back.without_labels(), d);
    }

    #[test]
    fn relex_skips_entity_without_value() {
        let rec: BTreeMap<String, String> = [("name", "empty place"), ("area", "north")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let sparse =
            KnowledgeBase::from_records("restaurant", &["name", "area", "food"], &[rec]).unwrap();
        let t = &delex(&[sample_dialog()], &kb()).unwrap()[0];
        assert!(relex(t, &sparse.entities()[0]).is_none());
    }

    #[test]
    fn augment_caps_without_replacement_and_is_deterministic() {
        let kb = kb();
        let templates = delex(&[sample_dialog()], &kb).unwrap();
        let (a, report) = augment_batch(&templates, &kb, 12, 7).unwrap();
        // goal {area: north} matches two entities
        assert_eq!(a.len(), 2);
        assert_eq!(report.generated, 2);
        let ids: BTreeSet<_> = a.iter().map(|d| d.turns[0].gold_entity.unwrap()).collect();
        assert_eq!(ids.len(), 2);
        let (b, _) = augment_batch(&templates, &kb, 12, 7).unwrap();
        assert_eq!(a, b);
        let (one, _) = augment_batch(&templates, &kb, 1, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert!(augment_batch(&templates, &kb, 0, 3).is_err());
    }

    #[test]
    fn augment_reports_unmatched_goal() {
        let kb = kb();
        let mut templates = delex(&[sample_dialog()], &kb).unwrap();
        templates[0]
            .goal
            .constraints
            .insert("food".into(), "thai".into());
        let (out, report) = augment_batch(&templates, &kb, 3, 1).unwrap();
        assert!(out.is_empty());
        assert_eq!(report.skipped_no_match, ["d1"]);
    }

    #[test]
    fn training_sets_partition_labels() {
        let kb = kb();
        let d = sample_dialog();
        let templates = delex(std::slice::from_ref(&d), &kb).unwrap();
        let (sets, _) = build_training_sets(std::slice::from_ref(&d), &[], &kb, 2, 0).unwrap();
        assert_eq!(sets.d_fn, vec![d.clone()]);
        let (sets, _) = build_training_sets(&[d], &templates, &kb, 2, 0).unwrap();
        assert_eq!(sets.d_fn.len(), sets.d_tr.len() + sets.d_au.len());
        assert!(sets.d_tr.iter().all(|d| !d.is_labeled()));
        assert!(sets.d_au.iter().all(|d| d
            .turns
            .iter()
            .all(|t| t.spans.is_empty() == t.gold_entity.is_none())));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let dialogs = vec![sample_dialog()];
        save_dialogs(&path, &dialogs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"version\":1"));
        assert_eq!(load_dialogs(&path).unwrap(), dialogs);
    }
}
