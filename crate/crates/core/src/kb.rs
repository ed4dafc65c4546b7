//! Knowledge base, user goals, tokenizer and vocabulary.
//!
//! Every entity is a schema-ordered record of attribute values. Values are
//! stored already normalized (lowercased, whitespace-split), so comparisons
//! between dialog text and the KB are token-level.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EcoError, Result};
use crate::FORMAT_VERSION;

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;

/// Value used for attributes an entity does not define.
pub const NONE_VALUE: &str = "none";

/// Attribute every schema must carry; it makes linearization injective.
pub const NAME_ATTRIBUTE: &str = "name";

/// Lowercase and whitespace-split. Placeholders such as `[food]` survive as
/// single tokens.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn placeholder(attribute: &str) -> String {
    format!("[{attribute}]")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    attributes: Vec<String>,
    placeholders: Vec<String>,
}

impl AttributeSchema {
    pub fn new<I, S>(attributes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let attributes: Vec<String> = attributes
            .into_iter()
            .map(|a| a.as_ref().trim().to_lowercase())
            .collect();
        if attributes.is_empty() {
            return Err(EcoError::InvalidSchema("no attributes".into()));
        }
        let mut seen = BTreeSet::new();
        for a in &attributes {
            if a.is_empty() || a.contains(char::is_whitespace) || a.contains(['[', ']']) {
                return Err(EcoError::InvalidSchema(format!(
                    "attribute name {a:?} is not a bare word"
                )));
            }
            if !seen.insert(a.as_str()) {
                return Err(EcoError::InvalidSchema(format!(
                    "duplicate attribute {a:?}"
                )));
            }
        }
        if !seen.contains(NAME_ATTRIBUTE) {
            return Err(EcoError::InvalidSchema(format!(
                "schema must contain `{NAME_ATTRIBUTE}`"
            )));
        }
        let placeholders = attributes.iter().map(|a| placeholder(a)).collect();
        Ok(AttributeSchema {
            attributes,
            placeholders,
        })
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn placeholders(&self) -> &[String] {
        &self.placeholders
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn contains(&self, attribute: &str) -> bool {
        self.attributes.iter().any(|a| a == attribute)
    }

    pub fn index_of(&self, attribute: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == attribute)
    }

    /// Maps a placeholder token back to its attribute.
    pub fn attribute_of_placeholder(&self, token: &str) -> Option<&str> {
        self.placeholders
            .iter()
            .position(|p| p == token)
            .map(|i| self.attributes[i].as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: usize,
    values: BTreeMap<String, Vec<String>>,
}

impl Entity {
    pub fn value(&self, attribute: &str) -> Option<&[String]> {
        self.values.get(attribute).map(Vec::as_slice)
    }

    pub fn value_text(&self, attribute: &str) -> Option<String> {
        self.value(attribute).map(|v| v.join(" "))
    }

    pub fn name(&self) -> String {
        self.value_text(NAME_ATTRIBUTE).unwrap_or_default()
    }

    /// True if the attribute holds a real value (not the `none` sentinel).
    pub fn has_value(&self, attribute: &str) -> bool {
        matches!(self.value(attribute), Some(v) if !is_none_value(v))
    }

    pub fn values(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.values.iter().map(|(a, v)| (a.as_str(), v.as_slice()))
    }
}

pub(crate) fn is_none_value(tokens: &[String]) -> bool {
    tokens.len() == 1 && tokens[0] == NONE_VALUE
}

/// `[a_1] v_1 [a_2] v_2 ... [a_K] v_K </s>` in schema order.
pub fn linearize_entity(entity: &Entity, schema: &AttributeSchema) -> Result<Vec<String>> {
    if entity.values.len() != schema.len() {
        let extra: Vec<&String> = entity
            .values
            .keys()
            .filter(|k| !schema.contains(k))
            .collect();
        if !extra.is_empty() {
            return Err(EcoError::SchemaMismatch {
                entity: entity.id,
                reason: format!("attributes {extra:?} are not in the schema"),
            });
        }
    }
    let mut out = Vec::new();
    for (attr, ph) in schema.attributes().iter().zip(schema.placeholders()) {
        let value = entity.value(attr).ok_or_else(|| EcoError::SchemaMismatch {
            entity: entity.id,
            reason: format!("missing value for `{attr}`"),
        })?;
        out.push(ph.clone());
        out.extend(value.iter().cloned());
    }
    out.push(EOS.to_string());
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGoal {
    #[serde(default)]
    pub constraints: BTreeMap<String, String>,
    #[serde(default)]
    pub requests: BTreeSet<String>,
}

impl UserGoal {
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        for attr in self.constraints.keys().chain(self.requests.iter()) {
            if !schema.contains(attr) {
                return Err(EcoError::InvalidConfig(format!(
                    "goal refers to attribute `{attr}` outside the schema"
                )));
            }
        }
        if let Some(a) = self
            .constraints
            .keys()
            .find(|a| self.requests.contains(*a) && a.as_str() != NAME_ATTRIBUTE)
        {
            return Err(EcoError::InvalidConfig(format!(
                "goal both constrains and requests `{a}`"
            )));
        }
        Ok(())
    }
}

/// Every constraint value equals the entity's value token-for-token.
pub fn goal_matches(entity: &Entity, goal: &UserGoal) -> bool {
    goal.constraints
        .iter()
        .all(|(attr, val)| entity.value(attr) == Some(normalize(val).as_slice()))
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    domain: String,
    schema: AttributeSchema,
    entities: Vec<Entity>,
    value_lexicon: BTreeSet<(String, Vec<String>)>,
}

#[derive(Serialize, Deserialize)]
struct KbFile {
    #[serde(default = "default_version")]
    version: u32,
    #[serde(default = "default_domain")]
    domain: String,
    schema: Vec<String>,
    entities: Vec<BTreeMap<String, String>>,
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

fn default_domain() -> String {
    "default".to_string()
}

impl KnowledgeBase {
    /// Builds a KB from raw attribute → value records. Attributes a record
    /// omits get the `none` sentinel; names must be present and unique.
    pub fn from_records<S: AsRef<str>>(
        domain: &str,
        schema: &[S],
        records: &[BTreeMap<String, String>],
    ) -> Result<Self> {
        let schema = AttributeSchema::new(schema.iter().map(|s| s.as_ref()))?;
        let mut entities = Vec::with_capacity(records.len());
        let mut names = BTreeSet::new();
        for (id, record) in records.iter().enumerate() {
            let mut values = BTreeMap::new();
            for (attr, raw) in record {
                let attr = attr.to_lowercase();
                if !schema.contains(&attr) {
                    return Err(EcoError::SchemaMismatch {
                        entity: id,
                        reason: format!("attribute `{attr}` is not in the schema"),
                    });
                }
                let tokens = normalize(raw);
                if tokens.is_empty() {
                    return Err(EcoError::SchemaMismatch {
                        entity: id,
                        reason: format!("empty value for `{attr}`"),
                    });
                }
                if tokens
                    .iter()
                    .any(|t| schema.attribute_of_placeholder(t).is_some())
                {
                    return Err(EcoError::SchemaMismatch {
                        entity: id,
                        reason: format!("value for `{attr}` contains a placeholder token"),
                    });
                }
                values.insert(attr, tokens);
            }
            for attr in schema.attributes() {
                values
                    .entry(attr.clone())
                    .or_insert_with(|| vec![NONE_VALUE.to_string()]);
            }
            let name = values[NAME_ATTRIBUTE].clone();
            if is_none_value(&name) {
                return Err(EcoError::SchemaMismatch {
                    entity: id,
                    reason: "entity has no name".into(),
                });
            }
            if !names.insert(name.clone()) {
                return Err(EcoError::SchemaMismatch {
                    entity: id,
                    reason: format!("duplicate name {:?}", name.join(" ")),
                });
            }
            entities.push(Entity { id, values });
        }
        let value_lexicon = build_lexicon(&entities);
        Ok(KnowledgeBase {
            domain: domain.to_lowercase(),
            schema,
            entities,
            value_lexicon,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: KbFile = serde_json::from_str(text)?;
        Self::from_records(&file.domain, &file.schema, &file.entities)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| EcoError::io(path, e))?;
        let file: KbFile = serde_json::from_str(&text).map_err(|e| EcoError::json(path, e))?;
        Self::from_records(&file.domain, &file.schema, &file.entities)
    }

    pub fn to_json(&self) -> String {
        let file = KbFile {
            version: FORMAT_VERSION,
            domain: self.domain.clone(),
            schema: self.schema.attributes().to_vec(),
            entities: self
                .entities
                .iter()
                .map(|e| {
                    e.values
                        .iter()
                        .map(|(a, v)| (a.clone(), v.join(" ")))
                        .collect()
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("kb serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| EcoError::io(path, e))
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: usize) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// All `(attribute, value tokens)` pairs held by some entity.
    pub fn value_lexicon(&self) -> &BTreeSet<(String, Vec<String>)> {
        &self.value_lexicon
    }

    pub fn lexicon_contains(&self, attribute: &str, value: &[String]) -> bool {
        self.value_lexicon
            .contains(&(attribute.to_string(), value.to_vec()))
    }

    pub fn linearize(&self, id: usize) -> Result<Vec<String>> {
        let e = self.entity(id).ok_or_else(|| EcoError::SchemaMismatch {
            entity: id,
            reason: "no such entity".into(),
        })?;
        linearize_entity(e, &self.schema)
    }

    pub fn matching_entities(&self, goal: &UserGoal) -> Vec<usize> {
        self.entities
            .iter()
            .filter(|e| goal_matches(e, goal))
            .map(|e| e.id)
            .collect()
    }

    pub fn entity_by_name(&self, name: &[String]) -> Option<&Entity> {
        self.entities
            .iter()
            .find(|e| e.value(NAME_ATTRIBUTE) == Some(name))
    }

    /// Stable content hash, used to tie tries and checkpoints to a KB.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.domain.as_bytes());
        h.update([0]);
        for a in self.schema.attributes() {
            h.update(a.as_bytes());
            h.update([1]);
        }
        for e in &self.entities {
            for a in self.schema.attributes() {
                h.update(e.values[a].join(" ").as_bytes());
                h.update([2]);
            }
            h.update([3]);
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Length in tokens of the longest linearized entity, EOS included.
    pub fn max_linearized_len(&self) -> usize {
        self.entities
            .iter()
            .map(|e| {
                self.schema
                    .attributes()
                    .iter()
                    .map(|a| 1 + e.values[a].len())
                    .sum::<usize>()
                    + 1
            })
            .max()
            .unwrap_or(1)
    }
}

fn build_lexicon(entities: &[Entity]) -> BTreeSet<(String, Vec<String>)> {
    entities
        .iter()
        .flat_map(|e| e.values.iter().map(|(a, v)| (a.clone(), v.clone())))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct GoalsFile {
    version: u32,
    goals: BTreeMap<String, UserGoal>,
}

/// Reads a goals file: user goals keyed by dialog id.
pub fn load_goals(path: impl AsRef<Path>) -> Result<BTreeMap<String, UserGoal>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| EcoError::io(path, e))?;
    let file: GoalsFile = serde_json::from_str(&text).map_err(|e| EcoError::json(path, e))?;
    Ok(file.goals)
}

pub fn save_goals(path: impl AsRef<Path>, goals: &BTreeMap<String, UserGoal>) -> Result<()> {
    let path = path.as_ref();
    let file = GoalsFile {
        version: FORMAT_VERSION,
        goals: goals.clone(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(path, text).map_err(|e| EcoError::io(path, e))
}

/// Token ↔ id bijection. Ids `0..4` are PAD, BOS, EOS, UNK; placeholder
/// tokens follow, then the remaining words in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    reserved: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from KB schemas and values plus corpus words.
    pub fn build<'a, I>(kbs: &[&KnowledgeBase], corpus_tokens: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        for kb in kbs {
            for ph in kb.schema().placeholders() {
                if !tokens.contains(ph) {
                    tokens.push(ph.clone());
                }
            }
        }
        let reserved = tokens.len();
        let mut words = BTreeSet::new();
        for kb in kbs {
            for (_, value) in kb.value_lexicon() {
                words.extend(value.iter().cloned());
            }
        }
        for t in corpus_tokens {
            words.insert(t.to_lowercase());
        }
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens_unchecked(tokens, reserved)
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, reserved: usize) -> Result<Self> {
        if tokens.len() < 4
            || tokens[..4] != [PAD, BOS, EOS, UNK]
            || reserved < 4
            || reserved > tokens.len()
        {
            return Err(EcoError::Checkpoint("malformed vocabulary".into()));
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(EcoError::Checkpoint(
                "vocabulary has duplicate tokens".into(),
            ));
        }
        Ok(Self::from_tokens_unchecked(tokens, reserved))
    }

    fn from_tokens_unchecked(tokens: Vec<String>, reserved: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary {
            tokens,
            index,
            reserved,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of reserved ids (specials and placeholders).
    pub fn reserved(&self) -> usize {
        self.reserved
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK)
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.encode(&normalize(text))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(a, v)| (a.to_string(), v.to_string()))
            .collect()
    }

    fn hotel_kb() -> KnowledgeBase {
        KnowledgeBase::from_records(
            "hotel",
            &["name", "area", "type"],
            &[
                record(&[("name", "cityroomz"), ("area", "centre"), ("type", "hotel")]),
                record(&[
                    ("name", "acorn guest house"),
                    ("area", "north"),
                    ("type", "guesthouse"),
                ]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn tokenize_lowercases_and_keeps_placeholders() {
        let kb = hotel_kb();
        let vocab = Vocabulary::build(&[&kb], ["north", "american", "italian", "kings", "lynn"]);
        let ids = vocab.tokenize("North American");
        assert_eq!(vocab.decode(&ids), ["north", "american"]);

        let kb2 = KnowledgeBase::from_records(
            "restaurant",
            &["name", "food"],
            &[record(&[("name", "x"), ("food", "italian")])],
        )
        .unwrap();
        let vocab = Vocabulary::build(&[&kb2], ["italian"]);
        let ids = vocab.tokenize("[food] italian");
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], vocab.id("[food]").unwrap());
        assert!((ids[0] as usize) < vocab.reserved());
    }

    #[test]
    fn detokenize_round_trips() {
        let kb = hotel_kb();
        let vocab = Vocabulary::build(&[&kb], ["kings", "lynn"]);
        let ids = vocab.tokenize("kings lynn");
        assert_eq!(ids.len(), 2);
        assert_eq!(vocab.detokenize(&ids), "kings lynn");
        assert_eq!(vocab.tokenize("never seen"), vec![UNK_ID, UNK_ID]);
    }

    #[test]
    fn vocabulary_is_deterministic_and_reserved_first() {
        let kb = hotel_kb();
        let a = Vocabulary::build(&[&kb], ["zeta", "alpha", "alpha"]);
        let b = Vocabulary::build(&[&kb], ["alpha", "zeta"]);
        assert_eq!(a, b);
        assert_eq!(a.token(PAD_ID), PAD);
        assert_eq!(a.token(EOS_ID), EOS);
        assert_eq!(a.reserved(), 4 + 3);
        let words = &a.tokens()[a.reserved()..];
        let mut sorted = words.to_vec();
        sorted.sort();
        assert_eq!(words, sorted.as_slice());
    }

    #[test]
    fn linearize_follows_schema_order() {
        let kb = hotel_kb();
        let lin = kb.linearize(0).unwrap();
        assert_eq!(
            lin.join(" "),
            "[name] cityroomz [area] centre [type] hotel </s>"
        );
    }

    #[test]
    fn linearize_none_sentinel() {
        let kb = KnowledgeBase::from_records(
            "x",
            &["name", "area", "food"],
            &[record(&[("name", "solo")])],
        )
        .unwrap();
        assert_eq!(
            kb.linearize(0).unwrap().join(" "),
            "[name] solo [area] none [food] none </s>"
        );
        // name itself cannot be `none`
        let err =
            KnowledgeBase::from_records("x", &["name", "area"], &[record(&[("area", "north")])]);
        assert!(matches!(err, Err(EcoError::SchemaMismatch { .. })));
    }

    #[test]
    fn linearize_rejects_foreign_attribute() {
        let kb = hotel_kb();
        let other = AttributeSchema::new(["name", "area"]).unwrap();
        let err = linearize_entity(&kb.entities()[0], &other);
        assert!(matches!(err, Err(EcoError::SchemaMismatch { .. })));
        let err = KnowledgeBase::from_records(
            "x",
            &["name"],
            &[record(&[("name", "a"), ("stars", "4")])],
        );
        assert!(matches!(err, Err(EcoError::SchemaMismatch { .. })));
    }

    #[test]
    fn linearize_is_injective_over_kb() {
        let kb = hotel_kb();
        let all: BTreeSet<Vec<String>> = (0..kb.len()).map(|i| kb.linearize(i).unwrap()).collect();
        assert_eq!(all.len(), kb.len());
    }

    #[test]
    fn schema_validation() {
        assert!(AttributeSchema::new(["name", "name"]).is_err());
        assert!(AttributeSchema::new(["area"]).is_err());
        assert!(AttributeSchema::new(Vec::<String>::new()).is_err());
        let s = AttributeSchema::new(["name", "food"]).unwrap();
        assert_eq!(s.attribute_of_placeholder("[food]"), Some("food"));
        assert_eq!(s.attribute_of_placeholder("food"), None);
    }

    #[test]
    fn goal_matching() {
        let kb = hotel_kb();
        let e = &kb.entities()[0];
        let mut g = UserGoal::default();
        assert!(goal_matches(e, &g));
        g.constraints.insert("area".into(), "centre".into());
        assert!(goal_matches(e, &g));
        g.constraints.insert("type".into(), "guesthouse".into());
        assert!(!goal_matches(e, &g));
        assert_eq!(kb.matching_entities(&UserGoal::default()), vec![0, 1]);
    }

    #[test]
    fn goal_validation() {
        let kb = hotel_kb();
        let mut g = UserGoal::default();
        g.constraints.insert("area".into(), "north".into());
        g.requests.insert("name".into());
        assert!(g.validate(kb.schema()).is_ok());
        g.requests.insert("area".into());
        assert!(g.validate(kb.schema()).is_err());
        let mut g = UserGoal::default();
        g.requests.insert("phone".into());
        assert!(g.validate(kb.schema()).is_err());
    }

    #[test]
    fn lexicon_matches_linear_scan() {
        let kb = hotel_kb();
        for e in kb.entities() {
            for (a, v) in e.values() {
                assert!(kb.lexicon_contains(a, v));
            }
        }
        let probe = vec!["north".to_string()];
        let scan = kb
            .entities()
            .iter()
            .any(|e| e.value("type") == Some(probe.as_slice()));
        assert_eq!(kb.lexicon_contains("type", &probe), scan);
    }

    #[test]
    fn json_round_trip_and_fingerprint() {
        let kb = hotel_kb();
        let back = KnowledgeBase::from_json_str(&kb.to_json()).unwrap();
        assert_eq!(back.entities(), kb.entities());
        assert_eq!(back.fingerprint(), kb.fingerprint());
        let other = KnowledgeBase::from_records(
            "hotel",
            &["name", "area", "type"],
            &[record(&[
                ("name", "cityroomz"),
                ("area", "north"),
                ("type", "hotel"),
            ])],
        )
        .unwrap();
        assert_ne!(other.fingerprint(), kb.fingerprint());
        // [name] acorn guest house [area] north [type] guesthouse </s>
        assert_eq!(kb.max_linearized_len(), 9);
    }
}
