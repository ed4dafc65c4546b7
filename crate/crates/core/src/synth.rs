//! Synthetic single-domain restaurant corpus with exact span annotations.
//!
//! Each dialog is scripted around one entity: the user states constraints,
//! the system recommends the entity, the user may ask for attributes, and
//! the dialog may close with a goodbye.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{save_dialogs, Dialog, DialogTurn, Side, Span};
use crate::error::{EcoError, Result};
use crate::kb::{save_goals, KnowledgeBase, UserGoal};

pub const DOMAIN: &str = "restaurant";

/// Attributes in schema order; the first `n_attributes` are used.
const ATTRIBUTES: [&str; 7] = [
    "name",
    "area",
    "food",
    "pricerange",
    "phone",
    "postcode",
    "address",
];

const AREAS: [&str; 5] = ["centre", "north", "south", "east", "west"];
const FOODS: [&str; 10] = [
    "italian",
    "chinese",
    "indian",
    "north american",
    "british",
    "french",
    "thai",
    "korean",
    "spanish",
    "turkish",
];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];
const NAME_HEADS: [&str; 12] = [
    "golden", "silver", "royal", "little", "old", "lucky", "happy", "grand", "hidden", "rustic",
    "crimson", "jade",
];
const NAME_TAILS: [&str; 10] = [
    "dragon", "kitchen", "garden", "house", "lantern", "table", "spoon", "oak", "bell", "star",
];
const STREETS: [&str; 6] = ["regent", "mill", "trinity", "station", "market", "hills"];

pub const MAX_ENTITIES: usize = NAME_HEADS.len() * NAME_TAILS.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_entities: usize,
    /// 2 to 7, counting `name`.
    pub n_attributes: usize,
    /// Distinct values drawn per pooled attribute (area, food, pricerange).
    pub pool_size: usize,
    pub n_dialogs: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub seed: u64,
    pub emit_spans: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_entities: 20,
            n_attributes: 4,
            pool_size: 10,
            n_dialogs: 200,
            min_turns: 2,
            max_turns: 4,
            seed: 7,
            emit_spans: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EcoError::InvalidConfig(m));
        if self.n_entities == 0 {
            return bad("n_entities must be at least 1".into());
        }
        if self.n_entities > MAX_ENTITIES {
            return bad(format!(
                "at most {MAX_ENTITIES} distinct names are available"
            ));
        }
        if !(2..=ATTRIBUTES.len()).contains(&self.n_attributes) {
            return bad(format!("n_attributes must be in 2..={}", ATTRIBUTES.len()));
        }
        if self.pool_size == 0 {
            return bad("pool_size must be at least 1".into());
        }
        if self.min_turns < 2 || self.max_turns > 4 || self.min_turns > self.max_turns {
            return bad("turn range must lie within 2..=4".into());
        }
        Ok(())
    }

    pub fn schema(&self) -> Vec<&'static str> {
        ATTRIBUTES[..self.n_attributes].to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub kb: KnowledgeBase,
    pub dialogs: Vec<Dialog>,
    pub goals: BTreeMap<String, UserGoal>,
}

impl Synthetic {
    /// Writes `kb.json`, `dialogs.jsonl` and `goals.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| EcoError::io(dir, e))?;
        self.kb.save(dir.join("kb.json"))?;
        save_dialogs(dir.join("dialogs.jsonl"), &self.dialogs)?;
        save_goals(dir.join("goals.json"), &self.goals)
    }
}

fn pool<'a>(values: &[&'a str], size: usize, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    let mut v = values.to_vec();
    v.shuffle(rng);
    v.truncate(size.min(values.len()));
    v
}

fn make_kb(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<KnowledgeBase> {
    let schema = spec.schema();
    let areas = pool(&AREAS, spec.pool_size, rng);
    let foods = pool(&FOODS, spec.pool_size, rng);
    let prices = pool(&PRICES, spec.pool_size, rng);
    let mut names: Vec<String> = NAME_HEADS
        .iter()
        .flat_map(|h| NAME_TAILS.iter().map(move |t| format!("{h} {t}")))
        .collect();
    names.shuffle(rng);

    let mut phones = BTreeSet::new();
    let mut records = Vec::with_capacity(spec.n_entities);
    for name in names.into_iter().take(spec.n_entities) {
        let mut r = BTreeMap::new();
        for &attr in &schema {
            let value = match attr {
                "name" => name.clone(),
                "area" => areas.choose(rng).unwrap().to_string(),
                "food" => foods.choose(rng).unwrap().to_string(),
                "pricerange" => prices.choose(rng).unwrap().to_string(),
                "phone" => loop {
                    let p = format!("01223 {}", rng.gen_range(300_000..400_000));
                    if phones.insert(p.clone()) {
                        break p;
                    }
                },
                "postcode" => format!(
                    "cb{} {}{}{}",
                    rng.gen_range(1..6),
                    rng.gen_range(1..10),
                    (b'a' + rng.gen_range(0..26u8)) as char,
                    (b'a' + rng.gen_range(0..26u8)) as char
                ),
                "address" => format!(
                    "{} {} road",
                    rng.gen_range(1..100),
                    STREETS.choose(rng).unwrap()
                ),
                _ => unreachable!(),
            };
            r.insert(attr.to_string(), value);
        }
        records.push(r);
    }
    KnowledgeBase::from_records(DOMAIN, &schema, &records)
}

/// Builds one side of a turn from literal text and annotated values.
#[derive(Default)]
struct Utterance {
    tokens: Vec<String>,
    spans: Vec<(usize, usize, String)>,
}

impl Utterance {
    fn text(&mut self, s: &str) -> &mut Self {
        self.tokens.extend(s.split_whitespace().map(str::to_string));
        self
    }

    fn value(&mut self, attr: &str, v: &[String]) -> &mut Self {
        let start = self.tokens.len();
        self.tokens.extend(v.iter().cloned());
        self.spans
            .push((start, self.tokens.len(), attr.to_string()));
        self
    }
}

fn turn(user: Utterance, response: Utterance, entity: usize, emit_spans: bool) -> DialogTurn {
    let mut spans = Vec::new();
    if emit_spans {
        for (side, u) in [(Side::User, &user), (Side::Response, &response)] {
            for (start, end, attr) in &u.spans {
                spans.push(Span {
                    side,
                    start: *start,
                    end: *end,
                    attribute: attr.clone(),
                });
            }
        }
    }
    let gold_entity = (!user.spans.is_empty() || !response.spans.is_empty()).then_some(entity);
    DialogTurn {
        user: user.tokens,
        response: response.tokens,
        spans,
        gold_entity,
    }
}

fn attribute_words(attr: &str) -> &'static str {
    match attr {
        "area" => "area",
        "food" => "food type",
        "pricerange" => "price range",
        "phone" => "phone number",
        "postcode" => "postcode",
        "address" => "address",
        _ => "name",
    }
}

fn constraint_phrase(u: &mut Utterance, attr: &str, v: &[String]) {
    match attr {
        "area" => u.text("in the").value(attr, v),
        "food" => u.text("serving").value(attr, v).text("food"),
        _ => u.text("that is").value(attr, v),
    };
}

fn recommend_phrase(u: &mut Utterance, attr: &str, v: &[String]) {
    match attr {
        "area" => u.text("it is in the").value(attr, v).text("."),
        "food" => u.text("it serves").value(attr, v).text("food ."),
        _ => u.text("it is").value(attr, v).text("."),
    };
}

fn make_dialog(
    spec: &SynthSpec,
    kb: &KnowledgeBase,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> (Dialog, UserGoal) {
    let entity = &kb.entities()[rng.gen_range(0..kb.len())];
    let value = |a: &str| entity.value(a).expect("schema attribute").to_vec();
    let schema = kb.schema().attributes();
    let informable: Vec<&str> = ["area", "food", "pricerange"]
        .into_iter()
        .filter(|a| schema.iter().any(|s| s == a))
        .collect();
    let n_constraints = rng.gen_range(1..=informable.len().min(3));
    let mut constrained: Vec<&str> = informable
        .choose_multiple(rng, n_constraints)
        .copied()
        .collect();
    constrained.sort_by_key(|a| kb.schema().index_of(a));

    let mut requestable: Vec<&str> = schema
        .iter()
        .map(String::as_str)
        .filter(|a| *a != "name" && !constrained.contains(a))
        .collect();
    requestable.shuffle(rng);

    let n_turns = rng.gen_range(spec.min_turns..=spec.max_turns);
    let goodbye = n_turns > 2 || requestable.is_empty() || rng.gen_bool(0.5);
    let n_asks = (n_turns - 1 - goodbye as usize).min(requestable.len());
    let asked: Vec<&str> = requestable[..n_asks].to_vec();

    let mut turns = Vec::with_capacity(n_turns);

    let mut user = Utterance::default();
    user.text(
        [
            "i am looking for a restaurant",
            "i want a place to eat",
            "can you find me a restaurant",
        ]
        .choose(rng)
        .unwrap(),
    );
    for a in &constrained {
        constraint_phrase(&mut user, a, &value(a));
    }
    let mut resp = Utterance::default();
    match rng.gen_range(0..3) {
        0 => resp
            .text("how about")
            .value("name", &value("name"))
            .text("?"),
        1 => resp
            .text("i recommend")
            .value("name", &value("name"))
            .text("."),
        _ => resp
            .value("name", &value("name"))
            .text("is a good choice ."),
    };
    for a in &constrained {
        recommend_phrase(&mut resp, a, &value(a));
    }
    turns.push(turn(user, resp, entity.id, spec.emit_spans));

    for a in &asked {
        let words = attribute_words(a);
        let mut user = Utterance::default();
        if rng.gen_bool(0.5) {
            user.text(&format!("what is the {words} ?"));
        } else {
            user.text(&format!("can i have the {words} ?"));
        }
        let mut resp = Utterance::default();
        if rng.gen_bool(0.5) {
            resp.text(&format!("the {words} is")).value(a, &value(a));
        } else {
            resp.text(&format!("its {words} is")).value(a, &value(a));
        }
        turns.push(turn(user, resp, entity.id, spec.emit_spans));
    }

    if goodbye {
        let mut user = Utterance::default();
        user.text(
            ["thank you goodbye", "thanks that is all"]
                .choose(rng)
                .unwrap(),
        );
        let mut resp = Utterance::default();
        resp.text(
            ["you are welcome goodbye", "enjoy your meal"]
                .choose(rng)
                .unwrap(),
        );
        turns.push(turn(user, resp, entity.id, spec.emit_spans));
    }

    let goal = UserGoal {
        constraints: constrained
            .iter()
            .map(|a| (a.to_string(), value(a).join(" ")))
            .collect(),
        requests: asked.iter().map(|a| a.to_string()).collect(),
    };
    let dialog = Dialog {
        id: format!("syn{index:04}"),
        domain: DOMAIN.to_string(),
        goal: goal.clone(),
        turns,
    };
    (dialog, goal)
}

/// Deterministic in `spec`.
pub fn synthesize(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let kb = make_kb(spec, &mut rng)?;
    let mut dialogs = Vec::with_capacity(spec.n_dialogs);
    let mut goals = BTreeMap::new();
    for i in 0..spec.n_dialogs {
        let (d, g) = make_dialog(spec, &kb, i, &mut rng);
        goals.insert(d.id.clone(), g);
        dialogs.push(d);
    }
    Ok(Synthetic { kb, dialogs, goals })
}
