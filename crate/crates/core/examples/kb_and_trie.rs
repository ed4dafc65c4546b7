// Builds a small knowledge base, linearizes its entities and masks a model
// distribution with the entity trie.
//
// `cargo run --example kb_and_trie`

use std::collections::BTreeMap;

use eco::distribution::TokenDistribution;
use eco::kb::{KnowledgeBase, Vocabulary};
use eco::trie::{constrain, EntityTrie};

pub fn restaurants() -> eco::Result<KnowledgeBase> {
    let rows = [
        ("gourmet kitchen", "north", "north american", "expensive"),
        ("pizza hut city centre", "centre", "italian", "cheap"),
        ("the golden curry", "centre", "indian", "expensive"),
        ("curry prince", "east", "indian", "none"),
    ];
    let records: Vec<BTreeMap<String, String>> = rows
        .iter()
        .map(|(name, area, food, price)| {
            [
                ("name", name),
                ("area", area),
                ("food", food),
                ("pricerange", price),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
        })
        .collect();
    KnowledgeBase::from_records(
        "restaurant",
        &["name", "area", "food", "pricerange"],
        &records,
    )
}

/// Returns the tokens allowed after `[name]` and the mass each
/// receives from a uniform distribution.
pub fn run() -> eco::Result<Vec<(String, f64)>> {
    let kb = restaurants()?;
    for id in 0..kb.len() {
        println!("{}", kb.linearize(id)?.join(" "));
    }

    let vocab = Vocabulary::build(&[&kb], std::iter::empty());
    let trie = EntityTrie::build(&kb, &vocab)?;
    println!(
        "vocab {}, trie {} nodes, depth {}, fingerprint {}",
        vocab.len(),
        trie.node_count(),
        trie.max_depth(),
        trie.fingerprint()
    );

    let prefix = vocab.tokenize("[name]");
    let allowed = trie.allowed_tokens(&prefix)?;
    let masked = constrain(&TokenDistribution::uniform(vocab.len()), &allowed)?;
    let out: Vec<(String, f64)> = allowed
        .ids()
        .iter()
        .map(|&t| (vocab.token(t).to_string(), masked.prob(t)))
        .collect();
    println!("after `[name]`: {out:?}");

    let valid = vocab.encode(&kb.linearize(3)?);
    println!("curry prince is a path: {}", trie.contains(&valid));
    println!(
        "truncated entity is a path: {}",
        trie.contains(&valid[..valid.len() - 1])
    );
    Ok(out)
}

#[allow(dead_code)]
fn main() -> eco::Result<()> {
    run().map(|_| ())
}
