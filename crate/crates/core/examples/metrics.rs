// Scores a handful of responses against a small knowledge base: entity F1,
// turn consistency, Inform / Success, BLEU and the combined score.
//
// `cargo run --example metrics`

use std::collections::BTreeMap;

use eco::eval::{bleu, consistency, extract_info, f1, inform_success, score, EmptyTurns};
use eco::kb::{normalize, KnowledgeBase, UserGoal};

pub fn restaurants() -> eco::Result<KnowledgeBase> {
    let rows = [
        ("gourmet kitchen", "north", "north american", "expensive"),
        ("pizza hut city centre", "centre", "italian", "cheap"),
        ("the golden curry", "centre", "indian", "expensive"),
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

pub struct Summary {
    /// Consistency of the wrong and the right claim about gourmet kitchen.
    pub claims: (f64, f64),
    pub f1: f64,
    pub score: f64,
}

pub fn run() -> eco::Result<Summary> {
    let kb = restaurants()?;
    let user = normalize("i want a restaurant in the north");
    let wrong = normalize("gourmet kitchen serves italian food");
    let right = normalize("gourmet kitchen serves north american food");
    println!(
        "extracted from the wrong claim: {:?}",
        extract_info(&wrong, &kb)
    );
    let c = |resp: &Vec<String>| {
        consistency(&[(user.clone(), resp.clone())], &kb, EmptyTurns::Consistent).unwrap_or(1.0)
    };
    let claims = (c(&wrong), c(&right));
    println!(
        "consistency: italian claim {}, north american claim {}",
        claims.0, claims.1
    );

    let pred = vec![normalize(
        "gourmet kitchen is in the north and serves italian food",
    )];
    let gold = vec![normalize(
        "gourmet kitchen is an expensive north american place in the north",
    )];
    let f = f1(&pred, &gold, &kb)?;
    println!("entity f1 {:.4}", f);

    let goal = UserGoal {
        constraints: [("area".to_string(), "centre".to_string())].into(),
        requests: ["food".to_string()].into(),
    };
    let dialog = vec![
        normalize("the golden curry is in the centre"),
        normalize("it serves indian food"),
    ];
    let (inform, success) = inform_success(&dialog, &goal, &kb);
    let refs = vec![
        normalize("the golden curry is a nice place in the centre"),
        normalize("they serve indian food"),
    ];
    let b = bleu(&dialog, &refs)?;
    let (i, s) = (100.0 * inform as u8 as f64, 100.0 * success as u8 as f64);
    let total = score(b, i, s);
    println!("inform {inform}, success {success}, bleu {b:.2}, score {total:.2}");
    Ok(Summary {
        claims,
        f1: f,
        score: total,
    })
}

#[allow(dead_code)]
fn main() -> eco::Result<()> {
    run().map(|_| ())
}
