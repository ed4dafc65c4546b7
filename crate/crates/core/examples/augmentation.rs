// Delexicalizes annotated dialogs into templates and fills them with other
// entities that satisfy the same user goal.
//
// `cargo run --example augmentation`

use eco::augment::{augment_batch, delex_with_report, relex};
use eco::eval::{consistency, EmptyTurns};
use eco::synth::{synthesize, SynthSpec};

pub struct Summary {
    pub templates: usize,
    pub augmented: usize,
    pub consistency: f64,
}

pub fn run(p: usize, seed: u64) -> eco::Result<Summary> {
    let s = synthesize(&SynthSpec {
        n_dialogs: 40,
        ..Default::default()
    })?;
    let (templates, report) = delex_with_report(&s.dialogs, &s.kb)?;
    println!(
        "{} dialogs -> {} templates ({} without spans)",
        report.dialogs,
        report.templates,
        report.skipped_no_spans.len()
    );

    let t = &templates[0];
    for turn in &t.turns {
        println!(
            "  user: {}\n  sys:  {}",
            turn.user.join(" "),
            turn.response.join(" ")
        );
    }
    if let Some(other) =
        s.kb.matching_entities(&t.goal)
            .into_iter()
            .find(|&e| !t.source_entities.contains(&e))
    {
        let d = relex(t, &s.kb.entities()[other]).expect("matching entity has every value");
        println!("relexed with {}:", s.kb.entities()[other].name());
        for turn in &d.turns {
            println!(
                "  user: {}\n  sys:  {}",
                turn.user.join(" "),
                turn.response.join(" ")
            );
        }
    }

    let (augmented, report) = augment_batch(&templates, &s.kb, p, seed)?;
    let turns: Vec<_> = augmented
        .iter()
        .flat_map(|d| d.turns.iter().map(|t| (t.user.clone(), t.response.clone())))
        .collect();
    let c = consistency(&turns, &s.kb, EmptyTurns::Consistent).unwrap_or(1.0);
    println!(
        "p = {p}: {} augmented dialogs, {} templates without a matching entity, consistency {:.3}",
        report.generated,
        report.skipped_no_match.len(),
        c
    );
    Ok(Summary {
        templates: templates.len(),
        augmented: augmented.len(),
        consistency: c,
    })
}

#[allow(dead_code)]
fn main() -> eco::Result<()> {
    run(4, 7).map(|_| ())
}
