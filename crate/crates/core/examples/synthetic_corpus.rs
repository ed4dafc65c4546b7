// Writes a synthetic restaurant corpus (KB, annotated dialogs, goals) to a
// directory.
//
// `cargo run --example synthetic_corpus [out_dir]`

use std::path::{Path, PathBuf};

use eco::synth::{synthesize, SynthSpec, Synthetic};

pub fn run(spec: &SynthSpec, dir: &Path) -> eco::Result<Synthetic> {
    let s = synthesize(spec)?;
    s.write(dir)?;
    let turns: usize = s.dialogs.iter().map(|d| d.turns.len()).sum();
    println!(
        "{} entities over {:?}, {} dialogs, {} turns -> {}",
        s.kb.len(),
        s.kb.schema().attributes(),
        s.dialogs.len(),
        turns,
        dir.display()
    );
    let d = &s.dialogs[0];
    println!("{} goal {:?}", d.id, s.goals[&d.id]);
    for turn in &d.turns {
        println!(
            "  user: {}\n  sys:  {}",
            turn.user.join(" "),
            turn.response.join(" ")
        );
    }
    Ok(s)
}

#[allow(dead_code)]
fn main() -> eco::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("eco-synthetic"));
    run(&SynthSpec::default(), &dir).map(|_| ())
}
