// Reverse-mode gradients on the tape, checked against central differences,
// and the effect of a stop-gradient node.
//
// `cargo run --example autodiff`

use eco::tape::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

/// `sum(tanh(x W) * (x W'))`, where `W'` is `W` or a detached copy of it.
fn forward(x: &Tensor, w: &Tensor, detach: bool) -> (Tape, eco::tape::Var, eco::tape::Var) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.param(w.clone());
    let h = tape.matmul(xv, wv);
    let a = tape.tanh(h);
    let w2 = if detach { tape.stop_grad(wv) } else { wv };
    let b = tape.matmul(xv, w2);
    let prod = tape.mul(a, b);
    let out = tape.sum_all(prod);
    (tape, wv, out)
}

fn value(x: &Tensor, w: &Tensor, detach: bool) -> f64 {
    let (tape, _, out) = forward(x, w, detach);
    tape.value(out).item()
}

/// Largest relative error between the analytic and numeric gradient of the
/// non-detached function.
pub fn run(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(3, 4, 1.0, &mut rng);
    let w = Tensor::uniform(4, 5, 1.0, &mut rng);

    let (tape, wv, out) = forward(&x, &w, false);
    let analytic = tape.backward(out).wrt(wv, w.shape());
    let mut worst: f64 = 0.0;
    for i in 0..w.data().len() {
        let mut plus = w.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = w.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (value(&x, &plus, false) - value(&x, &minus, false)) / (2.0 * STEP);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
    }
    println!(
        "{} tape nodes, f = {:.6}",
        tape.len(),
        tape.value(out).item()
    );
    println!("max relative error vs central differences: {worst:.2e}");

    // With the second factor detached, only the tanh branch contributes.
    let (tape, wv, out) = forward(&x, &w, true);
    let partial = tape.backward(out).wrt(wv, w.shape());
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(partial.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    println!("detaching one factor changes the gradient by {diff:.4} (L1)");
    worst
}

#[allow(dead_code)]
fn main() {
    run(3);
}
