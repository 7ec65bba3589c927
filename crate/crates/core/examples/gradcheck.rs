//! Checks the tape's gradient of a small two-layer classifier against
//! central finite differences.

use tamcl::autodiff::{Tape, Tensor};
use tamcl::losses::cross_entropy;
use tamcl::rng::{normal_tensor, seeded};

fn loss(tape: &mut Tape, x: &Tensor, w1: &Tensor, w2: &Tensor) -> (tamcl::autodiff::Var, [tamcl::autodiff::Var; 2]) {
    let x = tape.constant(x.clone());
    let a = tape.input(w1.clone());
    let b = tape.input(w2.clone());
    let h = tape.matmul(x, a).unwrap();
    let h = tape.gelu(h);
    let logits = tape.matmul(h, b).unwrap();
    let rows: Vec<_> = (0..3).map(|r| tape.slice_rows(logits, r, 1).unwrap()).collect();
    (cross_entropy(tape, &rows, &[0, 2, 1]).unwrap(), [a, b])
}

fn main() {
    let mut rng = seeded(1, 0);
    let x = normal_tensor(&mut rng, &[3, 5], 1.0);
    let w1 = normal_tensor(&mut rng, &[5, 4], 0.5);
    let w2 = normal_tensor(&mut rng, &[4, 3], 0.5);

    let mut tape = Tape::new();
    let (l, [a, _]) = loss(&mut tape, &x, &w1, &w2);
    println!("loss {:.6}, tape of {} nodes", tape.value(l).item(), tape.len());
    let analytic = tape.backward(l).unwrap().wrt(a).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..w1.len() {
        let mut plus = w1.clone();
        plus.data_mut()[k] += h;
        let mut minus = w1.clone();
        minus.data_mut()[k] -= h;
        let f = |w: &Tensor| {
            let mut t = Tape::new();
            let (l, _) = loss(&mut t, &x, w, &w2);
            t.value(l).item()
        };
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        let g = analytic.data()[k];
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        if k < 4 {
            println!("w1[{k}]  analytic {g:+.8}  numeric {numeric:+.8}");
        }
    }
    println!("worst relative error over {} entries: {worst:.2e}", w1.len());
}
