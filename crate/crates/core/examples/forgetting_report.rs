//! Normalized forgetting from a hand-written accuracy matrix.

use tamcl::metrics::{format_cell, forgetting_rate, random_baseline, AccuracyMatrix, ForgettingReport};

fn main() -> tamcl::Result<()> {
    let names = ["entail3", "pairs2", "qa7"];
    let labels = [3, 2, 7];
    let mut m = AccuracyMatrix::default();
    m.push_row(vec![0.92])?;
    m.push_row(vec![0.81, 0.97])?;
    m.push_row(vec![0.30, 0.55, 0.64])?;
    let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    print!("{}", m.to_csv(&names));

    let report = ForgettingReport::from_matrix(&m, &labels)?;
    for e in &report.entries {
        println!(
            "{:<8} after {:<8} {}   (chance {:.3})",
            names[e.task],
            names[e.after],
            format_cell(e.rate, e.accuracy),
            random_baseline(labels[e.task])?
        );
    }
    // dropping below chance forgets more than everything
    println!("below chance: {:.2}%", forgetting_rate(0.92, 0.30, 1.0 / 3.0)?);
    match forgetting_rate(0.5, 0.4, 0.5) {
        Ok(r) => println!("unexpected {r}"),
        Err(e) => println!("at chance: {e}"),
    }
    Ok(())
}
