//! Writes the default synthetic suite and summarizes it.
//!
//! `cargo run --example generate_suite -- [out_dir]`

use std::path::PathBuf;

use tamcl::data::{load_dataset, write_suite, SuiteSpec};
use tamcl::metrics::difficulty_score;

fn main() -> tamcl::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tamcl-suite"));
    let suite = SuiteSpec::default_suite();
    let manifest = write_suite(&suite, &out)?;
    println!("wrote {} (seed {})", out.display(), manifest.seed);
    for t in &manifest.tasks {
        let train = load_dataset(&out.join(&t.train))?;
        let hist = train.label_histogram();
        println!(
            "{:<8} {} labels{:<12} difficulty {:>7.2}  train histogram {:?}",
            t.name,
            t.label_count,
            if t.dual_image { ", two images" } else { "" },
            difficulty_score(t.train_pairs + t.test_pairs, t.label_count)?,
            hist
        );
    }
    let first = load_dataset(&out.join(&manifest.tasks[0].train))?;
    let s = &first.samples[0];
    println!("first sample: label {}, tokens {:?}, pixels {:?}...", s.label, s.tokens, &s.image.data[..4]);
    Ok(())
}
