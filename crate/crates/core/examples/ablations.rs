//! The full method next to each single-component ablation.
//!
//! `cargo run --release --example ablations -- [train_samples]`

use tamcl::data::{generate_task, SuiteSpec};
use tamcl::report::build_report;
use tamcl::trainer::{run_sequence, Ablation, ExperimentPlan, Method, PlannedTask, TrainConfig};

fn main() -> tamcl::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(400);
    let suite = SuiteSpec::default_suite();
    let mut tasks = Vec::new();
    for spec in &suite.tasks[..3] {
        let (mut train, test) = generate_task(spec, suite.seed)?;
        train.samples.truncate(n);
        tasks.push(PlannedTask::new(train, test));
    }
    let plan = ExperimentPlan::new(tasks)?;

    let ablations = [
        Ablation::default(),
        Ablation { disable_ikd: true, ..Ablation::default() },
        Ablation { disable_tab: true, ..Ablation::default() },
        Ablation { disable_replay: true, ..Ablation::default() },
        Ablation { disable_diversity: true, ..Ablation::default() },
    ];
    let mut results = Vec::new();
    for ablation in ablations {
        let mut config = TrainConfig {
            method: Method::Tamcl,
            ablation,
            ..TrainConfig::default()
        };
        config.optimizer.lr = 1e-3;
        let r = run_sequence(&plan, &config)?;
        println!("{:?}", r.flags);
        results.push(r);
    }
    print!("{}", build_report(&results)?.to_table());
    Ok(())
}
