//! Runs every method on a shortened three-task sequence and prints the
//! comparison table the `report` verb writes.
//!
//! `cargo run --release --example compare_methods -- [train_samples]`

use tamcl::data::{generate_task, SuiteSpec};
use tamcl::report::build_report;
use tamcl::trainer::{run_sequence, ExperimentPlan, Method, PlannedTask, TrainConfig};

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

    let mut results = Vec::new();
    for method in [Method::Finetune, Method::Ewc, Method::Er, Method::Tamcl] {
        let mut config = TrainConfig {
            method,
            ..TrainConfig::default()
        };
        config.optimizer.lr = 1e-3;
        println!("training {method}...");
        results.push(run_sequence(&plan, &config)?);
    }
    print!("{}", build_report(&results)?.to_table());
    Ok(())
}
