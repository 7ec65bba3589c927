//! Trains the full method over the first three default tasks and prints the
//! accuracy matrix and forgetting rates.
//!
//! `TAMCL_LOG=info cargo run --release --example train_tamcl`

use tamcl::data::{generate_task, SuiteSpec};
use tamcl::metrics::format_cell;
use tamcl::trainer::{run_sequence, ExperimentPlan, PlannedTask, TrainConfig};

fn main() -> tamcl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(tamcl::cli::LOG_ENV, "info")).init();
    let suite = SuiteSpec::default_suite();
    let tasks = suite.tasks[..3]
        .iter()
        .map(|s| generate_task(s, suite.seed).map(|(train, test)| PlannedTask::new(train, test)))
        .collect::<tamcl::Result<Vec<_>>>()?;
    let plan = ExperimentPlan::new(tasks)?;

    let mut config = TrainConfig::default();
    config.optimizer.lr = 1e-3;
    let result = run_sequence(&plan, &config)?;

    let names = result.task_names();
    print!("{}", result.accuracy.to_csv(&names));
    let last = result.accuracy.len() - 1;
    for j in 0..last {
        let e = result.forgetting.get(j, last).unwrap();
        println!("{} after {}: {}", names[j], names[last], format_cell(e.rate, e.accuracy));
    }
    Ok(())
}
