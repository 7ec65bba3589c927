//! Saves a trained model, reloads it and checks that predictions agree.

use tamcl::data::{generate_task, SuiteSpec};
use tamcl::model::TamClModel;
use tamcl::trainer::{evaluate, Method, PlannedTask, TrainConfig, Trainer};

fn main() -> tamcl::Result<()> {
    let suite = SuiteSpec::default_suite();
    let spec = &suite.tasks[0];
    let (mut train, test) = generate_task(spec, suite.seed)?;
    train.samples.truncate(300);
    let task = PlannedTask::new(train, test);

    let mut config = TrainConfig {
        method: Method::Tamcl,
        ..TrainConfig::default()
    };
    config.optimizer.lr = 1e-3;
    let geometry = tamcl::trainer::ExperimentPlan::new(vec![task.clone()])?.geometry()?;
    let mut trainer = Trainer::new(config, geometry)?;
    trainer.begin_task(task.info(), None)?;
    trainer.train_task(&task.train, 2)?;
    trainer.end_task(&task.train)?;

    let path = std::env::temp_dir().join("tamcl-example.ckpt");
    trainer.model().save(&path)?;
    let loaded = TamClModel::load(&path)?;
    let before = evaluate(trainer.model(), &task.test, 0)?;
    let after = evaluate(&loaded, &task.test, 0)?;
    let same = task
        .test
        .samples
        .iter()
        .all(|s| trainer.model().predict(s, 0).ok() == loaded.predict(s, 0).ok());
    println!(
        "{} bytes at {}; accuracy {before:.4} before, {after:.4} after; identical predictions: {same}",
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        path.display()
    );
    println!("tasks in checkpoint: {:?}", loaded.tasks().iter().map(|t| &t.name).collect::<Vec<_>>());
    Ok(())
}
