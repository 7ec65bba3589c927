//! The replay schedule, per-task stores and the buffer file.

use tamcl::data::{generate_task, SuiteSpec};
use tamcl::replay::{MemoryBuffer, ReplayConfig};

fn main() -> tamcl::Result<()> {
    let config = ReplayConfig::default();
    for steps in [99, 100, 250, 1000] {
        println!("{steps} steps per epoch -> {} replay steps", config.replays_per_epoch(steps));
    }
    let fired: Vec<usize> = (1..=250).filter(|&s| config.should_replay(s)).collect();
    println!("replay after steps {fired:?}");

    let suite = SuiteSpec::default_suite();
    let mut buffer = MemoryBuffer::new(config.clone(), 0)?;
    for (i, spec) in suite.tasks.iter().enumerate() {
        let (train, _) = generate_task(spec, suite.seed)?;
        let kept = buffer.store_task_samples(i, &train)?;
        println!("{}: kept {kept} of {}", spec.name, train.len());
    }

    for _ in 0..4 {
        let batch = buffer.get_batch(4).expect("buffer has tasks");
        let labels: Vec<u32> = batch.samples.iter().map(|s| s.label).collect();
        println!("replay batch from task {}: labels {labels:?}", batch.task);
    }

    let path = std::env::temp_dir().join("tamcl-example-buffer.bin");
    buffer.save(&path)?;
    let back = MemoryBuffer::load(&path, config, 0)?;
    println!(
        "saved {} samples to {}, reloaded {} across tasks {:?}",
        buffer.len(),
        path.display(),
        back.len(),
        back.tasks().collect::<Vec<_>>()
    );
    Ok(())
}
