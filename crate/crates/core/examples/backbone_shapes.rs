//! Runs the desk backbone on one generated sample and prints the shapes of
//! the fused sequence, the attention maps and the pooled task output.

use tamcl::autodiff::Tape;
use tamcl::data::{generate_task, SuiteSpec};
use tamcl::model::{ModelConfig, TamClModel, TaskInfo};
use tamcl::backbone::{BackboneConfig, InputGeometry};
use tamcl::trainer::PlannedTask;

fn main() {
    let suite = SuiteSpec::default_suite();
    let spec = &suite.tasks[1];
    let (train, test) = generate_task(spec, suite.seed).unwrap();
    let task = PlannedTask::new(train, test);
    let geometry = InputGeometry {
        image_height: spec.image_height,
        image_width: spec.image_width,
        channels: spec.channels,
        vocab_size: spec.vocab_size,
        max_text_len: spec.text_len_max,
    };
    let config = BackboneConfig::default();
    println!("backbone: {config:?}");
    println!("patches per image: {}", geometry.num_patches(config.patch_size));

    let mut model = TamClModel::new(ModelConfig {
        backbone: config,
        geometry,
        use_tab: true,
        accumulate_heads: true,
        seed: 0,
    })
    .unwrap();
    model
        .begin_task(TaskInfo {
            name: spec.name.clone(),
            label_count: spec.label_count,
            dual_image: spec.dual_image,
        })
        .unwrap();

    let sample = &task.train.samples[0];
    println!("sample: {} tokens, two images: {}", sample.tokens.len(), sample.second_image.is_some());

    let mut tape = Tape::new();
    let enc = model
        .backbone()
        .forward(&mut tape, model.store(), &sample.image, &sample.tokens)
        .unwrap();
    println!("s^D: {:?}", tape.shape(enc.output));
    for (d, heads) in enc.attention.iter().enumerate() {
        println!("block {d}: {} heads of {:?}", heads.len(), tape.shape(heads[0]));
    }

    let out = model.forward(&mut tape, sample, 0).unwrap();
    println!("branches: {:?}", out.representations.iter().map(|r| tape.shape(*r)).collect::<Vec<_>>());
    println!("logits: {:?} -> {:?}", tape.shape(out.logits), tape.value(out.logits).data());
    println!("parameters: {} tensors, {} values", model.store().len(), model.store().num_values());
}
