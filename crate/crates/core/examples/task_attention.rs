//! Task tokens, the task-attention block and accumulated heads over a
//! four-task sequence.

use tamcl::autodiff::functional::softmax;
use tamcl::autodiff::{ParamStore, Tape};
use tamcl::rng::{normal_tensor, seeded};
use tamcl::task_attention::{
    accumulated_head_dims, compress_dual, interleave, ClassifierHead, TaskAttentionBlock, TaskToken,
};

fn main() {
    let width = 8;
    let labels = [3, 2, 7, 4];
    let mut store = ParamStore::new();
    let mut rng = seeded(5, 1);
    let tab = TaskAttentionBlock::new(&mut store, width, 2, 2, &mut rng).unwrap();

    let mut offset = 0;
    let mut tokens = Vec::new();
    let mut heads = Vec::new();
    for (i, &k) in labels.iter().enumerate() {
        tokens.push(TaskToken::new(&mut store, i, width, &mut rng).unwrap());
        let head = ClassifierHead::new(&mut store, i, k, offset, width, &mut rng).unwrap();
        offset = head.output_dim();
        heads.push(head);
    }
    println!("head widths {:?}", heads.iter().map(|h| h.output_dim()).collect::<Vec<_>>());
    println!("closed form  {:?}", accumulated_head_dims(&labels));

    let sequence = normal_tensor(&mut rng, &[6, width], 1.0);
    for (token, head) in tokens.iter().zip(&heads) {
        let mut tape = Tape::new();
        let s = tape.constant(sequence.clone());
        let tau = tape.param(&store, token.param);
        let out = tab.forward(&mut tape, &store, tau, Some(s)).unwrap();
        let logits = head.forward(&mut tape, &store, out.output).unwrap();
        let row = tape.value(logits).data().to_vec();
        let native = &row[head.offset..];
        let attn: Vec<String> = tape.value(out.attention[0]).data().iter().map(|a| format!("{a:.2}")).collect();
        println!(
            "task {}: head-0 attention [{}], prediction {} of {}",
            token.task,
            attn.join(" "),
            head.predict(&row).unwrap(),
            head.native_labels
        );
        let p = softmax(native).unwrap();
        println!("        native probabilities {:?}", p.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    }

    let a = [1.0, 5.0];
    let b = [3.0, 7.0];
    let joined = interleave(&a, &b).unwrap();
    println!("two branches {a:?} {b:?} -> {joined:?} -> {:?}", compress_dual(&joined).unwrap());
}
