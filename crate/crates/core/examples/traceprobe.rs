use pulsemap_core::dataset::{prepare_examples, TransformOptions};
use pulsemap_core::model::TransformerConfig;
use pulsemap_core::train::{pretrain_loop, synth_generate, ClassScheme, SynthSpec, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
    let spec = SynthSpec { n_subjects: 2, per_subject: 4, scheme: ClassScheme::DeapBinary, ..SynthSpec::default() };
    let data = synth_generate(&spec, 42).unwrap();
    let config = TransformerConfig::desk();
    let prepared = prepare_examples(&data, &config, &TransformOptions::default()).unwrap();
    let train = TrainConfig { base_lr: lr, total_steps: steps, seed: 7, ..TrainConfig::desk() };
    let outcome = pretrain_loop(&prepared, &config, &train, None, None).unwrap();
    for r in outcome.trace.iter().step_by((steps / 20).max(1)) {
        println!("step {:4}  l_m {:9.3}  l_c {:7.4}  total {:9.3}  lr {:.2e}", r.step, r.l_m, r.l_c, r.total, r.lr);
    }
    let last = outcome.trace.last().unwrap();
    println!("final ratio {:.4}", last.total / outcome.trace[0].total);
}
