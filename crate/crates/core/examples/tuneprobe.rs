use pulsemap_core::dataset::{prepare_examples, TransformOptions};
use pulsemap_core::model::TransformerConfig;
use pulsemap_core::train::{pretrain_loop, synth_generate, ClassScheme, SynthSpec, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let d_dec: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let noise: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.05);

    let spec = SynthSpec { n_subjects: 2, per_subject: 4, scheme: ClassScheme::DeapBinary, noise, ..SynthSpec::default() };
    let data = synth_generate(&spec, 42).unwrap();
    let mut config = TransformerConfig::desk();
    config.d_decoder = d_dec;
    let prepared = prepare_examples(&data, &config, &TransformOptions::default()).unwrap();
    let train = TrainConfig { base_lr: lr, total_steps: 200, seed: 7, ..TrainConfig::desk() };
    let outcome = pretrain_loop(&prepared, &config, &train, None, None).unwrap();
    let first = outcome.trace.first().unwrap();
    let last = outcome.trace.last().unwrap();

    let mut correct = 0;
    let n = prepared.len();
    for i in 0..n {
        let p = pulsemap_core::model::pair_matching_probability(&prepared[i].face, &prepared[i].bio, &outcome.params, &config).unwrap();
        if p > 0.5 { correct += 1; }
        let j = (i + 1) % n;
        let p = pulsemap_core::model::pair_matching_probability(&prepared[j].face, &prepared[i].bio, &outcome.params, &config).unwrap();
        if p <= 0.5 { correct += 1; }
    }
    println!("lr={lr:.0e} d_dec={d_dec} noise={noise}: ratio {:.3} (l_m {:.0}->{:.0}, l_c {:.3}->{:.3}) match {}/{}",
        last.total / first.total, first.l_m, last.l_m, first.l_c, last.l_c, correct, 2 * n);
}
