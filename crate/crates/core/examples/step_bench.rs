//! Rough timing of one optimizer step at candidate model sizes.

use std::time::Instant;

use detect_core::data::{Window, WindowSet, WindowSource, CHANNELS};
use detect_core::model::{init_params, ModelConfig};
use detect_core::optim::{clip_global_norm, AdamW};
use detect_core::train::batch_tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_set(n: usize, window_len: usize) -> WindowSet {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let windows = (0..n)
        .map(|i| Window {
            values: (0..window_len * CHANNELS)
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect(),
            label: i % 3,
            source: WindowSource {
                patient_id: "p".into(),
                phase: detect_core::data::Phase::Pre,
                activity: detect_core::data::Activity::Walk,
                placement: detect_core::data::Placement::NondominantHand,
                trial: 1,
                start: i,
            },
        })
        .collect();
    WindowSet::new(
        windows,
        vec!["sit".into(), "walk".into(), "stairs".into()],
        window_len,
    )
}

fn main() {
    let set = toy_set(64, 100);
    for (m, heads, ffn, layers) in [(16, 2, 32, 1), (24, 2, 48, 1), (32, 2, 64, 1), (32, 4, 64, 1), (64, 4, 128, 2)] {
        let cfg = ModelConfig {
            latent_dim: m,
            num_heads: heads,
            ffn_dim: ffn,
            num_layers: layers,
            ..ModelConfig::default()
        };
        let mut bundle = init_params(&cfg, &set.class_names).unwrap();
        let names = bundle.params.names();
        let shapes = bundle.params.shapes();
        let mut opt = AdamW::new(&bundle.params.sizes(), 0.001, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let indices: Vec<usize> = (0..32).collect();

        let steps = 10;
        let t0 = Instant::now();
        for step in 0..steps {
            let (batch, labels) = batch_tensor(&set, &indices);
            let mut pass =
                detect_core::model::forward(&bundle, &batch, true, Some(&mut rng)).unwrap();
            let loss = pass
                .graph
                .smoothed_cross_entropy(pass.logits, &labels, 0.1)
                .unwrap();
            pass.graph.backward(loss).unwrap();
            let mut grads: Vec<Vec<f64>> = pass
                .param_nodes
                .iter()
                .map(|n| pass.graph.grad(*n).unwrap().to_vec())
                .collect();
            clip_global_norm(&names, &mut grads, 1.0).unwrap();
            let mut bufs = bundle.params.take_buffers();
            opt.step(&names, &mut bufs, &grads, 0.001).unwrap();
            bundle.params.restore_buffers(&shapes, bufs);
            let _ = step;
        }
        let per_step = t0.elapsed().as_secs_f64() / steps as f64;
        let steps_11800 = per_step * 11_800.0;
        println!(
            "m={m:2} heads={heads} ffn={ffn:3} L={layers}: {:7.2} ms/step -> full default run ~{:5.1} min",
            per_step * 1e3,
            steps_11800 / 60.0
        );
    }
}
