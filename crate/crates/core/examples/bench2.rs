use std::time::Instant;

use cosearch::environment::{EnvParams, ObservationConfig, SceneSpec};
use cosearch::learner::{train, Population, TrainConfig};
use cosearch::qnet::{HeadMode, JointModel, ModelConfig};
use rand::rngs::StdRng;
use rand::SeedableRng;

fn main() {
    let spec = SceneSpec {
        num_classes: 1,
        size_range: vec![(0.12, 0.3)],
        class_intensities: vec![0.9],
        num_distractors: 0,
        pixel_noise_std: 0.0,
        intensity_jitter_std: 0.0,
        ..SceneSpec::default()
    };
    let pop = Population::new(spec, ObservationConfig::default(), EnvParams::default());
    let mut model = JointModel::new(
        ModelConfig {
            n_agents: 1,
            input_dim: 158,
            hidden_dim: 64,
            head_mode: HeadMode::Linear,
            with_channels: false,
        },
        &mut StdRng::seed_from_u64(1),
    )
    .unwrap();
    let cfg = TrainConfig {
        episodes: 100,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let log = train(&mut model, &pop, &cfg, &mut StdRng::seed_from_u64(2)).unwrap();
    let steps: usize = log.episodes.iter().map(|e| e.steps_used).sum();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "train: {:.2} s for {} episodes / {} env steps -> {:.2} ms/env-step, grad steps {}",
        dt,
        log.episodes.len(),
        steps,
        dt / steps as f64 * 1e3,
        log.grad_steps
    );
}
