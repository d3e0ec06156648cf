use std::collections::BTreeMap;
use std::rc::Rc;
use std::time::Instant;

use cosearch::environment::AgentState;
use cosearch::learner::{train_step_actual, TrainConfig, Transition};
use cosearch::qnet::{HeadMode, JointModel, ModelConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() {
    let mut rng = StdRng::seed_from_u64(0);

    // raw gemv-equivalent throughput via the public forward path
    let cfg = ModelConfig {
        n_agents: 1,
        input_dim: 158,
        hidden_dim: 64,
        head_mode: HeadMode::Linear,
        with_channels: false,
    };
    let model = JointModel::new(cfg, &mut rng).unwrap();
    let s = AgentState { values: (0..158).map(|_| rng.gen_range(0.0..1.0)).collect() };
    let states = [Some(&s)];
    let n = 20000u64;
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..n {
        sink += model.q_forward(0, &states).unwrap().q()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = n as f64 * (158.0 * 64.0 + 64.0 * 64.0 + 64.0 * 9.0 + 9.0);
    println!("forward: {:.1} kfwd/s, {:.2} GMAC/s (sink {sink:.3})", n as f64 / dt / 1e3, macs / dt / 1e9);

    // full train step
    let mut model = JointModel::new(cfg, &mut rng).unwrap();
    let t = Rc::new(Transition {
        state: s.clone(),
        action: 2,
        reward: 1.0,
        next_state: AgentState { values: (0..158).map(|_| rng.gen_range(0.0..1.0)).collect() },
        terminal: false,
        peers: BTreeMap::new(),
        scene_classes: vec![0],
    });
    let batch: Vec<_> = (0..32).map(|_| Rc::clone(&t)).collect();
    let tc = TrainConfig::default();
    let steps = 1000;
    let t0 = Instant::now();
    for _ in 0..steps {
        train_step_actual(&mut model, 0, &batch, &tc).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs_per_step = 32.0 * (2.0 * 14700.0 + 2.0 * 29400.0);
    println!("train_step: {:.2} ms/step, {:.2} GMAC/s", dt / steps as f64 * 1e3, steps as f64 * macs_per_step / dt / 1e9);
}
