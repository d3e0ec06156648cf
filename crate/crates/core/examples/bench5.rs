use cosearch::environment::*;
use cosearch::learner::select_actions;
use cosearch::qnet::JointModel;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() {
    let model = JointModel::load_checkpoint(std::path::Path::new("/tmp/ec/checkpoint.ckpt")).unwrap();
    let spec = SceneSpec {
        num_classes: 1,
        size_range: vec![(0.25, 0.45)],
        class_intensities: vec![0.9],
        pixel_noise_std: 0.0,
        intensity_jitter_std: 0.0,
        ..SceneSpec::default()
    };
    let mut rng = StdRng::seed_from_u64(4242);
    // force a box onto the target and look at Q(trigger) as overlap varies
    for _ in 0..4 {
        let scene = generate_scene(&spec, &mut rng).unwrap();
        let g = scene.ground_truth[0].unwrap();
        let seed: u64 = rng.gen();
        let mut ep = EpisodeState::new(scene.clone(), ObservationConfig::default(), EnvParams::default(), 1, seed);
        // run greedy policy, print q(trigger) & max q per step
        let mut line = String::new();
        while !ep.all_done() {
            let states = ep.current_states();
            let refs: Vec<Option<&AgentState>> = states.iter().map(Option::as_ref).collect();
            let f = model.q_forward(0, &refs).unwrap();
            line.push_str(&format!(
                "({:.2} {:+.1}/{:+.1}) ",
                ep.current_iou(0),
                f.q()[8],
                f.max_q()
            ));
            let live = vec![!ep.is_done(0)];
            let acts = select_actions(&model, &refs, &live, 0.0, &mut rng).unwrap();
            ep.env_step(&acts).unwrap();
            if ep.t() >= 14 { break; }
        }
        println!("iou q_trig/q_max: {line}");
        println!("  gt box w={:.2} h={:.2}", g.w, g.h);
    }
}
