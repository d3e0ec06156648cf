use cosearch::environment::{generate_scene, AgentState, EnvParams, EpisodeState, ObservationConfig, SceneSpec};
use cosearch::learner::select_actions;
use cosearch::qnet::JointModel;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() {
    let model = JointModel::load_checkpoint(std::path::Path::new("/tmp/e4/checkpoint.ckpt")).unwrap();
    let spec = SceneSpec {
        num_classes: 1,
        size_range: vec![(0.12, 0.3)],
        class_intensities: vec![0.9],
        ..SceneSpec::default()
    };
    let mut rng = StdRng::seed_from_u64(9999);
    for ep_i in 0..6 {
        let scene = generate_scene(&spec, &mut rng).unwrap();
        let seed: u64 = rng.gen();
        let mut ep = EpisodeState::new(scene, ObservationConfig::default(), EnvParams::default(), 1, seed);
        while !ep.all_done() {
            let states = ep.current_states();
            let refs: Vec<Option<&AgentState>> = states.iter().map(Option::as_ref).collect();
            let live = vec![!ep.is_done(0)];
            let acts = select_actions(&model, &refs, &live, 0.0, &mut rng).unwrap();
            ep.env_step(&acts).unwrap();
        }
        let states = ep.current_states();
        let refs: Vec<Option<&AgentState>> = states.iter().map(Option::as_ref).collect();
        let f = model.q_forward(0, &refs).unwrap();
        let q: Vec<String> = f.q().iter().map(|v| format!("{v:+.2}")).collect();
        println!(
            "ep {ep_i}: final iou {:.2} steps {} gate {:.3} q=[{}]",
            ep.current_iou(0),
            ep.t(),
            f.gate(),
            q.join(" ")
        );
    }
}
