use std::time::Instant;

use cosearch::harness::config::parse_config;
use cosearch::harness::experiment::{run_experiment, train_model};

fn main() {
    let text = std::fs::read_to_string("/tmp/c4small.toml").unwrap();
    let cfg = parse_config(&text).unwrap();

    let t0 = Instant::now();
    let (_model, log, _) = train_model(&cfg, None).unwrap();
    println!("train_model: {:.2} s ({} episodes)", t0.elapsed().as_secs_f64(), log.episodes.len());

    let t0 = Instant::now();
    run_experiment(&cfg, std::path::Path::new("/tmp/bench3_out")).unwrap();
    println!("run_experiment: {:.2} s", t0.elapsed().as_secs_f64());
}
