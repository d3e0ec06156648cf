//! Finite-difference verification of the full joint TD loss gradient:
//! trunk, own head, gate, and message paths all at once, over many random
//! seeds and both head modes.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::environment::AgentState;
use crate::error::Result;
use crate::numerics::{finite_difference_gradient, relative_error};
use crate::qnet::{GradRoute, HeadMode, JointModel, ModelConfig};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub passed: bool,
}

impl std::fmt::Display for GradcheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} gradients over {} seeds, max rel err {:.3e} ({})",
            if self.passed { "pass" } else { "FAIL" },
            self.checked,
            self.seeds,
            self.max_rel_err,
            self.worst_param
        )
    }
}

/// One seed of the check: a random small joint model, random states, and a
/// squared TD loss on one action component. Returns
/// `(max relative error, gradients checked, worst parameter)`.
pub fn joint_td_gradcheck(seed: u64, head_mode: HeadMode) -> Result<(f64, usize, String)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let cfg = ModelConfig {
        n_agents: 2,
        input_dim: 12,
        hidden_dim: 7,
        head_mode,
        with_channels: true,
    };
    let mut model = JointModel::new(cfg, &mut rng)?;
    let s0 = AgentState {
        values: (0..cfg.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let s1 = AgentState {
        values: (0..cfg.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let states = [Some(&s0), Some(&s1)];
    let receiver = rng.gen_range(0..2);
    let action = rng.gen_range(0..9);
    let y: f64 = rng.gen_range(-1.0..1.0);

    let probe = model.clone();
    let loss = move |p: &crate::numerics::ParameterSet| {
        let f = probe.q_forward_with_params(p, receiver, &states).unwrap();
        0.5 * (f.q()[action] - y).powi(2)
    };
    let numeric = finite_difference_gradient(loss, model.params(), 1e-5)?;

    let cache = model.q_forward(receiver, &states)?;
    let td = cache.q()[action] - y;
    model.q_backward(&cache, action, td, GradRoute::All)?;

    let mut max_rel = 0.0;
    let mut checked = 0;
    let mut worst = String::from("-");
    for (name, fd) in &numeric {
        let analytic = model.params().grad(name);
        for (idx, (&a, &n)) in analytic.values().iter().zip(fd.values()).enumerate() {
            if a.abs() > GRAD_FLOOR {
                let rel = relative_error(a, n);
                checked += 1;
                if rel > max_rel {
                    max_rel = rel;
                    worst = format!("{name}[{idx}]");
                }
            }
        }
    }
    Ok((max_rel, checked, worst))
}

/// Runs the check over `n_seeds` seeds, alternating head modes.
pub fn run_gradcheck_suite(n_seeds: usize, base_seed: u64) -> Result<GradcheckOutcome> {
    let mut outcome = GradcheckOutcome {
        seeds: n_seeds,
        checked: 0,
        max_rel_err: 0.0,
        worst_param: "-".into(),
        passed: true,
    };
    for k in 0..n_seeds {
        let head_mode = if k % 2 == 0 { HeadMode::Linear } else { HeadMode::Faithful };
        let (max_rel, checked, worst) = joint_td_gradcheck(base_seed + k as u64, head_mode)?;
        outcome.checked += checked;
        if max_rel > outcome.max_rel_err {
            outcome.max_rel_err = max_rel;
            outcome.worst_param = format!("seed {}: {}", base_seed + k as u64, worst);
        }
    }
    outcome.passed = outcome.max_rel_err < GRADCHECK_TOLERANCE && outcome.checked > 0;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_handful_of_seeds() {
        let outcome = run_gradcheck_suite(4, 1000).unwrap();
        assert!(outcome.passed, "{outcome}");
        assert!(outcome.checked > 500);
    }
}
