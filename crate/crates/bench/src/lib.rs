//! Fixtures shared by the benchmarks.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wvtr_core::agent::{Agent, AgentConfig, UcrlWvtr};
use wvtr_core::env::{make_riverswim, sample_episode, RewardMode};

/// WVTR agent after `episodes` episodes on RiverSwim(`n_states`, `horizon`),
/// with a fresh plan for the next one.
pub fn warmed_agent(n_states: usize, horizon: usize, episodes: usize) -> UcrlWvtr {
    let mdp = make_riverswim(n_states, horizon, RewardMode::Raw).expect("valid riverswim");
    let mut agent = UcrlWvtr::for_mdp(AgentConfig::wvtr(), &mdp).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 0..episodes {
        let plan = agent.begin_episode().expect("plan");
        let traj = sample_episode(&mdp, &plan.policy, k, &mut rng);
        for (h, step) in traj.steps.iter().enumerate() {
            agent.observe(h, step).expect("observe");
        }
        agent.end_episode().expect("refit");
    }
    agent.begin_episode().expect("plan");
    agent
}

/// Random history of `n` points in the unit ball of `R^dim` with weights in `[σ_min, 1]`.
pub fn random_history(dim: usize, n: usize, sigma_min: f64, seed: u64) -> (Vec<DVector<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0));
            let v = v.normalize() * rng.random::<f64>();
            (v, rng.random_range(sigma_min..=1.0))
        })
        .unzip()
}
