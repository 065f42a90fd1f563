//! Predictability of honest vs GAUSS-poisoned model trajectories: average
//! time-delayed mutual information per client, then a one-tailed Welch test.

use flsim::metrics::{avg_tdmi, welch_one_tailed_t, DEFAULT_BINS, DEFAULT_DELAY};
use flsim::sim::{Experiment, ExperimentConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> flsim::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.set("T", "30")?;
    cfg.set("hidden", "32")?;
    let mut exp = Experiment::new(cfg)?;
    let ids: Vec<_> = exp.clients().iter().map(|c| c.client_id).collect();
    let idx = exp.sampled_indices().to_vec();

    // Honest trajectories from an attack-free run, and a poisoned copy of
    // each with one N(0, 10²) scalar added per round.
    let mut honest: Vec<Vec<Vec<f64>>> = vec![Vec::new(); ids.len()];
    let mut poisoned = honest.clone();
    let noise = Normal::new(0.0, 10.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in 1..=exp.config().rounds {
        for (c, (_, model)) in exp.train_selected(t, &ids).into_iter().enumerate() {
            let sampled: Vec<f64> = idx.iter().map(|&i| model[i]).collect();
            let eps = noise.sample(&mut rng);
            poisoned[c].push(sampled.iter().map(|x| x + eps).collect());
            honest[c].push(sampled);
        }
        exp.run_round()?;
    }

    let score = |trajs: &[Vec<Vec<f64>>]| -> flsim::Result<Vec<f64>> {
        trajs.iter().map(|t| avg_tdmi(t, DEFAULT_DELAY, DEFAULT_BINS)).collect()
    };
    let (a, b) = (score(&honest)?, score(&poisoned)?);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test = welch_one_tailed_t(&a, &b)?;
    println!("mean avg-TDMI: honest {:.4}, poisoned {:.4}", mean(&a), mean(&b));
    println!("Welch t = {:.3}, dof = {:.1}, one-tailed p = {:.3e}", test.statistic, test.dof, test.p_value);
    Ok(())
}
