//! The untargeted poisoning attacks applied to one round of benign updates.

use std::collections::BTreeSet;

use flsim::aggregators::Aggregator;
use flsim::attacks::{
    attack_agr_mm, attack_gauss, attack_lie, attack_opt, AttackContext, ModelSet, Perturbation, DEFAULT_GAMMA_INIT,
    DEFAULT_LAMBDA_INIT, DEFAULT_SIGMA, DEFAULT_TAU,
};
use flsim::filter::ClientId;
use flsim::linalg::sq_dist;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, models: &ModelSet, mean: &[f64]) {
    for (id, v) in models {
        println!("{name:<7} client {id}: squared distance to benign mean {:.3e}", sq_dist(v, mean));
    }
}

fn main() -> flsim::Result<()> {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let benign: ModelSet = (0..8u32)
        .map(|i| (ClientId(i), (0..d).map(|_| 0.5 + rng.random_range(-0.1..0.1)).collect()))
        .collect();
    let own: ModelSet = (8..10u32).map(|i| (ClientId(i), vec![0.5; d])).collect();
    let malicious: BTreeSet<ClientId> = own.iter().map(|(id, _)| *id).collect();
    let mean: Vec<f64> = (0..d).map(|j| benign.iter().map(|(_, v)| v[j]).sum::<f64>() / 8.0).collect();
    let ctx = AttackContext::new(benign, malicious, vec![0.0; d], 99)?;

    report("gauss", &attack_gauss(&ctx, &own, DEFAULT_SIGMA, false)?, &mean);
    report("lie", &attack_lie(&ctx)?, &mean);
    let opt = attack_opt(&ctx, DEFAULT_TAU, DEFAULT_LAMBDA_INIT, &Aggregator::FedMedian)?;
    println!("opt: lambda={} after {} evaluations", opt.search.value, opt.search.evaluations);
    report("opt", &opt.models, &mean);
    let mm = attack_agr_mm(&ctx, DEFAULT_TAU, DEFAULT_GAMMA_INIT, Perturbation::InvStd)?;
    println!("agr-mm: gamma={} after {} evaluations", mm.search.value, mm.search.evaluations);
    report("agr_mm", &mm.models, &mean);
    Ok(())
}
