//! Non-iid client shards from a Dirichlet label prior, for a few
//! concentrations.

use flsim::sim::data::synthetic;
use flsim::sim::{partition_dirichlet, SyntheticSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> flsim::Result<()> {
    let (train, _) = synthetic(&SyntheticSpec::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    for alpha in [0.1, 0.5, 100.0] {
        let clients = partition_dirichlet(&train, 5, alpha, &mut ChaCha8Rng::seed_from_u64(1))?;
        println!("alpha_d = {alpha}");
        for c in &clients {
            println!("  client {}: class counts {:?}", c.client_id, c.data.class_counts());
        }
    }
    Ok(())
}
