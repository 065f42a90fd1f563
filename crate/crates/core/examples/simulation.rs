//! End-to-end runs on the synthetic task: GAUSS at r = 0.8 against plain
//! FedAvg, the same with the MAR filter in front, and an attack-free
//! baseline.

use flsim::sim::{run_experiment, ExperimentConfig};

fn main() -> flsim::Result<()> {
    let mut base = ExperimentConfig::default();
    base.set("hidden", "32")?;
    base.set("T", "10")?;

    let cases = [
        ("no attack", "none", "0", "false"),
        ("gauss, fedavg", "gauss", "0.8", "false"),
        ("gauss, filter+fedavg", "gauss", "0.8", "true"),
    ];
    for (label, attack, r, filter) in cases {
        let mut cfg = base.clone();
        cfg.set("attack", attack)?;
        cfg.set("r", r)?;
        cfg.set("filter_enabled", filter)?;
        let s = run_experiment(&cfg)?.summary;
        println!(
            "{label:<22} best acc {:.3}  final acc {:.3}  P {:.3}  R {:.3}",
            s.best_accuracy, s.final_accuracy, s.precision, s.recall
        );
    }
    Ok(())
}
