//! Every aggregation rule on the same set of updates, two of them corrupted.

use flsim::aggregators::{AggregationInput, Aggregator};
use flsim::filter::ClientId;

fn main() -> flsim::Result<()> {
    let mut columns: Vec<(ClientId, Vec<f64>)> = (0..9u32)
        .map(|i| (ClientId(i), vec![1.0 + 0.01 * i as f64, -0.5 + 0.02 * i as f64]))
        .collect();
    columns.push((ClientId(9), vec![50.0, 50.0]));
    columns.push((ClientId(10), vec![-40.0, 30.0]));
    let input = AggregationInput::new(columns)?;

    for spec in ["fedavg", "fedmedian", "trimmed_mean:beta=0.2", "multi_krum", "bulyan", "dnc"] {
        let rule: Aggregator = spec.parse()?;
        let out = rule.with_num_malicious(2).aggregate(&input, 7)?;
        println!(
            "{:<14} [{:>8.4}, {:>8.4}]  contributors {}",
            rule.name(),
            out.model[0],
            out.model[1],
            out.contributors.len()
        );
    }
    Ok(())
}
