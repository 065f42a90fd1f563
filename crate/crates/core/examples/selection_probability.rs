//! Chance that a round's uniform client sample contains at least one
//! malicious client.

use flsim::metrics::prob_at_least_one_malicious;

fn main() -> flsim::Result<()> {
    let k = 100;
    println!("K = {k}");
    println!("{:>4} {:>8} {:>8} {:>8}", "b", "m=10", "m=20", "m=50");
    for b in [1, 5, 10, 20] {
        let row: Vec<String> = [10, 20, 50]
            .iter()
            .map(|&m| prob_at_least_one_malicious(k, b, m).map(|p| format!("{p:8.4}")))
            .collect::<flsim::Result<_>>()?;
        println!("{b:>4} {}", row.join(" "));
    }
    Ok(())
}
