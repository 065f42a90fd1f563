//! One filtering step: score each client against the MAR forecast, keep the
//! most predictable ones, then amend the matrix before it enters the history.

use flsim::filter::{amend_matrix, filter_round, ClientId, FilterParams, UpdateMatrix};
use flsim::mar::HistoryWindow;
use flsim::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> flsim::Result<()> {
    let (d, m) = (6, 5);
    let ids: Vec<ClientId> = (0..m as u32).map(ClientId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // Every client drifts slowly towards zero.
    let start: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let at = |t: usize| -> Vec<Vec<f64>> {
        start
            .iter()
            .map(|c| c.iter().map(|x| x * 0.9f64.powi(t as i32)).collect())
            .collect()
    };
    let mut history = HistoryWindow::new(2)?;
    for t in 1..=2 {
        history.push(UpdateMatrix::new(Matrix::from_columns(&at(t)), ids.clone(), t)?)?;
    }

    // Round 3: client 3 sends something off its trajectory.
    let mut cols = at(3);
    cols[3].iter_mut().for_each(|x| *x += 2.0);
    let observed = UpdateMatrix::new(Matrix::from_columns(&cols), ids.clone(), 3)?;
    let global = vec![0.0; d];

    let outcome = filter_round(&history, &observed, &global, &FilterParams::new(m - 1))?;
    for e in &outcome.scores.entries {
        println!("client {}  score {:.4e}  ({:?})", e.client_id, e.score, e.basis);
    }
    let flagged = outcome.flagged(&observed);
    println!("kept {:?}, flagged {:?}", outcome.kept, flagged);

    let amended = amend_matrix(&observed, &flagged, history.newest(), &global);
    println!("client 3 column after amendment: {:?}", amended.column_of(ClientId(3)).unwrap());
    history.push(amended)?;
    Ok(())
}
