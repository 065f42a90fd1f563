//! Fit MAR(1) coefficients on a noiseless matrix series and forecast the
//! next matrix.

use flsim::filter::{ClientId, UpdateMatrix};
use flsim::linalg::frobenius_norm_sq;
use flsim::mar::{estimate_mar, forecast, mar_loss, HistoryWindow};
use flsim::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn main() -> flsim::Result<()> {
    let (d, m, l) = (10, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Near-identity true dynamics keep the series bounded.
    let mut a = random(d, d, 0.05, &mut rng);
    a.add_diagonal(0.95);
    let mut b = random(m, m, 0.05, &mut rng);
    b.add_diagonal(1.0);

    let ids: Vec<ClientId> = (0..m as u32).map(ClientId).collect();
    let mut theta = random(d, m, 1.0, &mut rng);
    let mut series = Vec::new();
    for t in 1..=l + 1 {
        series.push(UpdateMatrix::new(theta.clone(), ids.clone(), t)?);
        theta = a.matmul(&theta).matmul(&b);
    }
    let truth = series.pop().unwrap();
    let window = HistoryWindow::from_matrices(series)?;

    let model = estimate_mar(&window, 100, 0.0, 0.0)?;
    let next = forecast(&model, window.newest().unwrap())?;
    let rel = (frobenius_norm_sq(&next.values.sub(&truth.values)) / frobenius_norm_sq(&truth.values)).sqrt();
    println!("window {l} matrices of {d}x{m}, ALS iterations used: {}", model.iters_used);
    println!("training loss        {:.3e}", mar_loss(&model, &window)?);
    println!("relative forecast error {rel:.3e}");
    Ok(())
}
