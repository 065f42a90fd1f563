//! Reference implementations and measurement helpers shared by the oracle
//! tests and the acceptance report.

#![allow(dead_code)]

use std::collections::BTreeSet;

use flsim::aggregators::AggregationInput;
use flsim::filter::{ClientId, UpdateMatrix};
use flsim::linalg::{frobenius_norm_sq, sq_dist};
use flsim::mar::{estimate_mar, forecast, mar_loss, HistoryWindow, MarModel};
use flsim::sim::data::Dataset;
use flsim::sim::model::Architecture;
use flsim::Matrix;
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z })
        .collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn ids(m: usize) -> Vec<ClientId> {
    (0..m as u32).map(ClientId).collect()
}

pub fn window_of(mats: Vec<Matrix>) -> HistoryWindow {
    let m = mats[0].cols();
    let ums = mats
        .into_iter()
        .enumerate()
        .map(|(t, v)| UpdateMatrix::new(v, ids(m), t + 1).unwrap())
        .collect();
    HistoryWindow::from_matrices(ums).unwrap()
}

// ---- MAR recovery ----

/// Noiseless `Θ_t = A*·Θ_{t−1}·B*` with stable, well-mixed coefficients.
/// Returns the window of `l` matrices and the true next matrix.
pub fn noiseless_mar_series(d: usize, m: usize, l: usize, seed: u64) -> (HistoryWindow, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = gaussian(d, d, 0.3 / (d as f64).sqrt(), &mut rng);
    a.add_diagonal(0.7);
    let mut b = gaussian(m, m, 0.3 / (m as f64).sqrt(), &mut rng);
    b.add_diagonal(0.7);
    let mut theta = gaussian(d, m, 1.0, &mut rng);
    let mut series = Vec::with_capacity(l + 1);
    for _ in 0..=l {
        series.push(theta.clone());
        theta = a.matmul(&theta).matmul(&b);
    }
    let truth = series.pop().unwrap();
    (window_of(series), truth)
}

/// Relative Frobenius error of the one-step forecast after `iters` ALS sweeps.
pub fn mar_recovery_error(seed: u64, iters: usize) -> f64 {
    let (window, truth) = noiseless_mar_series(10, 8, 8, seed);
    let model = estimate_mar(&window, iters, 0.0, 0.0).unwrap();
    let next = forecast(&model, window.newest().unwrap()).unwrap();
    (frobenius_norm_sq(&next.values.sub(&truth)) / frobenius_norm_sq(&truth)).sqrt()
}

// ---- ALS vs gradient descent ----

/// `Θ_t = A*·Θ_{t−1}·B* + noise·E_t` with the same coefficient law as
/// [`noiseless_mar_series`].
pub fn noisy_mar_window(d: usize, m: usize, l: usize, noise: f64, seed: u64) -> HistoryWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = gaussian(d, d, 0.3 / (d as f64).sqrt(), &mut rng);
    a.add_diagonal(0.7);
    let mut b = gaussian(m, m, 0.3 / (m as f64).sqrt(), &mut rng);
    b.add_diagonal(0.7);
    let mut theta = gaussian(d, m, 1.0, &mut rng);
    let mut series = Vec::with_capacity(l);
    for _ in 0..l {
        series.push(theta.clone());
        theta = a.matmul(&theta).matmul(&b).add(&gaussian(d, m, noise, &mut rng));
    }
    window_of(series)
}

fn pairs(w: &HistoryWindow) -> Vec<(Matrix, Matrix)> {
    let mats: Vec<Matrix> = w.iter().map(|u| u.values.clone()).collect();
    mats.windows(2).map(|p| (p[0].clone(), p[1].clone())).collect()
}

fn loss_of(pairs: &[(Matrix, Matrix)], a: &Matrix, b: &Matrix) -> f64 {
    pairs
        .iter()
        .map(|(x, y)| frobenius_norm_sq(&y.sub(&a.matmul(x).matmul(b))))
        .sum()
}

/// Sweep cap that lets ALS stop on its own movement tolerance.
pub const ALS_CONVERGED_BUDGET: usize = 200_000;

/// Gradient descent with Armijo backtracking from `(a, b)`.
fn gd_from(pairs: &[(Matrix, Matrix)], mut a: Matrix, mut b: Matrix, iters: usize) -> f64 {
    let (d, m) = pairs[0].0.shape();
    let mut f = loss_of(pairs, &a, &b);
    let mut step = 1e-2;
    for _ in 0..iters {
        let mut ga = Matrix::zeros(d, d);
        let mut gb = Matrix::zeros(m, m);
        for (x, y) in pairs {
            let r = a.matmul(x).matmul(&b).sub(y);
            ga.add_assign(&r.matmul_t(&x.matmul(&b)).scale(2.0));
            gb.add_assign(&a.matmul(x).t_matmul(&r).scale(2.0));
        }
        let g2 = frobenius_norm_sq(&ga) + frobenius_norm_sq(&gb);
        if g2 < 1e-30 {
            break;
        }
        step *= 2.0;
        loop {
            let na = a.sub(&ga.scale(step));
            let nb = b.sub(&gb.scale(step));
            let nf = loss_of(pairs, &na, &nb);
            if nf <= f - 0.5 * step * g2 {
                a = na;
                b = nb;
                f = nf;
                break;
            }
            step /= 2.0;
            if step < 1e-20 {
                return f;
            }
        }
    }
    f
}

/// Best loss of gradient descent over the identity start and four random
/// starts.
pub fn gd_oracle_loss(w: &HistoryWindow, seed: u64, iters: usize) -> f64 {
    let pairs = pairs(w);
    let (d, m) = pairs[0].0.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d);
    let mut best = gd_from(&pairs, Matrix::identity(d), Matrix::identity(m), iters);
    for _ in 0..4 {
        let (a, b) = (gaussian(d, d, 1.0, &mut rng), gaussian(m, m, 1.0, &mut rng));
        best = best.min(gd_from(&pairs, a, b, iters));
    }
    best
}

/// Gradient descent started from given coefficients.
pub fn gd_polish_loss(w: &HistoryWindow, a: &Matrix, b: &Matrix, iters: usize) -> f64 {
    gd_from(&pairs(w), a.clone(), b.clone(), iters)
}

/// `(ALS loss per sweep budget, gradient-descent oracle loss)` on a noiseless
/// 3×3 MAR window.
pub fn als_vs_gd_budgets(seed: u64, budgets: &[usize]) -> (Vec<f64>, f64) {
    let w = noisy_mar_window(3, 3, 6, 0.0, seed);
    let als = budgets
        .iter()
        .map(|&iters| {
            let model: MarModel = estimate_mar(&w, iters, 0.0, 0.0).unwrap();
            mar_loss(&model, &w).unwrap()
        })
        .collect();
    (als, gd_oracle_loss(&w, seed, 20_000))
}

/// `(ALS loss, gradient-descent oracle loss)` on a noiseless 3×3 MAR window.
pub fn als_vs_gd(seed: u64, als_iters: usize) -> (f64, f64) {
    let (als, gd) = als_vs_gd_budgets(seed, &[als_iters]);
    (als[0], gd)
}

// ---- hypergeometric ----

pub fn binomial(n: u64, k: u64) -> BigUint {
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// `1 − C(K−b, m)/C(K, m)` in exact integer arithmetic, returned as f64.
pub fn hypergeom_oracle(k: u64, b: u64, m: u64) -> f64 {
    let num = binomial(k - b, m);
    let den = binomial(k, m);
    // 30 decimal digits of the ratio, then one rounding to f64.
    let scale = BigUint::from(10u32).pow(30);
    let ratio = (&num * &scale) / &den;
    1.0 - ratio.to_f64().unwrap() / 1e30
}

// ---- aggregators, by exhaustive enumeration ----

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
        .collect()
}

/// Krum score by enumeration: smallest total squared distance to any
/// `neighbors`-subset of the other vectors.
pub fn krum_score_brute(vectors: &[Vec<f64>], i: usize, neighbors: usize) -> f64 {
    let others: Vec<usize> = (0..vectors.len()).filter(|&j| j != i).collect();
    subsets(others.len(), neighbors)
        .into_iter()
        .map(|s| s.iter().map(|&p| sq_dist(&vectors[i], &vectors[others[p]])).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// The `k` vectors whose score total is smallest over all `k`-subsets.
pub fn multi_krum_brute(vectors: &[Vec<f64>], b: usize, k: usize) -> BTreeSet<usize> {
    let n = vectors.len();
    let scores: Vec<f64> = (0..n).map(|i| krum_score_brute(vectors, i, n - b - 2)).collect();
    let best = subsets(n, k)
        .into_iter()
        .min_by(|x, y| {
            let sx: f64 = x.iter().map(|&i| scores[i]).sum();
            let sy: f64 = y.iter().map(|&i| scores[i]).sum();
            sx.total_cmp(&sy)
        })
        .unwrap();
    best.into_iter().collect()
}

pub fn mean_of(vectors: &[Vec<f64>], chosen: &BTreeSet<usize>) -> Vec<f64> {
    let d = vectors[0].len();
    let mut out = vec![0.0; d];
    for &i in chosen {
        for (o, x) in out.iter_mut().zip(&vectors[i]) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= chosen.len() as f64);
    out
}

/// Bulyan by enumeration: repeated brute-force Krum picks, then per
/// coordinate the `β`-subset of selected values with the least total
/// distance to their median.
pub fn bulyan_brute(vectors: &[Vec<f64>], b: usize) -> (Vec<f64>, BTreeSet<usize>) {
    let n = vectors.len();
    let alpha = n - 2 * b;
    let beta = alpha - 2 * b;
    let mut pool: Vec<usize> = (0..n).collect();
    let mut selected = BTreeSet::new();
    while selected.len() < alpha {
        let sub: Vec<Vec<f64>> = pool.iter().map(|&i| vectors[i].clone()).collect();
        let neighbors = pool.len().saturating_sub(b + 2);
        let pick = (0..pool.len())
            .min_by(|&x, &y| krum_score_brute(&sub, x, neighbors).total_cmp(&krum_score_brute(&sub, y, neighbors)))
            .unwrap();
        selected.insert(pool.remove(pick));
    }
    let sel: Vec<usize> = selected.iter().copied().collect();
    let agg = (0..vectors[0].len())
        .map(|c| {
            let vals: Vec<f64> = sel.iter().map(|&i| vectors[i][c]).collect();
            let med = median_brute(&vals);
            let best = subsets(vals.len(), beta)
                .into_iter()
                .min_by(|x, y| {
                    let sx: f64 = x.iter().map(|&i| (vals[i] - med).abs()).sum();
                    let sy: f64 = y.iter().map(|&i| (vals[i] - med).abs()).sum();
                    sx.total_cmp(&sy)
                })
                .unwrap();
            best.iter().map(|&i| vals[i]).sum::<f64>() / beta as f64
        })
        .collect();
    (agg, selected)
}

/// Median by counting: a value with at most half the others on each side;
/// an even count averages the two such middle values.
pub fn median_brute(vals: &[f64]) -> f64 {
    let n = vals.len();
    let rank = |x: f64| vals.iter().filter(|&&y| y < x).count();
    let at = |r: usize| *vals.iter().find(|&&x| rank(x) == r).unwrap();
    if n % 2 == 1 {
        at(n / 2)
    } else {
        0.5 * (at(n / 2 - 1) + at(n / 2))
    }
}

/// Trimmed mean by counting: keep values with at least `t` values strictly
/// below and at least `t` strictly above.
pub fn trimmed_mean_brute(vals: &[f64], t: usize) -> f64 {
    let kept: Vec<f64> = vals
        .iter()
        .copied()
        .filter(|&x| vals.iter().filter(|&&y| y < x).count() >= t && vals.iter().filter(|&&y| y > x).count() >= t)
        .collect();
    kept.iter().sum::<f64>() / kept.len() as f64
}

pub fn random_vectors(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn input_of(vectors: &[Vec<f64>]) -> AggregationInput {
    AggregationInput::new(
        vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (ClientId(i as u32), v.clone()))
            .collect(),
    )
    .unwrap()
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

// ---- gradients ----

/// Largest relative error between analytic and central-difference gradients
/// over `points` random parameter vectors.
pub fn gradient_check(arch: &Architecture, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 12;
    let features: Vec<f64> = (0..n * arch.input).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..arch.classes as u32)).collect();
    let data = Dataset::new(features, labels, arch.input, arch.classes).unwrap();
    let rows: Vec<usize> = (0..n).collect();
    let np = arch.num_params();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let p: Vec<f64> = (0..np).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut g = vec![0.0; np];
        arch.loss_and_grad(&p, &data, &rows, &mut g);
        let mut scratch = vec![0.0; np];
        let h = 1e-5;
        let fd: Vec<f64> = (0..np)
            .map(|i| {
                let mut q = p.clone();
                q[i] += h;
                let up = arch.loss_and_grad(&q, &data, &rows, &mut scratch);
                q[i] -= 2.0 * h;
                let down = arch.loss_and_grad(&q, &data, &rows, &mut scratch);
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}
