//! Matrix autoregressive MAR(1) forecasting.
//!
//! The model is `Θ_t ≈ A·Θ_{t-1}·B` with `A` acting on parameter rows and `B`
//! on client columns. Coefficients are fit over a sliding window of update
//! matrices by alternating least squares: with `B` fixed the loss is an
//! ordinary multi-target least-squares problem in `A`, and vice versa, so each
//! half-step is solved in closed form through a Gram-matrix system.

use std::collections::VecDeque;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::filter::UpdateMatrix;
use crate::linalg::{frobenius_norm_sq, solve_spd, Matrix};

pub const DEFAULT_ALS_ITERS: usize = 100;
/// Both coefficient matrices must move less than this (Frobenius) to stop early.
pub const CONVERGENCE_TOL: f64 = 1e-9;
/// Ridge escalation stops after the ridge reaches this multiple of its start.
const RIDGE_ESCALATION_CAP: f64 = 1e6;

/// Fitted MAR(1) coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MarModel {
    /// Row (parameter) dynamics, `d̃ × d̃`.
    pub a_coef: Matrix,
    /// Column (client) dynamics, `m × m`.
    pub b_coef: Matrix,
    /// Largest ridge actually used for the `A` Gram systems.
    pub ridge_a: f64,
    /// Largest ridge actually used for the `B` Gram systems.
    pub ridge_b: f64,
    pub iters_used: usize,
}

impl MarModel {
    /// The model that forecasts "no change".
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self {
            a_coef: Matrix::identity(rows),
            b_coef: Matrix::identity(cols),
            ridge_a: 0.0,
            ridge_b: 0.0,
            iters_used: 0,
        }
    }

    pub fn predict(&self, last: &Matrix) -> Result<Matrix> {
        if self.a_coef.cols() != last.rows() || self.b_coef.rows() != last.cols() {
            return Err(Error::DimensionMismatch(format!(
                "model is {}x{} / {}x{}, matrix is {}x{}",
                self.a_coef.rows(),
                self.a_coef.cols(),
                self.b_coef.rows(),
                self.b_coef.cols(),
                last.rows(),
                last.cols()
            )));
        }
        Ok(self.a_coef.matmul(last).matmul(&self.b_coef))
    }

    /// Writes `A` then `B` in the `MARM` dump format.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        self.a_coef.write_dump(&mut w)?;
        self.b_coef.write_dump(&mut w)
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let a_coef = Matrix::read_dump(&mut r)?;
        let b_coef = Matrix::read_dump(&mut r)?;
        if a_coef.rows() != a_coef.cols() || b_coef.rows() != b_coef.cols() {
            return Err(Error::DimensionMismatch("MAR coefficients must be square".into()));
        }
        Ok(Self {
            a_coef,
            b_coef,
            ridge_a: 0.0,
            ridge_b: 0.0,
            iters_used: 0,
        })
    }
}

/// The last `capacity` update matrices, oldest first.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    capacity: usize,
    window: VecDeque<UpdateMatrix>,
}

impl HistoryWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::InvalidDimension(format!(
                "history window needs l >= 2, got {capacity}"
            )));
        }
        Ok(Self {
            capacity,
            window: VecDeque::with_capacity(capacity + 1),
        })
    }

    /// Builds a window holding exactly `matrices` (capacity = their count, min 2).
    pub fn from_matrices(matrices: Vec<UpdateMatrix>) -> Result<Self> {
        let mut h = Self::new(matrices.len().max(2))?;
        for m in matrices {
            h.push(m)?;
        }
        Ok(h)
    }

    /// Appends the newest matrix, evicting the oldest when full.
    pub fn push(&mut self, m: UpdateMatrix) -> Result<()> {
        if let Some(last) = self.window.back() {
            if last.values.shape() != m.values.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "history holds {:?} matrices, pushed {:?}",
                    last.values.shape(),
                    m.values.shape()
                )));
            }
            if m.round_id != last.round_id + 1 {
                return Err(Error::InvalidDimension(format!(
                    "history rounds must be consecutive: {} then {}",
                    last.round_id, m.round_id
                )));
            }
        }
        self.window.push_back(m);
        while self.window.len() > self.capacity {
            self.window.pop_front();
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn newest(&self) -> Option<&UpdateMatrix> {
        self.window.back()
    }

    pub fn iter(&self) -> impl Iterator<Item = &UpdateMatrix> {
        self.window.iter()
    }

    pub fn round_ids(&self) -> Vec<usize> {
        self.window.iter().map(|m| m.round_id).collect()
    }

    /// Consecutive `(previous, next)` training pairs.
    fn pairs(&self) -> impl Iterator<Item = (&Matrix, &Matrix)> {
        self.window
            .iter()
            .zip(self.window.iter().skip(1))
            .map(|(p, n)| (&p.values, &n.values))
    }
}

/// Training loss: `Σ_j ‖Θ_{j+1} − A·Θ_j·B‖²_F` over consecutive window pairs.
pub fn mar_loss(model: &MarModel, history: &HistoryWindow) -> Result<f64> {
    if history.len() < 2 {
        return Err(Error::DegenerateHistory(history.len()));
    }
    let mut loss = 0.0;
    for (prev, next) in history.pairs() {
        loss += frobenius_norm_sq(&next.sub(&model.predict(prev)?));
    }
    Ok(loss)
}

/// One-step-ahead forecast `Â·last·B̂`, keeping `last`'s client-id map.
pub fn forecast(model: &MarModel, last: &UpdateMatrix) -> Result<UpdateMatrix> {
    Ok(UpdateMatrix {
        values: model.predict(&last.values)?,
        client_ids: last.client_ids.clone(),
        round_id: last.round_id + 1,
    })
}

/// Fits MAR(1) coefficients by alternating least squares.
///
/// Starts from `B = I`, then alternates an exact `A` update and an exact `B`
/// update, each with `ridge·I` added to the Gram matrix being inverted. A
/// singular Gram system is retried with the ridge escalated ×10 (starting
/// from a tiny scale-relative value when the configured ridge is 0) until it
/// reaches 1e6 times its starting value.
pub fn estimate_mar(
    history: &HistoryWindow,
    iters: usize,
    ridge_a: f64,
    ridge_b: f64,
) -> Result<MarModel> {
    estimate_mar_traced(history, iters, ridge_a, ridge_b, |_, _| {})
}

/// [`estimate_mar`] with a callback receiving `(iteration, model)` after every
/// full A/B sweep.
pub fn estimate_mar_traced(
    history: &HistoryWindow,
    iters: usize,
    ridge_a: f64,
    ridge_b: f64,
    mut on_iter: impl FnMut(usize, &MarModel),
) -> Result<MarModel> {
    if history.len() < 2 {
        return Err(Error::DegenerateHistory(history.len()));
    }
    let (rows, cols) = history.newest().unwrap().values.shape();
    let mut model = MarModel::identity(rows, cols);

    for it in 1..=iters.max(1) {
        let (a_new, used_a) = solve_a(history, &model.b_coef, ridge_a)?;
        let (b_new, used_b) = solve_b(history, &a_new, ridge_b)?;
        let (a_new, b_new) = balance(a_new, b_new);

        let moved_a = frobenius_norm_sq(&a_new.sub(&model.a_coef)).sqrt();
        let moved_b = frobenius_norm_sq(&b_new.sub(&model.b_coef)).sqrt();
        model.a_coef = a_new;
        model.b_coef = b_new;
        model.ridge_a = model.ridge_a.max(used_a);
        model.ridge_b = model.ridge_b.max(used_b);
        model.iters_used = it;
        on_iter(it, &model);

        if moved_a < CONVERGENCE_TOL && moved_b < CONVERGENCE_TOL {
            break;
        }
    }
    Ok(model)
}

/// With `B` fixed and `W_j = Θ_j·B`: `A·(Σ W_j W_jᵀ) = Σ Θ_{j+1} W_jᵀ`.
fn solve_a(history: &HistoryWindow, b: &Matrix, ridge: f64) -> Result<(Matrix, f64)> {
    let mut gram: Option<Matrix> = None;
    let mut cross: Option<Matrix> = None;
    for (prev, next) in history.pairs() {
        let w = prev.matmul(b);
        accumulate(&mut gram, w.matmul_t(&w));
        accumulate(&mut cross, w.matmul_t(next));
    }
    // Gram·Aᵀ = (Σ W Θᵀ)
    let (a_t, used) = solve_with_escalation(&gram.unwrap(), &cross.unwrap(), ridge)?;
    Ok((a_t.transpose(), used))
}

/// With `A` fixed and `Z_j = A·Θ_j`: `(Σ Z_jᵀ Z_j)·B = Σ Z_jᵀ Θ_{j+1}`.
fn solve_b(history: &HistoryWindow, a: &Matrix, ridge: f64) -> Result<(Matrix, f64)> {
    let mut gram: Option<Matrix> = None;
    let mut cross: Option<Matrix> = None;
    for (prev, next) in history.pairs() {
        let z = a.matmul(prev);
        accumulate(&mut gram, z.t_matmul(&z));
        accumulate(&mut cross, z.t_matmul(next));
    }
    solve_with_escalation(&gram.unwrap(), &cross.unwrap(), ridge)
}

fn accumulate(acc: &mut Option<Matrix>, term: Matrix) {
    match acc {
        Some(m) => m.add_assign(&term),
        None => *acc = Some(term),
    }
}

fn solve_with_escalation(gram: &Matrix, rhs: &Matrix, ridge: f64) -> Result<(Matrix, f64)> {
    match solve_spd(gram, rhs, ridge) {
        Ok(x) => return Ok((x, ridge)),
        Err(Error::SingularSystem) => {}
        Err(e) => return Err(e),
    }
    let start = if ridge > 0.0 {
        ridge * 10.0
    } else {
        let n = gram.rows() as f64;
        let mean_diag = (0..gram.rows()).map(|i| gram[(i, i)]).sum::<f64>() / n;
        1e-12 * mean_diag.max(f64::MIN_POSITIVE.sqrt())
    };
    let cap = if ridge > 0.0 { ridge } else { start } * RIDGE_ESCALATION_CAP;
    let mut current = start;
    while current <= cap * (1.0 + 1e-12) {
        match solve_spd(gram, rhs, current) {
            Ok(x) => return Ok((x, current)),
            Err(Error::SingularSystem) => current *= 10.0,
            Err(e) => return Err(e),
        }
    }
    Err(Error::RidgeExhausted {
        last_ridge: current / 10.0,
    })
}

/// Rescales `(A, B) → (cA, B/c)` so both have equal Frobenius norm. The
/// product, hence every forecast and the loss, is unchanged.
fn balance(a: Matrix, b: Matrix) -> (Matrix, Matrix) {
    let na = frobenius_norm_sq(&a).sqrt();
    let nb = frobenius_norm_sq(&b).sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return (a, b);
    }
    let c = (nb / na).sqrt();
    (a.scale(c), b.scale(1.0 / c))
}
