//! Pre-aggregation filter: forecast each client's update from the recent
//! history, score the observed update against it and keep the `k` clients
//! whose updates were most predictable.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix};
use crate::mar::{estimate_mar, forecast, HistoryWindow, MarModel, DEFAULT_ALS_ITERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One round of (sampled) local models, one column per client.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMatrix {
    pub values: Matrix,
    pub client_ids: Vec<ClientId>,
    pub round_id: usize,
}

impl UpdateMatrix {
    pub fn new(values: Matrix, client_ids: Vec<ClientId>, round_id: usize) -> Result<Self> {
        if client_ids.len() != values.cols() {
            return Err(Error::DimensionMismatch(format!(
                "{} client ids for {} columns",
                client_ids.len(),
                values.cols()
            )));
        }
        let unique: HashSet<_> = client_ids.iter().collect();
        if unique.len() != client_ids.len() {
            return Err(Error::InvalidDimension("duplicate client id in update matrix".into()));
        }
        Ok(Self {
            values,
            client_ids,
            round_id,
        })
    }

    /// Builds the matrix from full parameter vectors, keeping only `indices`.
    pub fn from_sampled(
        columns: &[(ClientId, &[f64])],
        indices: &[usize],
        round_id: usize,
    ) -> Result<Self> {
        let mut values = Matrix::zeros(indices.len().max(1), columns.len().max(1));
        for (j, (_, params)) in columns.iter().enumerate() {
            for (i, &p) in indices.iter().enumerate() {
                values[(i, j)] = params[p];
            }
        }
        Self::new(values, columns.iter().map(|(id, _)| *id).collect(), round_id)
    }

    pub fn position(&self, id: ClientId) -> Option<usize> {
        self.client_ids.iter().position(|c| *c == id)
    }

    pub fn column_of(&self, id: ClientId) -> Option<Vec<f64>> {
        self.position(id).map(|j| self.values.column(j))
    }
}

/// Which reference a defined score was measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreBasis {
    /// The client had a column in the forecast matrix.
    Forecast,
    /// Cold start: the client was absent from the forecasting round.
    GlobalModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientScore {
    pub client_id: ClientId,
    pub score: f64,
    pub basis: ScoreBasis,
}

/// Scores for the clients selected in one round. Any other client is
/// undefined (⊥) and [`AnomalyScores::get`] returns `None` for it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnomalyScores {
    pub round_id: usize,
    pub entries: Vec<ClientScore>,
}

impl AnomalyScores {
    pub fn get(&self, id: ClientId) -> Option<f64> {
        self.entries.iter().find(|e| e.client_id == id).map(|e| e.score)
    }

    pub fn basis(&self, id: ClientId) -> Option<ScoreBasis> {
        self.entries.iter().find(|e| e.client_id == id).map(|e| e.basis)
    }

    pub fn defined_count(&self) -> usize {
        self.entries.len()
    }
}

/// Draws `d_tilde` distinct coordinates out of `d`, sorted ascending.
pub fn sample_param_indices(d: usize, d_tilde: usize, seed: u64) -> Result<Vec<usize>> {
    if d_tilde == 0 || d_tilde > d {
        return Err(Error::InvalidDimension(format!(
            "need 1 <= d_tilde <= d, got d_tilde={d_tilde}, d={d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, d, d_tilde).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Squared-L² anomaly score of every observed client.
///
/// A client with a column in `predicted` (i.e. present in the round the
/// forecast was made from) is scored against its forecast column; any other
/// client is a cold start and is scored against `global_model`. `history` is
/// accepted for interface symmetry with the filter loop; warm/cold status is
/// decided by `predicted`'s client map, which comes from the newest window
/// matrix.
pub fn anomaly_scores(
    observed: &UpdateMatrix,
    predicted: &UpdateMatrix,
    global_model: &[f64],
    _history: &HistoryWindow,
) -> Result<AnomalyScores> {
    let rows = observed.values.rows();
    if predicted.values.rows() != rows || global_model.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "observed has {rows} sampled params, forecast {}, global model {}",
            predicted.values.rows(),
            global_model.len()
        )));
    }
    let forecast_cols: HashMap<ClientId, usize> = predicted
        .client_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (*id, j))
        .collect();

    let entries = observed
        .client_ids
        .iter()
        .enumerate()
        .map(|(j, &id)| {
            let obs = observed.values.column(j);
            match forecast_cols.get(&id) {
                Some(&pj) => ClientScore {
                    client_id: id,
                    score: sq_dist(&obs, &predicted.values.column(pj)),
                    basis: ScoreBasis::Forecast,
                },
                None => ClientScore {
                    client_id: id,
                    score: sq_dist(global_model, &obs),
                    basis: ScoreBasis::GlobalModel,
                },
            }
        })
        .collect();
    Ok(AnomalyScores {
        round_id: observed.round_id,
        entries,
    })
}

/// The `k` clients with the smallest scores; ties go to the smaller id.
pub fn select_top_k(scores: &AnomalyScores, k: usize) -> Result<BTreeSet<ClientId>> {
    let n = scores.defined_count();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, available: n });
    }
    let mut ranked: Vec<&ClientScore> = scores.entries.iter().collect();
    ranked.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| a.client_id.cmp(&b.client_id))
    });
    Ok(ranked.into_iter().take(k).map(|e| e.client_id).collect())
}

/// Replaces flagged columns before the matrix enters the history.
///
/// A flagged client's column is copied from `previous_amended` if the client
/// appears there, otherwise it becomes `global_model`.
pub fn amend_matrix(
    observed: &UpdateMatrix,
    flagged: &BTreeSet<ClientId>,
    previous_amended: Option<&UpdateMatrix>,
    global_model: &[f64],
) -> UpdateMatrix {
    let mut out = observed.clone();
    for (j, id) in observed.client_ids.iter().enumerate() {
        if !flagged.contains(id) {
            continue;
        }
        let replacement = previous_amended
            .and_then(|prev| prev.column_of(*id))
            .unwrap_or_else(|| global_model.to_vec());
        out.values.set_column(j, &replacement);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub k: usize,
    pub als_iters: usize,
    pub ridge_a: f64,
    pub ridge_b: f64,
}

impl FilterParams {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            als_iters: DEFAULT_ALS_ITERS,
            ridge_a: 0.0,
            ridge_b: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: BTreeSet<ClientId>,
    pub scores: AnomalyScores,
    pub model: MarModel,
}

impl FilterOutcome {
    /// Observed clients that were not kept.
    pub fn flagged(&self, observed: &UpdateMatrix) -> BTreeSet<ClientId> {
        observed
            .client_ids
            .iter()
            .filter(|id| !self.kept.contains(id))
            .copied()
            .collect()
    }
}

/// One filtering step: fit MAR on the window, forecast from its newest
/// matrix, score and keep the top `k`.
///
/// A window holding a single matrix has no training pair; the forecast then
/// falls back to persistence (identity coefficients). Pushing the amended
/// matrix into the history is left to the caller.
pub fn filter_round(
    history: &HistoryWindow,
    observed: &UpdateMatrix,
    global_model: &[f64],
    params: &FilterParams,
) -> Result<FilterOutcome> {
    let newest = history.newest().ok_or(Error::DegenerateHistory(0))?;
    if newest.values.rows() != observed.values.rows() {
        return Err(Error::DimensionMismatch(format!(
            "history tracks {} params, observed {}",
            newest.values.rows(),
            observed.values.rows()
        )));
    }
    let model = if history.len() >= 2 {
        estimate_mar(history, params.als_iters, params.ridge_a, params.ridge_b)?
    } else {
        MarModel::identity(newest.values.rows(), newest.values.cols())
    };
    let predicted = forecast(&model, newest)?;
    let scores = anomaly_scores(observed, &predicted, global_model, history)?;
    let kept = select_top_k(&scores, params.k)?;
    Ok(FilterOutcome {
        kept,
        scores,
        model,
    })
}

/// One row of the per-round anomaly-score export.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub round_id: usize,
    pub client_id: ClientId,
    pub score: Option<f64>,
    pub flagged: bool,
    pub truth: bool,
}

pub const SCORES_CSV_HEADER: [&str; 5] = ["round_id", "client_id", "score", "flagged", "truth"];

/// Writes `round_id,client_id,score,flagged,truth`; undefined scores are `NA`.
pub fn write_scores_csv<W: Write>(rows: &[ScoreRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SCORES_CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.round_id.to_string(),
            r.client_id.to_string(),
            r.score.map(|s| format!("{s:e}")).unwrap_or_else(|| "NA".into()),
            r.flagged.to_string(),
            r.truth.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("scores.csv", e))?;
    Ok(())
}
