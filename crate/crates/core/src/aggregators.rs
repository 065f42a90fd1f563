//! Aggregation rules mapping a set of local models to one global model.
//!
//! All rules order their inputs by client id before doing any arithmetic, so
//! the result does not depend on the order in which updates arrive.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filter::ClientId;
use crate::linalg::{sq_dist, top_right_singular_vector, Matrix, DEFAULT_POWER_ITERS};

/// Local models submitted for aggregation, with optional client weights.
#[derive(Debug, Clone)]
pub struct AggregationInput {
    columns: Vec<(ClientId, Vec<f64>)>,
    weights: Option<Vec<f64>>,
}

impl AggregationInput {
    pub fn new(mut columns: Vec<(ClientId, Vec<f64>)>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidDimension("aggregation needs at least one model".into()));
        }
        let d = columns[0].1.len();
        if columns.iter().any(|(_, v)| v.len() != d) {
            return Err(Error::DimensionMismatch("models differ in dimension".into()));
        }
        columns.sort_by_key(|(id, _)| *id);
        if columns.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidDimension("duplicate client id".into()));
        }
        Ok(Self {
            columns,
            weights: None,
        })
    }

    /// Weights are given per client id and must be non-negative and sum to 1.
    pub fn with_weights(mut self, weights: &[(ClientId, f64)]) -> Result<Self> {
        let mut w = Vec::with_capacity(self.columns.len());
        for (id, _) in &self.columns {
            let value = weights
                .iter()
                .find(|(wid, _)| wid == id)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::InvalidDimension(format!("no weight for client {id}")))?;
            if !(value >= 0.0) {
                return Err(Error::InvalidDimension(format!("negative weight for client {id}")));
            }
            w.push(value);
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDimension(format!("weights sum to {total}, not 1")));
        }
        self.weights = Some(w);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.columns[0].1.len()
    }

    pub fn ids(&self) -> Vec<ClientId> {
        self.columns.iter().map(|(id, _)| *id).collect()
    }

    pub fn columns(&self) -> &[(ClientId, Vec<f64>)] {
        &self.columns
    }

    fn subset(&self, keep: &BTreeSet<ClientId>) -> AggregationInput {
        AggregationInput {
            columns: self
                .columns
                .iter()
                .filter(|(id, _)| keep.contains(id))
                .cloned()
                .collect(),
            weights: None,
        }
    }
}

fn mean_of<'a>(vectors: impl Iterator<Item = &'a [f64]>, d: usize) -> Vec<f64> {
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    sum
}

/// Weighted mean; uniform when no weights were attached.
pub fn fed_avg(input: &AggregationInput) -> Vec<f64> {
    let d = input.dim();
    match &input.weights {
        None => mean_of(input.columns.iter().map(|(_, v)| v.as_slice()), d),
        Some(w) => {
            let mut out = vec![0.0; d];
            for ((_, v), wi) in input.columns.iter().zip(w) {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += wi * x;
                }
            }
            out
        }
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn coordinate(input: &AggregationInput, k: usize) -> Vec<f64> {
    input.columns.iter().map(|(_, v)| v[k]).collect()
}

/// Coordinate-wise median; an even count takes the midpoint of the two
/// middle values.
pub fn fed_median(input: &AggregationInput) -> Vec<f64> {
    (0..input.dim())
        .map(|k| {
            let mut vals = coordinate(input, k);
            vals.sort_by(f64::total_cmp);
            median_sorted(&vals)
        })
        .collect()
}

/// Coordinate-wise trimmed mean dropping `⌊β·m⌋` values from each end.
pub fn trimmed_mean(input: &AggregationInput, beta: f64) -> Result<Vec<f64>> {
    if !(0.0..0.5).contains(&beta) {
        return Err(Error::InvalidDimension(format!("trimmed mean beta must be in [0, 0.5), got {beta}")));
    }
    let m = input.len();
    let trim = (beta * m as f64).floor() as usize;
    if m <= 2 * trim {
        return Err(Error::Overtrim { trim, count: m });
    }
    Ok((0..input.dim())
        .map(|k| {
            let mut vals = coordinate(input, k);
            vals.sort_by(f64::total_cmp);
            let kept = &vals[trim..m - trim];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect())
}

/// Krum score of every column of `input`: the sum of squared distances to its
/// `neighbors` nearest other columns.
fn krum_scores(vectors: &[&[f64]], neighbors: usize) -> Vec<f64> {
    let n = vectors.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(vectors[i], vectors[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            row.sort_by(f64::total_cmp);
            row.iter().take(neighbors).sum()
        })
        .collect()
}

/// Ids of the `k_select` models with the lowest Krum scores.
pub fn multi_krum_select(
    input: &AggregationInput,
    num_malicious: usize,
    k_select: usize,
) -> Result<BTreeSet<ClientId>> {
    let m = input.len();
    if m < num_malicious + 3 {
        return Err(Error::TooFewClients {
            rule: "multi-krum",
            needed: num_malicious + 3,
            got: m,
        });
    }
    if k_select == 0 || k_select > m {
        return Err(Error::InvalidK {
            k: k_select,
            available: m,
        });
    }
    let vectors: Vec<&[f64]> = input.columns.iter().map(|(_, v)| v.as_slice()).collect();
    let scores = krum_scores(&vectors, m - num_malicious - 2);
    let mut order: Vec<usize> = (0..m).collect();
    // Columns are id-sorted, so a stable sort on score breaks ties by id.
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    Ok(order[..k_select].iter().map(|&i| input.columns[i].0).collect())
}

/// Uniform average of the `k_select` lowest-Krum-score models.
/// `k_select = 1` is plain Krum.
pub fn multi_krum(input: &AggregationInput, num_malicious: usize, k_select: usize) -> Result<Vec<f64>> {
    let chosen = multi_krum_select(input, num_malicious, k_select)?;
    Ok(fed_avg(&input.subset(&chosen)))
}

/// Bulyan: `α = m − 2b` rounds of Krum (each removing its pick from the pool),
/// then per coordinate the mean of the `β = α − 2b` selected values closest
/// to the coordinate median.
pub fn bulyan(input: &AggregationInput, num_malicious: usize) -> Result<Vec<f64>> {
    Ok(bulyan_with_selection(input, num_malicious)?.0)
}

fn bulyan_with_selection(
    input: &AggregationInput,
    num_malicious: usize,
) -> Result<(Vec<f64>, BTreeSet<ClientId>)> {
    let m = input.len();
    let b = num_malicious;
    if m < 4 * b + 3 {
        return Err(Error::TooFewClients {
            rule: "bulyan",
            needed: 4 * b + 3,
            got: m,
        });
    }
    let alpha = m - 2 * b;
    let beta = alpha - 2 * b;

    let mut pool: Vec<usize> = (0..m).collect();
    let mut selected: Vec<usize> = Vec::with_capacity(alpha);
    while selected.len() < alpha {
        let vectors: Vec<&[f64]> = pool.iter().map(|&i| input.columns[i].1.as_slice()).collect();
        let neighbors = pool.len().saturating_sub(b + 2);
        let scores = krum_scores(&vectors, neighbors);
        let best = (0..pool.len())
            .min_by(|&a, &c| scores[a].total_cmp(&scores[c]))
            .expect("non-empty pool");
        selected.push(pool.remove(best));
    }
    selected.sort_unstable();

    let aggregate = (0..input.dim())
        .map(|k| {
            let mut vals: Vec<f64> = selected.iter().map(|&i| input.columns[i].1[k]).collect();
            vals.sort_by(f64::total_cmp);
            let med = median_sorted(&vals);
            // Stable sort keeps value order among equal distances.
            vals.sort_by(|x, y| (x - med).abs().total_cmp(&(y - med).abs()));
            vals[..beta].iter().sum::<f64>() / beta as f64
        })
        .collect();
    let ids = selected.iter().map(|&i| input.columns[i].0).collect();
    Ok((aggregate, ids))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DncOutcome {
    pub aggregate: Vec<f64>,
    pub kept: BTreeSet<ClientId>,
    /// Every client was marked at least once; `kept` then holds the single
    /// client with the lowest accumulated outlier score.
    pub all_filtered: bool,
}

/// Divide-and-conquer spectral filter.
///
/// Each of `niters` iterations samples `sub_dim` coordinates, centers the
/// sampled updates, projects them on the top singular direction and marks
/// the `⌈filter_frac·b⌉` clients with the largest squared projections
/// (clients with zero projection are never marked). Clients never marked are
/// averaged.
pub fn dnc(
    input: &AggregationInput,
    niters: usize,
    filter_frac: f64,
    sub_dim: usize,
    num_malicious: usize,
    seed: u64,
) -> Result<DncOutcome> {
    let m = input.len();
    let d = input.dim();
    if m < 2 {
        return Err(Error::TooFewClients {
            rule: "dnc",
            needed: 2,
            got: m,
        });
    }
    if sub_dim == 0 || sub_dim > d {
        return Err(Error::InvalidDimension(format!("dnc sub_dim must be in 1..={d}, got {sub_dim}")));
    }
    let n_remove = ((filter_frac * num_malicious as f64).ceil().max(0.0) as usize).min(m);

    let mut marked = vec![false; m];
    let mut total_score = vec![0.0; m];
    for it in 0..niters {
        let iter_seed = seed ^ (it as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(iter_seed);
        let mut coords = rand::seq::index::sample(&mut rng, d, sub_dim).into_vec();
        coords.sort_unstable();

        let mut slice = Matrix::zeros(m, sub_dim);
        for (i, (_, v)) in input.columns.iter().enumerate() {
            for (j, &c) in coords.iter().enumerate() {
                slice[(i, j)] = v[c];
            }
        }
        for j in 0..sub_dim {
            let mean = (0..m).map(|i| slice[(i, j)]).sum::<f64>() / m as f64;
            for i in 0..m {
                slice[(i, j)] -= mean;
            }
        }
        let dir = top_right_singular_vector(&slice, DEFAULT_POWER_ITERS, iter_seed.rotate_left(17));
        let scores: Vec<f64> = (0..m).map(|i| crate::linalg::dot(slice.row(i), &dir).powi(2)).collect();
        for (t, s) in total_score.iter_mut().zip(&scores) {
            *t += s;
        }

        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        for &i in order.iter().take(n_remove) {
            if scores[i] > 0.0 {
                marked[i] = true;
            }
        }
    }

    let mut kept: BTreeSet<ClientId> = (0..m)
        .filter(|&i| !marked[i])
        .map(|i| input.columns[i].0)
        .collect();
    let all_filtered = kept.is_empty();
    if all_filtered {
        let best = (0..m)
            .min_by(|&a, &b| total_score[a].total_cmp(&total_score[b]))
            .unwrap();
        kept.insert(input.columns[best].0);
    }
    Ok(DncOutcome {
        aggregate: fed_avg(&input.subset(&kept)),
        kept,
        all_filtered,
    })
}

/// Aggregation rule plus its parameters, parsed from a config string such as
/// `multi_krum` or `trimmed_mean`.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregator {
    FedAvg,
    FedMedian,
    TrimmedMean { beta: f64 },
    /// `k_select = None` keeps `m − b` models.
    MultiKrum { num_malicious: usize, k_select: Option<usize> },
    Bulyan { num_malicious: usize },
    Dnc {
        niters: usize,
        filter_frac: f64,
        sub_dim: usize,
        num_malicious: usize,
    },
}

/// Aggregate plus the clients that actually contributed to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub model: Vec<f64>,
    pub contributors: BTreeSet<ClientId>,
}

impl Aggregator {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::FedAvg => "fedavg",
            Aggregator::FedMedian => "fedmedian",
            Aggregator::TrimmedMean { .. } => "trimmed_mean",
            Aggregator::MultiKrum { .. } => "multi_krum",
            Aggregator::Bulyan { .. } => "bulyan",
            Aggregator::Dnc { .. } => "dnc",
        }
    }

    /// Same rule with its malicious-count parameter replaced.
    pub fn with_num_malicious(&self, b: usize) -> Aggregator {
        let mut out = self.clone();
        match &mut out {
            Aggregator::MultiKrum { num_malicious, .. }
            | Aggregator::Bulyan { num_malicious }
            | Aggregator::Dnc { num_malicious, .. } => *num_malicious = b,
            _ => {}
        }
        out
    }

    pub fn aggregate(&self, input: &AggregationInput, seed: u64) -> Result<Aggregate> {
        let everyone = || input.ids().into_iter().collect::<BTreeSet<_>>();
        Ok(match self {
            Aggregator::FedAvg => Aggregate {
                model: fed_avg(input),
                contributors: everyone(),
            },
            Aggregator::FedMedian => Aggregate {
                model: fed_median(input),
                contributors: everyone(),
            },
            Aggregator::TrimmedMean { beta } => Aggregate {
                model: trimmed_mean(input, *beta)?,
                contributors: everyone(),
            },
            Aggregator::MultiKrum { num_malicious, k_select } => {
                let k = k_select
                    .unwrap_or(input.len().saturating_sub(*num_malicious))
                    .min(input.len());
                let chosen = multi_krum_select(input, *num_malicious, k)?;
                Aggregate {
                    model: fed_avg(&input.subset(&chosen)),
                    contributors: chosen,
                }
            }
            Aggregator::Bulyan { num_malicious } => {
                let (model, contributors) = bulyan_with_selection(input, *num_malicious)?;
                Aggregate { model, contributors }
            }
            Aggregator::Dnc {
                niters,
                filter_frac,
                sub_dim,
                num_malicious,
            } => {
                let out = dnc(
                    input,
                    *niters,
                    *filter_frac,
                    (*sub_dim).min(input.dim()),
                    *num_malicious,
                    seed,
                )?;
                Aggregate {
                    model: out.aggregate,
                    contributors: out.kept,
                }
            }
        })
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    /// Parses `name` or `name:key=value,...` (β = 0.2, DnC niters = 5,
    /// c = 1, sub_dim = 500, b = 0 by default). Keys: `beta`, `k_select`,
    /// `niters`, `c`, `sub_dim`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = s.split_once(':').unwrap_or((s, ""));
        let mut rule = match name.trim().to_ascii_lowercase().as_str() {
            "fedavg" => Aggregator::FedAvg,
            "fedmedian" => Aggregator::FedMedian,
            "trimmed_mean" => Aggregator::TrimmedMean { beta: 0.2 },
            "multi_krum" => Aggregator::MultiKrum {
                num_malicious: 0,
                k_select: None,
            },
            "bulyan" => Aggregator::Bulyan { num_malicious: 0 },
            "dnc" => Aggregator::Dnc {
                niters: 5,
                filter_frac: 1.0,
                sub_dim: 500,
                num_malicious: 0,
            },
            other => return Err(Error::Config(format!("unknown aggregator '{other}'"))),
        };
        for kv in params.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("aggregator parameter '{kv}' is not key=value")))?;
            let bad = || Error::Config(format!("aggregator parameter {key}: bad value '{value}'"));
            match (&mut rule, key) {
                (Aggregator::TrimmedMean { beta }, "beta") => *beta = value.parse().map_err(|_| bad())?,
                (Aggregator::MultiKrum { k_select, .. }, "k_select") => {
                    *k_select = Some(value.parse().map_err(|_| bad())?)
                }
                (Aggregator::Dnc { niters, .. }, "niters") => *niters = value.parse().map_err(|_| bad())?,
                (Aggregator::Dnc { filter_frac, .. }, "c") => *filter_frac = value.parse().map_err(|_| bad())?,
                (Aggregator::Dnc { sub_dim, .. }, "sub_dim") => *sub_dim = value.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("aggregator '{name}' has no parameter '{key}'"))),
            }
        }
        Ok(rule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(vs: &[&[f64]]) -> AggregationInput {
        AggregationInput::new(
            vs.iter()
                .enumerate()
                .map(|(i, v)| (ClientId(i as u32), v.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fed_avg_examples() {
        assert_eq!(fed_avg(&input(&[&[1.0, 2.0]])), vec![1.0, 2.0]);
        assert_eq!(fed_avg(&input(&[&[0.0, 0.0], &[2.0, 4.0]])), vec![1.0, 2.0]);
    }

    #[test]
    fn weighted_fed_avg() {
        let inp = input(&[&[0.0], &[4.0]])
            .with_weights(&[(ClientId(0), 0.75), (ClientId(1), 0.25)])
            .unwrap();
        assert_eq!(fed_avg(&inp), vec![1.0]);
        assert!(input(&[&[0.0], &[4.0]])
            .with_weights(&[(ClientId(0), 0.7), (ClientId(1), 0.2)])
            .is_err());
        assert!(input(&[&[0.0], &[4.0]])
            .with_weights(&[(ClientId(0), 1.5), (ClientId(1), -0.5)])
            .is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(fed_median(&input(&[&[1.0, 5.0], &[2.0, 4.0], &[3.0, 3.0]])), vec![2.0, 4.0]);
        assert_eq!(fed_median(&input(&[&[0.0, 0.0], &[10.0, 10.0]])), vec![5.0, 5.0]);
    }

    #[test]
    fn trimmed_mean_examples() {
        let scalars = input(&[&[1.0], &[2.0], &[3.0], &[4.0], &[100.0]]);
        assert_eq!(trimmed_mean(&scalars, 0.2).unwrap(), vec![3.0]);
        assert_eq!(trimmed_mean(&scalars, 0.0).unwrap(), fed_avg(&scalars));
        let two = input(&[&[1.0], &[3.0]]);
        assert_eq!(trimmed_mean(&two, 0.49).unwrap(), vec![2.0]);
        assert!(trimmed_mean(&two, 0.5).is_err());
    }

    #[test]
    fn trimming_uses_floor() {
        let four = input(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        // floor(0.49 * 4) = 1 value trimmed per side.
        assert_eq!(trimmed_mean(&four, 0.49).unwrap(), vec![2.5]);
        assert!(trimmed_mean(&four, -0.1).is_err());
    }

    #[test]
    fn krum_examples() {
        let same = input(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(multi_krum(&same, 0, 1).unwrap(), vec![1.0, 2.0]);
        assert_eq!(
            multi_krum_select(&same, 0, 1).unwrap(),
            [ClientId(0)].into_iter().collect()
        );

        let scalars = input(&[&[0.0], &[0.1], &[0.2], &[0.3], &[100.0]]);
        let out = multi_krum(&scalars, 1, 1).unwrap();
        assert!(out == vec![0.1] || out == vec![0.2], "{out:?}");

        assert!(matches!(
            multi_krum(&input(&[&[0.0], &[1.0], &[2.0]]), 1, 1),
            Err(Error::TooFewClients { .. })
        ));
    }

    #[test]
    fn bulyan_examples() {
        let same = input(&[&[3.0], &[3.0], &[3.0]]);
        assert_eq!(bulyan(&same, 0).unwrap(), vec![3.0]);
        let seven = input(&[&[0.0], &[0.0], &[0.0], &[0.0], &[0.0], &[0.0], &[50.0]]);
        assert_eq!(bulyan(&seven, 1).unwrap(), vec![0.0]);
        let six = input(&[&[0.0], &[0.0], &[0.0], &[0.0], &[0.0], &[0.0]]);
        assert!(matches!(bulyan(&six, 1), Err(Error::TooFewClients { needed: 7, .. })));
    }

    #[test]
    fn dnc_identical_models_keep_everyone() {
        let row: &[f64] = &[1.0, 1.0, 1.0];
        let same = input(&[row; 5]);
        let out = dnc(&same, 5, 1.0, 3, 1, 9).unwrap();
        assert_eq!(out.kept.len(), 5);
        assert_eq!(out.aggregate, vec![1.0, 1.0, 1.0]);
        assert!(!out.all_filtered);
    }

    #[test]
    fn dnc_removes_far_outlier() {
        let mut vs: Vec<Vec<f64>> = (0..9)
            .map(|i| vec![0.01 * i as f64, -0.02 * i as f64, 0.005 * (i % 3) as f64, 0.0])
            .collect();
        vs.push(vec![50.0, 40.0, -30.0, 20.0]);
        let refs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        let inp = input(&refs);
        let out = dnc(&inp, 5, 1.0, 2, 1, 3).unwrap();
        assert!(!out.kept.contains(&ClientId(9)));
        assert_eq!(dnc(&inp, 5, 1.0, 2, 1, 3).unwrap(), out);
    }

    #[test]
    fn parse_aggregators() {
        for name in ["fedavg", "fedmedian", "trimmed_mean", "multi_krum", "bulyan", "dnc"] {
            let agg: Aggregator = name.parse().unwrap();
            assert_eq!(agg.to_string(), name);
        }
        assert!("krum2".parse::<Aggregator>().is_err());
    }
}
