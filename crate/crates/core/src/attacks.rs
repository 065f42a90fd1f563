//! Untargeted model-poisoning attacks applied to the malicious clients'
//! local models after honest training.
//!
//! Every attack takes an [`AttackContext`] (the omniscient attacker sees all
//! benign updates of the round) and returns one model per malicious client,
//! in ascending id order.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::aggregators::{AggregationInput, Aggregator};
use crate::error::{Error, Result};
use crate::filter::{ClientId, UpdateMatrix};
use crate::linalg::{norm2, sq_dist, Matrix};
use crate::mar::{estimate_mar, forecast, HistoryWindow};
use crate::seeds::mix64;

pub const DEFAULT_SIGMA: f64 = 10.0;
pub const DEFAULT_TAU: f64 = 1e-5;
pub const DEFAULT_LAMBDA_INIT: f64 = 10.0;
pub const DEFAULT_GAMMA_INIT: f64 = 5.0;

/// LIE's quantile argument can leave (0, 1) once `b` is a majority; it is
/// clamped to this band.
pub const LIE_CDF_CLAMP: f64 = 1e-4;

pub type ModelSet = Vec<(ClientId, Vec<f64>)>;

#[derive(Debug, Clone)]
pub struct AttackContext {
    pub benign_updates: ModelSet,
    pub malicious_ids: BTreeSet<ClientId>,
    pub global_model: Vec<f64>,
    /// Round-specific seed; per-client streams are derived from it.
    pub rng_seed: u64,
}

impl AttackContext {
    pub fn new(
        benign_updates: ModelSet,
        malicious_ids: BTreeSet<ClientId>,
        global_model: Vec<f64>,
        rng_seed: u64,
    ) -> Result<Self> {
        if let Some((id, _)) = benign_updates.iter().find(|(id, _)| malicious_ids.contains(id)) {
            return Err(Error::InvalidDimension(format!(
                "client {id} is both benign and malicious"
            )));
        }
        let d = global_model.len();
        if benign_updates.iter().any(|(_, v)| v.len() != d) {
            return Err(Error::DimensionMismatch("benign update length differs from global model".into()));
        }
        Ok(Self {
            benign_updates,
            malicious_ids,
            global_model,
            rng_seed,
        })
    }

    pub fn num_malicious(&self) -> usize {
        self.malicious_ids.len()
    }

    /// Participants this round, benign plus malicious.
    pub fn num_participants(&self) -> usize {
        self.benign_updates.len() + self.malicious_ids.len()
    }

    fn client_rng(&self, id: ClientId) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix64(self.rng_seed ^ mix64(u64::from(id.0) + 1)))
    }

    fn replicate(&self, model: &[f64]) -> ModelSet {
        self.malicious_ids.iter().map(|&id| (id, model.to_vec())).collect()
    }

    fn benign_refs(&self) -> Vec<&[f64]> {
        self.benign_updates.iter().map(|(_, v)| v.as_slice()).collect()
    }
}

/// Result of a halving search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalvingResult {
    /// Last scale tried (the accepted one on success).
    pub value: f64,
    /// Predicate evaluations.
    pub evaluations: usize,
    pub halvings: usize,
    pub success: bool,
}

/// Starts at `init` and halves while `accept` fails, stopping once the scale
/// drops below `tau`. Evaluates `accept` at most `⌊log₂(init/τ)⌋ + 1` times.
pub fn halving_search(init: f64, tau: f64, mut accept: impl FnMut(f64) -> bool) -> HalvingResult {
    let mut value = init;
    let mut evaluations = 0;
    let mut halvings = 0;
    while value >= tau {
        evaluations += 1;
        if accept(value) {
            return HalvingResult {
                value,
                evaluations,
                halvings,
                success: true,
            };
        }
        value /= 2.0;
        halvings += 1;
    }
    HalvingResult {
        value,
        evaluations,
        halvings,
        success: false,
    }
}

/// Upper bound on evaluations: `⌈log₂(init/τ)⌉ + 1`.
pub fn halving_bound(init: f64, tau: f64) -> usize {
    if init < tau {
        return 1;
    }
    (init / tau).log2().ceil() as usize + 1
}

/// Crafted models plus the search trace, for OPT and AGR-MM.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub models: ModelSet,
    pub search: HalvingResult,
}

/// GAUSS noise for one client: a single `ε ~ N(0, σ²)` from its own stream.
pub fn gauss_epsilon(ctx: &AttackContext, id: ClientId, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(&mut ctx.client_rng(id));
    sigma * z
}

/// Adds one scalar draw to every parameter of each malicious client's honest
/// model, or an independent draw per coordinate when `per_coordinate`.
pub fn attack_gauss(
    ctx: &AttackContext,
    honest_locals: &ModelSet,
    sigma: f64,
    per_coordinate: bool,
) -> Result<ModelSet> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("gauss sigma must be >= 0, got {sigma}")));
    }
    let mut out = Vec::with_capacity(ctx.num_malicious());
    for &id in &ctx.malicious_ids {
        let honest = honest_locals
            .iter()
            .find(|(c, _)| *c == id)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::InvalidDimension(format!("no honest model for malicious client {id}")))?;
        let model = if per_coordinate {
            let mut rng = ctx.client_rng(id);
            honest
                .iter()
                .map(|&p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p + sigma * z
                })
                .collect()
        } else {
            let eps = gauss_epsilon(ctx, id, sigma);
            honest.iter().map(|&p| p + eps).collect()
        };
        out.push((id, model));
    }
    Ok(out)
}

/// Coordinate-wise mean and sample (n−1) standard deviation.
pub fn mean_and_std(vectors: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>)> {
    if vectors.len() < 2 {
        return Err(Error::DegenerateStatistics(format!(
            "need at least 2 benign updates, got {}",
            vectors.len()
        )));
    }
    let n = vectors.len() as f64;
    let d = vectors[0].len();
    // Running mean: exact when every input agrees.
    let mut mean = vectors[0].to_vec();
    for (k, v) in vectors.iter().enumerate().skip(1) {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += (x - *m) / (k + 1) as f64;
        }
    }
    let mut var = vec![0.0; d];
    for v in vectors {
        for ((s, x), m) in var.iter_mut().zip(v.iter()).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|s| (s / (n - 1.0)).sqrt()).collect();
    Ok((mean, std))
}

/// LIE's `z`: `Φ⁻¹((n − b − s)/(n − b))` with `s = ⌊n/2⌋ + 1 − b`.
pub fn lie_z(n: usize, b: usize) -> f64 {
    let (n, b) = (n as f64, b as f64);
    let s = (n / 2.0).floor() + 1.0 - b;
    let p = (n - b - s) / (n - b);
    normal_quantile(p.clamp(LIE_CDF_CLAMP, 1.0 - LIE_CDF_CLAMP))
}

/// Every malicious client sends `μ − z·σ` of the benign updates.
pub fn attack_lie(ctx: &AttackContext) -> Result<ModelSet> {
    if ctx.num_malicious() == 0 {
        return Ok(Vec::new());
    }
    let (mean, std) = mean_and_std(&ctx.benign_refs())?;
    let z = lie_z(ctx.num_participants(), ctx.num_malicious());
    let model: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| m - z * s).collect();
    Ok(ctx.replicate(&model))
}

/// `−sign(μ)` per coordinate, with `sign(0) = 0`.
pub fn opt_direction(mean: &[f64]) -> Vec<f64> {
    mean.iter()
        .map(|&m| if m > 0.0 { -1.0 } else if m < 0.0 { 1.0 } else { 0.0 })
        .collect()
}

fn coordinate_mean(vectors: &[&[f64]]) -> Vec<f64> {
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn shifted(base: &[f64], dir: &[f64], scale: f64) -> Vec<f64> {
    base.iter().zip(dir).map(|(b, s)| b + scale * s).collect()
}

/// Halving search on `λ` for the candidate `μ + λ·s`. A step succeeds when
/// `aggregator` over benign ∪ malicious lands strictly closer to the
/// candidate than to the clean aggregate.
pub fn attack_opt(
    ctx: &AttackContext,
    tau: f64,
    lambda_init: f64,
    aggregator: &Aggregator,
) -> Result<SearchOutcome> {
    if ctx.benign_updates.is_empty() {
        return Err(Error::DegenerateStatistics("OPT needs at least 1 benign update".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let mean = coordinate_mean(&ctx.benign_refs());
    let dir = opt_direction(&mean);
    if ctx.num_malicious() == 0 {
        return Ok(SearchOutcome {
            models: Vec::new(),
            search: halving_search(lambda_init, tau, |_| true),
        });
    }
    let clean = aggregator
        .with_num_malicious(0)
        .aggregate(&AggregationInput::new(ctx.benign_updates.clone())?, ctx.rng_seed)?
        .model;
    let mut failure: Option<Error> = None;
    let search = halving_search(lambda_init, tau, |lambda| {
        if failure.is_some() {
            return false;
        }
        let candidate = shifted(&mean, &dir, lambda);
        let mut all = ctx.benign_updates.clone();
        all.extend(ctx.replicate(&candidate));
        let poisoned = AggregationInput::new(all).and_then(|input| aggregator.aggregate(&input, ctx.rng_seed));
        match poisoned {
            Ok(agg) => sq_dist(&agg.model, &candidate) < sq_dist(&agg.model, &clean),
            Err(e) => {
                failure = Some(e);
                false
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(SearchOutcome {
        models: ctx.replicate(&shifted(&mean, &dir, search.value)),
        search,
    })
}

/// AGR-MM perturbation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    /// `−μ/‖μ‖`.
    UnitVector,
    /// Negated, unit-normalised coordinate std.
    InvStd,
    /// Negated, unit-normalised element-wise reciprocal of the std
    /// (coordinates with zero spread contribute 0).
    ReciprocalStd,
}

impl Perturbation {
    pub fn name(&self) -> &'static str {
        match self {
            Perturbation::UnitVector => "uv",
            Perturbation::InvStd => "std",
            Perturbation::ReciprocalStd => "inv_std",
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uv" | "unit_vector" => Ok(Perturbation::UnitVector),
            "std" => Ok(Perturbation::InvStd),
            "inv_std" | "reciprocal_std" => Ok(Perturbation::ReciprocalStd),
            other => Err(Error::Config(format!("unknown perturbation '{other}'"))),
        }
    }
}

fn negated_unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm2(&v);
    if n == 0.0 || !n.is_finite() {
        return vec![0.0; v.len()];
    }
    v.into_iter().map(|x| -x / n).collect()
}

pub fn perturbation_vector(mean: &[f64], std: &[f64], kind: Perturbation) -> Vec<f64> {
    match kind {
        Perturbation::UnitVector => negated_unit(mean.to_vec()),
        Perturbation::InvStd => negated_unit(std.to_vec()),
        Perturbation::ReciprocalStd => {
            negated_unit(std.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 0.0 }).collect())
        }
    }
}

/// Min-Max: `μ + γ·∇p` with the largest halving-search `γ` whose maximum
/// distance to any benign update stays within the benign diameter.
pub fn attack_agr_mm(
    ctx: &AttackContext,
    tau: f64,
    gamma_init: f64,
    perturbation: Perturbation,
) -> Result<SearchOutcome> {
    let benign = ctx.benign_refs();
    let (mean, std) = mean_and_std(&benign)?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let dir = perturbation_vector(&mean, &std, perturbation);
    let mut diameter = 0.0f64;
    for i in 0..benign.len() {
        for j in i + 1..benign.len() {
            diameter = diameter.max(sq_dist(benign[i], benign[j]));
        }
    }
    let search = halving_search(gamma_init, tau, |gamma| {
        let candidate = shifted(&mean, &dir, gamma);
        benign.iter().all(|b| sq_dist(&candidate, b) <= diameter)
    });
    Ok(SearchOutcome {
        models: ctx.replicate(&shifted(&mean, &dir, search.value)),
        search,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Knowledge {
    Omniscient,
    NonOmniscient,
}

impl FromStr for Knowledge {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omniscient" => Ok(Knowledge::Omniscient),
            "non_omniscient" => Ok(Knowledge::NonOmniscient),
            other => Err(Error::Config(format!("unknown attacker knowledge '{other}'"))),
        }
    }
}

/// MAR-aware attack. `own_history` holds, oldest first, the attacker's
/// past models restricted to `indices` (one column per controlled slot);
/// `indices` is the server's sample when omniscient and the attacker's guess
/// otherwise. The forecast for slot `j` replaces those coordinates of the
/// `j`-th malicious client's honest model.
pub fn attack_adaptive(
    ctx: &AttackContext,
    honest_locals: &ModelSet,
    own_history: &[UpdateMatrix],
    indices: &[usize],
    als_iters: usize,
) -> Result<ModelSet> {
    if ctx.num_malicious() == 0 {
        return Ok(Vec::new());
    }
    if own_history.len() < 2 {
        return Err(Error::DegenerateHistory(own_history.len()));
    }
    let window = HistoryWindow::from_matrices(own_history.to_vec())?;
    let model = estimate_mar(&window, als_iters, 0.0, 0.0)?;
    let next = forecast(&model, window.newest().expect("non-empty window"))?;
    if next.values.rows() != indices.len() || next.values.cols() != ctx.num_malicious() {
        return Err(Error::DimensionMismatch(format!(
            "attacker history is {}x{}, expected {}x{}",
            next.values.rows(),
            next.values.cols(),
            indices.len(),
            ctx.num_malicious()
        )));
    }
    let mut out = Vec::with_capacity(ctx.num_malicious());
    for (j, &id) in ctx.malicious_ids.iter().enumerate() {
        let honest = honest_locals
            .iter()
            .find(|(c, _)| *c == id)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::InvalidDimension(format!("no honest model for malicious client {id}")))?;
        let mut model = honest.clone();
        for (i, &p) in indices.iter().enumerate() {
            model[p] = next.values[(i, j)];
        }
        out.push((id, model));
    }
    Ok(out)
}

/// The attacker's history matrix for one round: `indices` of each
/// controlled model, in slot order.
pub fn attacker_matrix(models: &ModelSet, indices: &[usize], round_id: usize) -> Result<UpdateMatrix> {
    let mut values = Matrix::zeros(indices.len().max(1), models.len().max(1));
    for (j, (_, m)) in models.iter().enumerate() {
        for (i, &p) in indices.iter().enumerate() {
            values[(i, j)] = m[p];
        }
    }
    // Slots, not real clients: the controlled set changes every round.
    let slots = (0..models.len() as u32).map(ClientId).collect();
    UpdateMatrix::new(values, slots, round_id)
}

/// Attack selection with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec {
    None,
    Gauss { sigma: f64, per_coordinate: bool },
    Lie,
    Opt { tau: f64, lambda_init: f64 },
    AgrMm { tau: f64, gamma_init: f64, perturbation: Perturbation },
    Adaptive { knowledge: Knowledge },
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::Gauss { .. } => "gauss",
            AttackSpec::Lie => "lie",
            AttackSpec::Opt { .. } => "opt",
            AttackSpec::AgrMm { .. } => "agr_mm",
            AttackSpec::Adaptive { .. } => "adaptive",
        }
    }

    /// Default parameter block for a bare attack name.
    pub fn with_defaults(name: &str) -> Result<Self> {
        Ok(match name {
            "none" => AttackSpec::None,
            "gauss" => AttackSpec::Gauss {
                sigma: DEFAULT_SIGMA,
                per_coordinate: false,
            },
            "lie" => AttackSpec::Lie,
            "opt" => AttackSpec::Opt {
                tau: DEFAULT_TAU,
                lambda_init: DEFAULT_LAMBDA_INIT,
            },
            "agr_mm" => AttackSpec::AgrMm {
                tau: DEFAULT_TAU,
                gamma_init: DEFAULT_GAMMA_INIT,
                perturbation: Perturbation::InvStd,
            },
            "adaptive" => AttackSpec::Adaptive {
                knowledge: Knowledge::Omniscient,
            },
            other => return Err(Error::Config(format!("unknown attack '{other}'"))),
        })
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `name` or `name:key=value,key=value`, e.g. `gauss:sigma=5` or
/// `agr_mm:perturbation=uv`.
impl FromStr for AttackSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = match s.split_once(':') {
            Some((n, p)) => (n.trim(), p),
            None => (s.trim(), ""),
        };
        let mut spec = AttackSpec::with_defaults(name)?;
        for kv in params.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("attack parameter '{kv}' is not key=value")))?;
            let real = || {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("attack parameter {key}: bad number '{value}'")))
            };
            match (&mut spec, key) {
                (AttackSpec::Gauss { sigma, .. }, "sigma") => *sigma = real()?,
                (AttackSpec::Gauss { per_coordinate, .. }, "per_coordinate") => {
                    *per_coordinate = value
                        .parse()
                        .map_err(|_| Error::Config(format!("per_coordinate: bad bool '{value}'")))?
                }
                (AttackSpec::Opt { tau, .. } | AttackSpec::AgrMm { tau, .. }, "tau") => *tau = real()?,
                (AttackSpec::Opt { lambda_init, .. }, "lambda") => *lambda_init = real()?,
                (AttackSpec::AgrMm { gamma_init, .. }, "gamma") => *gamma_init = real()?,
                (AttackSpec::AgrMm { perturbation, .. }, "perturbation") => *perturbation = value.parse()?,
                (AttackSpec::Adaptive { knowledge }, "knowledge") => *knowledge = value.parse()?,
                _ => return Err(Error::Config(format!("attack '{name}' has no parameter '{key}'"))),
            }
        }
        Ok(spec)
    }
}

/// Standard normal quantile, Wichura's AS241 (about 16 significant digits).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}
