//! Round protocol and experiment driver.
//!
//! Each round: select `m` clients, corrupt `b` of them, train everyone
//! honestly from the global model, let the attacker rewrite the malicious
//! models, then aggregate. With the filter on, the first round goes through
//! the fallback rule and later rounds through the MAR filter followed by the
//! configured rule on the kept clients.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{AmendSource, ExperimentConfig, Task, Weighting};
use super::data::{load_idx_subset, partition_dirichlet, synthetic, ClientState, Dataset, SyntheticSpec};
use super::model::{local_train, Architecture, TrainSpec};
use crate::aggregators::{AggregationInput, Aggregator};
use crate::attacks::{
    attack_adaptive, attack_agr_mm, attack_gauss, attack_lie, attack_opt, attacker_matrix, AttackContext,
    AttackSpec, Knowledge, ModelSet,
};
use crate::error::{Error, Result};
use crate::filter::{amend_matrix, filter_round, sample_param_indices, AnomalyScores, ClientId, FilterParams, ScoreRow, UpdateMatrix};
use crate::mar::HistoryWindow;
use crate::metrics::{detection_pr, DetectionLedger, DetectionPr};
use crate::seeds::{self, Stream};

/// Everything recorded about one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round_id: usize,
    pub selected: Vec<ClientId>,
    pub malicious: BTreeSet<ClientId>,
    /// Selected clients excluded from the aggregate.
    pub flagged: BTreeSet<ClientId>,
    /// Whether the MAR filter made the decision this round.
    pub filtered: bool,
    pub accuracy: f64,
    pub precision_so_far: f64,
    pub recall_so_far: f64,
    /// Wall-clock time of the round.
    pub ms: u64,
    pub scores: Option<AnomalyScores>,
    /// Submitted models at the sampled coordinates, kept with
    /// `write_models = true`.
    pub observed: Option<UpdateMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub rounds: usize,
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_by_convention: bool,
    pub recall_by_convention: bool,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Only present with `record_timing = true`, so default output stays
    /// byte-reproducible.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    pub ledger: DetectionLedger,
    /// Wall-clock total, whether or not it is written to the summary.
    pub elapsed_ms: u64,
}

pub const ROUNDS_CSV_HEADER: [&str; 7] = [
    "round_id",
    "accuracy",
    "precision_so_far",
    "recall_so_far",
    "flagged_ids",
    "malicious_ids",
    "ms",
];

fn join_ids(ids: &BTreeSet<ClientId>) -> String {
    ids.iter().map(|id| id.0.to_string()).collect::<Vec<_>>().join(";")
}

/// Leading columns of `models.csv`; one `p<i>` column per sampled coordinate
/// follows.
pub const MODELS_CSV_PREFIX: [&str; 3] = ["round_id", "client_id", "malicious"];

impl ExperimentResult {
    /// `rounds.csv`; id lists are `;`-separated. `ms` is 0 unless the config
    /// asked for timings.
    pub fn write_rounds_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(ROUNDS_CSV_HEADER)?;
        for r in &self.records {
            let ms = if self.summary.config.record_timing { r.ms } else { 0 };
            out.write_record([
                r.round_id.to_string(),
                r.accuracy.to_string(),
                r.precision_so_far.to_string(),
                r.recall_so_far.to_string(),
                join_ids(&r.flagged),
                join_ids(&r.malicious),
                ms.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("rounds.csv", e))?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)? + "\n")
    }

    /// `models.csv`: one row per submitted model, restricted to the sampled
    /// coordinates. Rounds without a stored matrix are skipped.
    pub fn write_models_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let width = self
            .records
            .iter()
            .find_map(|r| r.observed.as_ref().map(|m| m.values.rows()))
            .unwrap_or(0);
        let mut header: Vec<String> = MODELS_CSV_PREFIX.iter().map(|s| s.to_string()).collect();
        header.extend((0..width).map(|i| format!("p{i}")));
        out.write_record(&header)?;
        for r in &self.records {
            let Some(m) = &r.observed else { continue };
            for (j, id) in m.client_ids.iter().enumerate() {
                let mut row = vec![
                    r.round_id.to_string(),
                    id.0.to_string(),
                    u8::from(r.malicious.contains(id)).to_string(),
                ];
                row.extend((0..m.values.rows()).map(|i| m.values[(i, j)].to_string()));
                out.write_record(&row)?;
            }
        }
        out.flush().map_err(|e| Error::io("models.csv", e))?;
        Ok(())
    }

    /// Per-client anomaly scores of every filtered round.
    pub fn score_rows(&self) -> Vec<ScoreRow> {
        let mut rows = Vec::new();
        for r in &self.records {
            let Some(scores) = &r.scores else { continue };
            for e in &scores.entries {
                rows.push(ScoreRow {
                    round_id: r.round_id,
                    client_id: e.client_id,
                    score: Some(e.score),
                    flagged: r.flagged.contains(&e.client_id),
                    truth: r.malicious.contains(&e.client_id),
                });
            }
        }
        rows
    }
}

/// Simulation state carried from round to round.
pub struct Experiment {
    cfg: ExperimentConfig,
    arch: Architecture,
    train_spec: TrainSpec,
    clients: Vec<ClientState>,
    test: Dataset,
    global: Vec<f64>,
    indices: Vec<usize>,
    attacker_indices: Vec<usize>,
    history: HistoryWindow,
    last_observed: Option<UpdateMatrix>,
    attacker_history: VecDeque<UpdateMatrix>,
    attack: AttackSpec,
    aggregator: Aggregator,
    fallback: Aggregator,
    ledger: DetectionLedger,
    round: usize,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_task(&cfg)?;
        let mut part_rng = seeds::rng(cfg.seed, Stream::Partition, 0, 0);
        let clients = partition_dirichlet(&train, cfg.num_clients, cfg.alpha_d, &mut part_rng)?;
        let arch = Architecture {
            input: train.dim,
            hidden: cfg.hidden,
            classes: train.num_classes,
        };
        let global = arch.init(&mut seeds::rng(cfg.seed, Stream::Init, 0, 0));
        let d = arch.num_params();
        let d_tilde = cfg.d_tilde.min(d);
        let indices = sample_param_indices(d, d_tilde, seeds::derive(cfg.seed, Stream::ParamSample, 0, 0))?;

        let attack = cfg.attack_spec()?;
        let attacker_indices = match attack {
            AttackSpec::Adaptive {
                knowledge: Knowledge::NonOmniscient,
            } => {
                let last = arch.last_layer();
                let take = d_tilde.min(last.len());
                sample_param_indices(last.len(), take, seeds::derive(cfg.seed, Stream::ParamSample, 0, 1))?
                    .into_iter()
                    .map(|i| i + last.start)
                    .collect()
            }
            _ => indices.clone(),
        };

        Ok(Self {
            train_spec: TrainSpec {
                epochs: cfg.epochs,
                lr: cfg.lr,
                batch: cfg.batch,
            },
            history: HistoryWindow::new(cfg.l)?,
            last_observed: None,
            attacker_history: VecDeque::new(),
            aggregator: cfg.aggregator_rule()?,
            fallback: cfg.fallback_rule()?,
            attack,
            arch,
            clients,
            test,
            global,
            indices,
            attacker_indices,
            ledger: DetectionLedger::new(),
            round: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn global_model(&self) -> &[f64] {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    /// Parameter coordinates tracked by the filter.
    pub fn sampled_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn ledger(&self) -> &DetectionLedger {
        &self.ledger
    }

    pub fn accuracy(&self) -> f64 {
        self.arch.accuracy(&self.global, &self.test)
    }

    fn select_clients(&self, t: usize) -> Vec<ClientId> {
        let k = self.cfg.num_clients;
        let mut selected: Vec<ClientId> = if self.cfg.m == k {
            (0..k as u32).map(ClientId).collect()
        } else {
            let mut rng = seeds::rng(self.cfg.seed, Stream::Selection, t as u64, 0);
            rand::seq::index::sample(&mut rng, k, self.cfg.m)
                .into_iter()
                .map(|i| ClientId(i as u32))
                .collect()
        };
        selected.sort_unstable();
        selected
    }

    /// `⌈r·m⌉` malicious clients among the selected, re-drawn every round.
    /// With `fixed_malicious` a set of `⌈r·K⌉` clients is drawn once and the
    /// round's attackers are whichever of them were selected.
    fn draw_malicious(&self, t: usize, selected: &[ClientId]) -> BTreeSet<ClientId> {
        if self.cfg.fixed_malicious {
            let mut rng = seeds::rng(self.cfg.seed, Stream::Malicious, 0, 0);
            let mut pool: Vec<ClientId> = (0..self.cfg.num_clients as u32).map(ClientId).collect();
            pool.shuffle(&mut rng);
            let fixed: BTreeSet<ClientId> = pool.into_iter().take(self.cfg.num_corrupted()).collect();
            return selected.iter().filter(|id| fixed.contains(id)).copied().collect();
        }
        let mut rng = seeds::rng(self.cfg.seed, Stream::Malicious, t as u64, 0);
        let mut pool = selected.to_vec();
        pool.shuffle(&mut rng);
        pool.into_iter().take(self.cfg.num_malicious()).collect()
    }

    /// Honest local training of every selected client, ordered by id.
    pub fn train_selected(&self, t: usize, selected: &[ClientId]) -> ModelSet {
        selected
            .iter()
            .map(|&id| {
                let mut rng = seeds::rng(self.cfg.seed, Stream::LocalTrain, t as u64, u64::from(id.0));
                let data = &self.clients[id.0 as usize].data;
                (id, local_train(&self.arch, &self.global, data, &self.train_spec, &mut rng))
            })
            .collect()
    }

    /// Replaces the malicious entries of `honest` by the attacker's models.
    fn apply_attack(&mut self, t: usize, honest: &ModelSet, malicious: &BTreeSet<ClientId>) -> Result<ModelSet> {
        let benign: ModelSet = honest.iter().filter(|(id, _)| !malicious.contains(id)).cloned().collect();
        let own: ModelSet = honest.iter().filter(|(id, _)| malicious.contains(id)).cloned().collect();
        let ctx = AttackContext::new(
            benign,
            malicious.clone(),
            self.global.clone(),
            seeds::derive(self.cfg.seed, Stream::Attack, t as u64, 0),
        )?;
        let b = malicious.len();
        let crafted = match &self.attack {
            AttackSpec::None => own.clone(),
            _ if b == 0 => Vec::new(),
            AttackSpec::Gauss { sigma, per_coordinate } => attack_gauss(&ctx, &own, *sigma, *per_coordinate)?,
            AttackSpec::Lie => attack_lie(&ctx)?,
            AttackSpec::Opt { tau, lambda_init } => {
                attack_opt(&ctx, *tau, *lambda_init, &self.aggregator.with_num_malicious(b))?.models
            }
            AttackSpec::AgrMm {
                tau,
                gamma_init,
                perturbation,
            } => attack_agr_mm(&ctx, *tau, *gamma_init, *perturbation)?.models,
            AttackSpec::Adaptive { .. } => {
                let history: Vec<UpdateMatrix> = self.attacker_history.iter().cloned().collect();
                let out = if history.len() >= 2 {
                    attack_adaptive(&ctx, &own, &history, &self.attacker_indices, self.cfg.als_iters)?
                } else {
                    own.clone()
                };
                let window = self.cfg.l.max(2);
                let round_id = self.attacker_history.back().map_or(0, |m| m.round_id + 1);
                self.attacker_history.push_back(attacker_matrix(&own, &self.attacker_indices, round_id)?);
                while self.attacker_history.len() > window {
                    self.attacker_history.pop_front();
                }
                out
            }
        };
        let mut submitted = honest.clone();
        for (id, model) in crafted {
            if let Some(slot) = submitted.iter_mut().find(|(c, _)| *c == id) {
                slot.1 = model;
            }
        }
        Ok(submitted)
    }

    fn aggregation_input(&self, models: ModelSet) -> Result<AggregationInput> {
        let input = AggregationInput::new(models)?;
        match self.cfg.weighting {
            Weighting::Uniform => Ok(input),
            Weighting::Samples => {
                let ids = input.ids();
                let sizes: Vec<f64> = ids.iter().map(|id| self.clients[id.0 as usize].data.len() as f64).collect();
                let total: f64 = sizes.iter().sum();
                let weights: Vec<(ClientId, f64)> = ids.into_iter().zip(sizes).map(|(id, n)| (id, n / total)).collect();
                input.with_weights(&weights)
            }
        }
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let start = Instant::now();
        let t = self.round + 1;
        let selected = self.select_clients(t);
        let malicious = self.draw_malicious(t, &selected);
        let b = malicious.len();
        let honest = self.train_selected(t, &selected);
        let submitted = self.apply_attack(t, &honest, &malicious)?;
        let agg_seed = seeds::derive(self.cfg.seed, Stream::Aggregator, t as u64, 0);

        let exported = if self.cfg.write_models {
            let columns: Vec<(ClientId, &[f64])> = submitted.iter().map(|(id, v)| (*id, v.as_slice())).collect();
            Some(UpdateMatrix::from_sampled(&columns, &self.indices, t)?)
        } else {
            None
        };

        let mut scores = None;
        let (model, flagged) = if !self.cfg.filter_enabled {
            let agg = self
                .aggregator
                .with_num_malicious(b)
                .aggregate(&self.aggregation_input(submitted)?, agg_seed)?;
            let flagged = selected.iter().filter(|id| !agg.contributors.contains(id)).copied().collect();
            (agg.model, flagged)
        } else {
            let columns: Vec<(ClientId, &[f64])> = submitted.iter().map(|(id, v)| (*id, v.as_slice())).collect();
            let observed = UpdateMatrix::from_sampled(&columns, &self.indices, t)?;
            let global_sampled: Vec<f64> = self.indices.iter().map(|&i| self.global[i]).collect();
            let (model, flagged) = if self.history.is_empty() {
                let agg = self
                    .fallback
                    .with_num_malicious(b)
                    .aggregate(&self.aggregation_input(submitted)?, agg_seed)?;
                let flagged: BTreeSet<ClientId> =
                    selected.iter().filter(|id| !agg.contributors.contains(id)).copied().collect();
                (agg.model, flagged)
            } else {
                let params = FilterParams {
                    k: self.cfg.kept(),
                    als_iters: self.cfg.als_iters,
                    ridge_a: self.cfg.ridge,
                    ridge_b: self.cfg.ridge,
                };
                let outcome = filter_round(&self.history, &observed, &global_sampled, &params)?;
                let flagged = outcome.flagged(&observed);
                let kept: ModelSet = submitted.into_iter().filter(|(id, _)| outcome.kept.contains(id)).collect();
                let agg = self
                    .aggregator
                    .with_num_malicious(0)
                    .aggregate(&self.aggregation_input(kept)?, agg_seed)?;
                scores = Some(outcome.scores);
                (agg.model, flagged)
            };
            let previous = match self.cfg.amend_source {
                AmendSource::Observed => self.last_observed.as_ref(),
                AmendSource::Amended => self.history.newest(),
            };
            let amended = amend_matrix(&observed, &flagged, previous, &global_sampled);
            self.history.push(amended)?;
            self.last_observed = Some(observed);
            (model, flagged)
        };

        self.global = model;
        self.round = t;
        if t >= 2 {
            self.ledger.record(flagged.clone(), malicious.clone());
        }
        let pr = detection_pr(&self.ledger);
        Ok(RoundRecord {
            round_id: t,
            selected,
            malicious,
            flagged,
            filtered: scores.is_some(),
            accuracy: self.accuracy(),
            precision_so_far: pr.precision,
            recall_so_far: pr.recall,
            ms: start.elapsed().as_millis() as u64,
            scores,
            observed: exported,
        })
    }

    /// Runs the remaining rounds up to `T`.
    pub fn run(mut self) -> Result<ExperimentResult> {
        let start = Instant::now();
        let mut records = Vec::with_capacity(self.cfg.rounds);
        while self.round < self.cfg.rounds {
            records.push(self.run_round()?);
        }
        let elapsed_ms = start.elapsed().as_millis() as u64;
        let pr: DetectionPr = detection_pr(&self.ledger);
        let best = records.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
        let summary = Summary {
            rounds: records.len(),
            best_accuracy: best,
            final_accuracy: records.last().map_or(0.0, |r| r.accuracy),
            precision: pr.precision,
            recall: pr.recall,
            precision_by_convention: pr.precision_by_convention,
            recall_by_convention: pr.recall_by_convention,
            tp: self.ledger.tp,
            fp: self.ledger.fp,
            fn_: self.ledger.fn_,
            runtime_ms: self.cfg.record_timing.then_some(elapsed_ms),
            config: self.cfg.clone(),
        };
        Ok(ExperimentResult {
            records,
            summary,
            ledger: self.ledger,
            elapsed_ms,
        })
    }
}

/// Runs a whole experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    Experiment::new(cfg.clone())?.run()
}

/// Builds `(train, test)` for the configured task.
pub fn load_task(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let mut rng = seeds::rng(cfg.seed, Stream::Data, 0, 0);
    match cfg.task {
        Task::SyntheticLogreg => synthetic(
            &SyntheticSpec {
                num_classes: cfg.num_classes,
                dim: cfg.features,
                train_size: cfg.train_size,
                test_size: cfg.test_size,
                noise: cfg.noise,
            },
            &mut rng,
        ),
        Task::MnistSubset => {
            let images = cfg.idx_images.as_deref().expect("validated");
            let labels = cfg.idx_labels.as_deref().expect("validated");
            let all = load_idx_subset(images, labels, cfg.idx_limit, &mut rng)?;
            let mut order: Vec<usize> = (0..all.len()).collect();
            order.shuffle(&mut rng);
            let n_test = ((all.len() as f64) * cfg.test_frac).round() as usize;
            let (test_idx, train_idx) = order.split_at(n_test.min(all.len().saturating_sub(1)));
            let mut train_idx = train_idx.to_vec();
            let mut test_idx = test_idx.to_vec();
            train_idx.sort_unstable();
            test_idx.sort_unstable();
            Ok((all.subset(&train_idx), all.subset(&test_idx)))
        }
    }
}
