//! Experiment configuration: a flat `key = value` text format.
//!
//! ```text
//! # comments and blank lines are ignored
//! K = 20
//! m = 20
//! r = 0.2
//! attack = gauss:sigma=10
//! aggregator = fedavg
//! ```
//!
//! Precedence, lowest first: built-in defaults, the file, `FLSIM_SEED`,
//! then explicit overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::aggregators::Aggregator;
use crate::attacks::AttackSpec;
use crate::error::{Error, Result};

pub const SEED_ENV: &str = "FLSIM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SyntheticLogreg,
    MnistSubset,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::SyntheticLogreg => "synthetic_logreg",
            Task::MnistSubset => "mnist_subset",
        }
    }
}

/// Which earlier matrix supplies replacement columns for flagged clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AmendSource {
    /// The matrix observed in the previous round, before amendment.
    Observed,
    /// The previous amended matrix, as stored in the history window.
    Amended,
}

/// Per-client aggregation weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    #[serde(rename = "K")]
    pub num_clients: usize,
    pub m: usize,
    pub r: f64,
    #[serde(rename = "T")]
    pub rounds: usize,
    /// `None` keeps `m − b`.
    pub k: Option<usize>,
    pub l: usize,
    pub d_tilde: usize,
    pub als_iters: usize,
    pub ridge: f64,
    pub alpha_d: f64,
    pub seed: u64,
    pub task: Task,
    pub attack: String,
    pub aggregator: String,
    pub fallback: String,
    pub filter_enabled: bool,
    pub amend_source: AmendSource,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub features: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub noise: f64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub idx_limit: usize,
    pub test_frac: f64,
    pub weighting: Weighting,
    pub record_timing: bool,
    pub write_scores: bool,
    /// Export the submitted models at the sampled coordinates (`models.csv`).
    pub write_models: bool,
    /// Draw the corrupted clients once instead of every round.
    pub fixed_malicious: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_clients: 20,
            m: 20,
            r: 0.0,
            rounds: 20,
            k: None,
            l: 2,
            d_tilde: 100,
            als_iters: 100,
            ridge: 0.0,
            alpha_d: 0.5,
            seed: 0,
            task: Task::SyntheticLogreg,
            attack: "none".into(),
            aggregator: "fedavg".into(),
            fallback: "multi_krum".into(),
            filter_enabled: true,
            amend_source: AmendSource::Amended,
            epochs: 1,
            lr: 0.1,
            batch: 16,
            hidden: 0,
            num_classes: 5,
            features: 20,
            train_size: 2000,
            test_size: 1000,
            noise: 0.25,
            idx_images: None,
            idx_labels: None,
            idx_limit: 2000,
            test_frac: 0.2,
            weighting: Weighting::Uniform,
            record_timing: false,
            write_scores: false,
            write_models: false,
            fixed_malicious: false,
        }
    }
}

/// Every accepted key, in the order [`ExperimentConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "K",
    "m",
    "r",
    "T",
    "k",
    "l",
    "d_tilde",
    "als_iters",
    "ridge",
    "alpha_d",
    "seed",
    "task",
    "attack",
    "aggregator",
    "fallback",
    "filter_enabled",
    "amend_source",
    "epochs",
    "lr",
    "batch",
    "hidden",
    "num_classes",
    "features",
    "train_size",
    "test_size",
    "noise",
    "idx_images",
    "idx_labels",
    "idx_limit",
    "test_frac",
    "weighting",
    "record_timing",
    "write_scores",
    "write_models",
    "fixed_malicious",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

/// `⌈r·n⌉`, guarding against `0.3·10 = 3.0000000000000004` style roundoff.
fn ceil_fraction(r: f64, n: usize) -> usize {
    let exact = r * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults (no environment, no validation).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Reads a file, applies `FLSIM_SEED` if set, then `overrides`, and
    /// validates the result.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_text(&text)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set("seed", seed.trim())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "K" => self.num_clients = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "r" => self.r = parse(key, value)?,
            "T" => self.rounds = parse(key, value)?,
            "k" => {
                self.k = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "l" => self.l = parse(key, value)?,
            "d_tilde" => self.d_tilde = parse(key, value)?,
            "als_iters" => self.als_iters = parse(key, value)?,
            "ridge" => self.ridge = parse(key, value)?,
            "alpha_d" => self.alpha_d = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "task" => {
                self.task = match value {
                    "synthetic_logreg" => Task::SyntheticLogreg,
                    "mnist_subset" => Task::MnistSubset,
                    other => return Err(Error::Config(format!("unknown task '{other}'"))),
                }
            }
            "attack" => {
                value.parse::<AttackSpec>()?;
                self.attack = value.into();
            }
            "aggregator" => {
                value.parse::<Aggregator>()?;
                self.aggregator = value.into();
            }
            "fallback" => {
                value.parse::<Aggregator>()?;
                self.fallback = value.into();
            }
            "filter_enabled" => self.filter_enabled = parse_bool(key, value)?,
            "amend_source" => {
                self.amend_source = match value {
                    "observed" => AmendSource::Observed,
                    "amended" => AmendSource::Amended,
                    other => return Err(Error::Config(format!("unknown amend_source '{other}'"))),
                }
            }
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "features" => self.features = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "idx_images" => self.idx_images = Some(value.into()),
            "idx_labels" => self.idx_labels = Some(value.into()),
            "idx_limit" => self.idx_limit = parse(key, value)?,
            "test_frac" => self.test_frac = parse(key, value)?,
            "weighting" => {
                self.weighting = match value {
                    "uniform" => Weighting::Uniform,
                    "samples" => Weighting::Samples,
                    other => return Err(Error::Config(format!("unknown weighting '{other}'"))),
                }
            }
            "record_timing" => self.record_timing = parse_bool(key, value)?,
            "write_scores" => self.write_scores = parse_bool(key, value)?,
            "write_models" => self.write_models = parse_bool(key, value)?,
            "fixed_malicious" => self.fixed_malicious = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Current value of `key` as config text.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "K" => self.num_clients.to_string(),
            "m" => self.m.to_string(),
            "r" => self.r.to_string(),
            "T" => self.rounds.to_string(),
            "k" => self.k.map_or_else(|| "auto".into(), |k| k.to_string()),
            "l" => self.l.to_string(),
            "d_tilde" => self.d_tilde.to_string(),
            "als_iters" => self.als_iters.to_string(),
            "ridge" => self.ridge.to_string(),
            "alpha_d" => self.alpha_d.to_string(),
            "seed" => self.seed.to_string(),
            "task" => self.task.name().into(),
            "attack" => self.attack.clone(),
            "aggregator" => self.aggregator.clone(),
            "fallback" => self.fallback.clone(),
            "filter_enabled" => self.filter_enabled.to_string(),
            "amend_source" => match self.amend_source {
                AmendSource::Observed => "observed".into(),
                AmendSource::Amended => "amended".into(),
            },
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "hidden" => self.hidden.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "features" => self.features.to_string(),
            "train_size" => self.train_size.to_string(),
            "test_size" => self.test_size.to_string(),
            "noise" => self.noise.to_string(),
            "idx_images" => path(&self.idx_images),
            "idx_labels" => path(&self.idx_labels),
            "idx_limit" => self.idx_limit.to_string(),
            "test_frac" => self.test_frac.to_string(),
            "weighting" => match self.weighting {
                Weighting::Uniform => "uniform".into(),
                Weighting::Samples => "samples".into(),
            },
            "record_timing" => self.record_timing.to_string(),
            "write_scores" => self.write_scores.to_string(),
            "write_models" => self.write_models.to_string(),
            "fixed_malicious" => self.fixed_malicious.to_string(),
            _ => return None,
        })
    }

    /// Canonical text form; parsing it back gives the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key).unwrap_or_default();
            if value.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Malicious clients per round, `⌈r·m⌉`.
    pub fn num_malicious(&self) -> usize {
        ceil_fraction(self.r, self.m)
    }

    /// Size of the corrupted set under `fixed_malicious`, `⌈r·K⌉`.
    pub fn num_corrupted(&self) -> usize {
        ceil_fraction(self.r, self.num_clients)
    }

    /// Clients forwarded by the filter.
    pub fn kept(&self) -> usize {
        self.k.unwrap_or_else(|| self.m.saturating_sub(self.num_malicious()).max(1))
    }

    pub fn attack_spec(&self) -> Result<AttackSpec> {
        self.attack.parse()
    }

    pub fn aggregator_rule(&self) -> Result<Aggregator> {
        self.aggregator.parse()
    }

    pub fn fallback_rule(&self) -> Result<Aggregator> {
        self.fallback.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.m == 0 || self.m > self.num_clients {
            return fail(format!("need 1 <= m <= K, got m={} K={}", self.m, self.num_clients));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return fail(format!("r must be in [0, 1], got {}", self.r));
        }
        if self.num_malicious() > self.m {
            return fail(format!("b = {} exceeds m = {}", self.num_malicious(), self.m));
        }
        let k = self.kept();
        if k == 0 || k > self.m {
            return fail(format!("need 1 <= k <= m, got k={k} m={}", self.m));
        }
        if self.l < 2 {
            return fail(format!("window l must be >= 2, got {}", self.l));
        }
        if self.rounds == 0 {
            return fail("T must be >= 1".into());
        }
        if self.d_tilde == 0 {
            return fail("d_tilde must be >= 1".into());
        }
        if !(self.alpha_d > 0.0) {
            return fail(format!("alpha_d must be > 0, got {}", self.alpha_d));
        }
        if !(self.lr >= 0.0) {
            return fail(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(self.ridge >= 0.0) {
            return fail(format!("ridge must be >= 0, got {}", self.ridge));
        }
        if !(0.0..1.0).contains(&self.test_frac) {
            return fail(format!("test_frac must be in [0, 1), got {}", self.test_frac));
        }
        if self.task == Task::MnistSubset && (self.idx_images.is_none() || self.idx_labels.is_none()) {
            return fail("mnist_subset needs idx_images and idx_labels".into());
        }
        self.attack_spec()?;
        self.aggregator_rule()?;
        self.fallback_rule()?;
        Ok(())
    }
}
