//! Command implementations behind the `flsim` binary.
//!
//! Every command writes its outputs into a staging location next to the
//! target and renames on success, so a failed run never leaves a partially
//! written directory or file behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::{write_scores_csv, ClientId};
use crate::metrics::{avg_tdmi, detection_pr, prob_at_least_one_malicious, welch_one_tailed_t, DetectionLedger, WelchTest};
use crate::sim::{run_experiment, ExperimentConfig, ExperimentResult, Summary};

pub const EXIT_OK: i32 = 0;
/// Usage, config and missing-input errors.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const DEFAULT_SWEEP_CAP: usize = 256;

pub const SWEEP_SUMMARY_METRICS: [&str; 7] =
    ["best_accuracy", "final_accuracy", "precision", "recall", "tp", "fp", "fn"];
pub const TDMI_CSV_HEADER: [&str; 4] = ["client_id", "round_pair", "avg_tdmi", "poisoned"];

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CapExceeded { .. } | Error::MissingArtifact(_) | Error::InvalidCounts(_) => {
                EXIT_CONFIG
            }
            _ => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    /// SHA-256 of the resolved config text, framed like a git blob.
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// `sha256("blob <len>\0" ‖ text)` as lowercase hex.
pub fn config_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got '{s}'")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// One swept key and its values, parsed from `key=v1,v2,...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, list) = parse_override(s)?;
        let values: Vec<String> = list
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::Config(format!("sweep over '{key}' has no values")));
        }
        Ok(Self { key, values })
    }
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn expand_sweep(axes: &[SweepAxis]) -> Vec<Vec<(String, String)>> {
    let mut combos = vec![Vec::new()];
    for axis in axes {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sibling(path, "tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// A directory being filled before it is moved into place.
struct Staging {
    tmp: PathBuf,
    target: PathBuf,
}

impl Staging {
    fn new(target: &Path, force: bool) -> Result<Self> {
        if let Ok(mut entries) = fs::read_dir(target) {
            if entries.next().is_some() && !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty (use --force to replace it)",
                    target.display()
                )));
            }
        } else if target.exists() {
            return Err(Error::Config(format!("{} exists and is not a directory", target.display())));
        }
        if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = sibling(target, "staging");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self {
            tmp,
            target: target.to_path_buf(),
        })
    }

    fn commit(self) -> Result<()> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| Error::io(&self.target, e))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(|e| Error::io(&self.target, e))?;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        // No-op after a successful commit; cleans up after a failure.
        let _ = fs::remove_dir_all(&self.tmp);
    }
}

/// Writes `rounds.csv`, `summary.json` and, if requested by the config,
/// `scores.csv` and `models.csv` into `dir`.
pub fn write_run_outputs(result: &ExperimentResult, dir: &Path) -> Result<()> {
    let mut buf = Vec::new();
    result.write_rounds_csv(&mut buf)?;
    write_atomic(&dir.join("rounds.csv"), &buf)?;
    write_atomic(&dir.join("summary.json"), result.summary_json()?.as_bytes())?;
    if result.summary.config.write_scores {
        let mut buf = Vec::new();
        write_scores_csv(&result.score_rows(), &mut buf)?;
        write_atomic(&dir.join("scores.csv"), &buf)?;
    }
    if result.summary.config.write_models {
        let mut buf = Vec::new();
        result.write_models_csv(&mut buf)?;
        write_atomic(&dir.join("models.csv"), &buf)?;
    }
    Ok(())
}

fn write_manifest(cfg: &ExperimentConfig, config_path: &Path, out: &Path, dir: &Path) -> Result<RunManifest> {
    let text = cfg.to_text();
    let manifest = RunManifest {
        config_path: config_path.to_path_buf(),
        out_dir: out.to_path_buf(),
        config_hash: config_hash(&text),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    write_atomic(&dir.join("config.txt"), text.as_bytes())?;
    write_atomic(&dir.join("manifest.json"), (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
    Ok(manifest)
}

/// `run`: one experiment into `out`.
pub fn cmd_run(config_path: &Path, out: &Path, overrides: &[(String, String)], force: bool) -> Result<Summary> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    let staging = Staging::new(out, force)?;
    let result = run_experiment(&cfg)?;
    write_run_outputs(&result, &staging.tmp)?;
    write_manifest(&cfg, config_path, out, &staging.tmp)?;
    staging.commit()?;
    Ok(result.summary)
}

/// Options of [`cmd_sweep`] beyond the config and output paths.
#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub overrides: Vec<(String, String)>,
    pub axes: Vec<SweepAxis>,
    pub jobs: usize,
    pub cap: usize,
    pub force: bool,
}

/// `sweep`: one sub-directory per combination plus `sweep_summary.csv`.
/// Without axes this is [`cmd_run`] plus a one-row summary. Returns the
/// number of runs.
pub fn cmd_sweep(config_path: &Path, out: &Path, opts: &SweepOptions) -> Result<usize> {
    let combos = expand_sweep(&opts.axes);
    if combos.len() > opts.cap {
        return Err(Error::CapExceeded {
            runs: combos.len(),
            cap: opts.cap,
        });
    }
    let keys: Vec<String> = opts.axes.iter().map(|a| a.key.clone()).collect();
    let mut configs = Vec::with_capacity(combos.len());
    for combo in &combos {
        let mut all = opts.overrides.clone();
        all.extend(combo.iter().cloned());
        configs.push(ExperimentConfig::load(config_path, &all)?);
    }

    let staging = Staging::new(out, opts.force)?;
    let names: Vec<String> = if opts.axes.is_empty() {
        vec![String::new()]
    } else {
        combos.iter().enumerate().map(|(i, c)| run_dir_name(i, c)).collect()
    };

    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<usize, Result<Summary>>> = Mutex::new(BTreeMap::new());
    let jobs = opts.jobs.clamp(1, configs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let dir = staging.tmp.join(&names[i]);
                let outcome = fs::create_dir_all(&dir)
                    .map_err(|e| Error::io(&dir, e))
                    .and_then(|_| run_experiment(&configs[i]))
                    .and_then(|res| {
                        write_run_outputs(&res, &dir)?;
                        write_manifest(&configs[i], config_path, &out.join(&names[i]), &dir)?;
                        Ok(res.summary)
                    });
                results.lock().expect("no panics while holding the lock").insert(i, outcome);
            });
        }
    });

    let mut summaries = Vec::with_capacity(configs.len());
    for (_, outcome) in results.into_inner().expect("threads joined") {
        summaries.push(outcome?);
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run".to_string()];
    header.extend(keys.iter().cloned());
    header.extend(SWEEP_SUMMARY_METRICS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for ((name, combo), s) in names.iter().zip(&combos).zip(&summaries) {
        let mut row = vec![if name.is_empty() { ".".to_string() } else { name.clone() }];
        row.extend(combo.iter().map(|(_, v)| v.clone()));
        row.extend([
            s.best_accuracy.to_string(),
            s.final_accuracy.to_string(),
            s.precision.to_string(),
            s.recall.to_string(),
            s.tp.to_string(),
            s.fp.to_string(),
            s.fn_.to_string(),
        ]);
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("sweep_summary.csv", e.into_error()))?;
    write_atomic(&staging.tmp.join("sweep_summary.csv"), &bytes)?;
    staging.commit()?;
    Ok(summaries.len())
}

fn run_dir_name(index: usize, combo: &[(String, String)]) -> String {
    let mut name = format!("{index:03}");
    for (k, v) in combo {
        let v: String = v
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '-' })
            .collect();
        name.push_str(&format!("_{k}={v}"));
    }
    name
}

/// Result of `analyze pr`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrReport {
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.display().to_string()))
    }
}

fn parse_ids(field: &str) -> Result<Vec<ClientId>> {
    field
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map(ClientId)
                .map_err(|_| Error::Config(format!("bad client id '{s}'")))
        })
        .collect()
}

/// `analyze pr`: recomputes cumulative precision and recall (rounds ≥ 2)
/// from `rounds.csv` and writes `pr.json`.
pub fn analyze_pr(run_dir: &Path) -> Result<PrReport> {
    let path = run_dir.join("rounds.csv");
    require(&path)?;
    let mut reader = csv::Reader::from_path(&path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingArtifact(format!("{}: column {name}", path.display())))
    };
    let (round_col, flagged_col, malicious_col) = (col("round_id")?, col("flagged_ids")?, col("malicious_ids")?);
    let mut ledger = DetectionLedger::new();
    for row in reader.records() {
        let row = row?;
        let round: usize = row[round_col]
            .parse()
            .map_err(|_| Error::Config(format!("bad round id '{}'", &row[round_col])))?;
        if round >= 2 {
            ledger.record(
                parse_ids(&row[flagged_col])?.into_iter().collect(),
                parse_ids(&row[malicious_col])?.into_iter().collect(),
            );
        }
    }
    let pr = detection_pr(&ledger);
    let report = PrReport {
        precision: pr.precision,
        recall: pr.recall,
        tp: ledger.tp,
        fp: ledger.fp,
        fn_: ledger.fn_,
    };
    write_atomic(&run_dir.join("pr.json"), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    Ok(report)
}

/// One trajectory segment scored by `analyze tdmi`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdmiRow {
    pub client_id: ClientId,
    pub first_round: usize,
    pub last_round: usize,
    pub avg_tdmi: f64,
    pub poisoned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TdmiReport {
    pub statistic: f64,
    pub dof: f64,
    pub p_value: f64,
    pub legitimate_segments: usize,
    pub poisoned_segments: usize,
    pub legitimate_mean: f64,
    pub poisoned_mean: f64,
}

/// Splits each client's trajectory into maximal runs of consecutive rounds
/// with the same honest/poisoned status and scores every run long enough
/// for the estimator (`delay + 4` models).
pub fn tdmi_segments(
    trajectories: &BTreeMap<ClientId, Vec<(usize, bool, Vec<f64>)>>,
    delay: usize,
    bins: usize,
) -> Result<Vec<TdmiRow>> {
    let min_len = delay + 4;
    let mut rows = Vec::new();
    for (&client_id, points) in trajectories {
        let mut start = 0;
        while start < points.len() {
            let mut end = start + 1;
            while end < points.len() && points[end].0 == points[end - 1].0 + 1 && points[end].1 == points[start].1 {
                end += 1;
            }
            if end - start >= min_len {
                let models: Vec<Vec<f64>> = points[start..end].iter().map(|p| p.2.clone()).collect();
                rows.push(TdmiRow {
                    client_id,
                    first_round: points[start].0,
                    last_round: points[end - 1].0,
                    avg_tdmi: avg_tdmi(&models, delay, bins)?,
                    poisoned: points[start].1,
                });
            }
            start = end;
        }
    }
    Ok(rows)
}

/// `analyze tdmi`: reads `models.csv`, writes `tdmi.csv` and `ttest.json`
/// (Welch test of legitimate > poisoned mean avg-TDMI).
pub fn analyze_tdmi(run_dir: &Path, delay: usize, bins: usize) -> Result<TdmiReport> {
    let path = run_dir.join("models.csv");
    require(&path)?;
    let mut reader = csv::Reader::from_path(&path)?;
    let mut trajectories: BTreeMap<ClientId, Vec<(usize, bool, Vec<f64>)>> = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let bad = |what: &str| Error::Config(format!("{}: bad {what}", path.display()));
        let round: usize = row.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("round_id"))?;
        let client: u32 = row.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("client_id"))?;
        let poisoned = row.get(2).ok_or_else(|| bad("malicious"))? == "1";
        let values = row
            .iter()
            .skip(3)
            .map(|s| s.parse::<f64>().map_err(|_| bad("parameter value")))
            .collect::<Result<Vec<_>>>()?;
        trajectories.entry(ClientId(client)).or_default().push((round, poisoned, values));
    }
    for points in trajectories.values_mut() {
        points.sort_by_key(|p| p.0);
    }
    let rows = tdmi_segments(&trajectories, delay, bins)?;
    let legit: Vec<f64> = rows.iter().filter(|r| !r.poisoned).map(|r| r.avg_tdmi).collect();
    let poisoned: Vec<f64> = rows.iter().filter(|r| r.poisoned).map(|r| r.avg_tdmi).collect();
    if legit.len() < 2 || poisoned.len() < 2 {
        return Err(Error::MissingArtifact(format!(
            "insufficient history: {} legitimate and {} poisoned segments of at least {} rounds",
            legit.len(),
            poisoned.len(),
            delay + 4
        )));
    }
    let WelchTest { statistic, dof, p_value } = welch_one_tailed_t(&legit, &poisoned)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TDMI_CSV_HEADER)?;
    for r in &rows {
        w.write_record([
            r.client_id.0.to_string(),
            format!("{}-{}", r.first_round, r.last_round),
            r.avg_tdmi.to_string(),
            u8::from(r.poisoned).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("tdmi.csv", e.into_error()))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = TdmiReport {
        statistic,
        dof,
        p_value,
        legitimate_segments: legit.len(),
        poisoned_segments: poisoned.len(),
        legitimate_mean: mean(&legit),
        poisoned_mean: mean(&poisoned),
    };
    write_atomic(&run_dir.join("tdmi.csv"), &bytes)?;
    write_atomic(&run_dir.join("ttest.json"), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    Ok(report)
}

/// `analyze prob`: probability that a uniform draw of `m` out of `k` clients
/// includes at least one of the `b` malicious ones.
pub fn analyze_prob(k: usize, b: usize, m: usize) -> Result<f64> {
    prob_at_least_one_malicious(k, b, m)
}
