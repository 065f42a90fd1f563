//! Detection quality, predictability (TDMI, Welch's t-test) and client
//! selection odds.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::ClientId;

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_DELAY: usize = 1;

/// Cumulative true/false positive counts over the recorded rounds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionLedger {
    pub rounds: Vec<(BTreeSet<ClientId>, BTreeSet<ClientId>)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl DetectionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, flagged: BTreeSet<ClientId>, truth: BTreeSet<ClientId>) {
        let tp = flagged.intersection(&truth).count();
        self.tp += tp;
        self.fp += flagged.len() - tp;
        self.fn_ += truth.len() - tp;
        self.rounds.push((flagged, truth));
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionPr {
    pub precision: f64,
    pub recall: f64,
    /// Precision came from the empty-denominator convention (nothing flagged).
    pub precision_by_convention: bool,
    /// Recall came from the empty-denominator convention (nothing to catch).
    pub recall_by_convention: bool,
}

/// `P = tp/(tp+fp)`, `R = tp/(tp+fn)`; a zero denominator yields 1.0 and
/// sets the matching flag.
pub fn detection_pr(ledger: &DetectionLedger) -> DetectionPr {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            (1.0, true)
        } else {
            (num as f64 / den as f64, false)
        }
    };
    let (precision, precision_by_convention) = ratio(ledger.tp, ledger.tp + ledger.fp);
    let (recall, recall_by_convention) = ratio(ledger.tp, ledger.tp + ledger.fn_);
    DetectionPr {
        precision,
        recall,
        precision_by_convention,
        recall_by_convention,
    }
}

fn bin_of(x: f64, lo: f64, width: f64, bins: usize) -> usize {
    if width == 0.0 {
        return 0;
    }
    (((x - lo) / width) as usize).min(bins - 1)
}

fn range(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Plug-in mutual information (nats) from an equal-width `bins × bins`
/// histogram. A constant series carries no information and gives 0.
pub fn tdmi(series_a: &[f64], series_b: &[f64], bins: usize) -> Result<f64> {
    if series_a.len() != series_b.len() {
        return Err(Error::DegenerateSeries(format!(
            "series lengths differ: {} vs {}",
            series_a.len(),
            series_b.len()
        )));
    }
    if series_a.len() < 4 || bins < 2 {
        return Err(Error::DegenerateSeries(format!(
            "need >= 4 samples and >= 2 bins, got {} samples, {bins} bins",
            series_a.len()
        )));
    }
    if series_a.iter().chain(series_b).any(|x| !x.is_finite()) {
        return Err(Error::DegenerateSeries("non-finite sample".into()));
    }
    let (alo, ahi) = range(series_a);
    let (blo, bhi) = range(series_b);
    if alo == ahi || blo == bhi {
        return Ok(0.0);
    }
    let (aw, bw) = ((ahi - alo) / bins as f64, (bhi - blo) / bins as f64);
    let mut joint = vec![0usize; bins * bins];
    let mut pa = vec![0usize; bins];
    let mut pb = vec![0usize; bins];
    for (&x, &y) in series_a.iter().zip(series_b) {
        let i = bin_of(x, alo, aw, bins);
        let j = bin_of(y, blo, bw, bins);
        joint[i * bins + j] += 1;
        pa[i] += 1;
        pb[j] += 1;
    }
    let n = series_a.len() as f64;
    let mut terms = Vec::new();
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let c = c as f64;
                terms.push(c / n * (c * n / (pa[i] as f64 * pb[j] as f64)).ln());
            }
        }
    }
    // Summing in sorted order makes swapping the two series bit-exact.
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>().max(0.0))
}

/// Mean over coordinates of the TDMI between each coordinate's series and
/// its `delay`-shifted copy.
pub fn avg_tdmi(models: &[Vec<f64>], delay: usize, bins: usize) -> Result<f64> {
    if models.len() <= delay {
        return Err(Error::DegenerateSeries(format!(
            "sequence of {} models is not longer than delay {delay}",
            models.len()
        )));
    }
    let d = models[0].len();
    if d == 0 || models.iter().any(|m| m.len() != d) {
        return Err(Error::DegenerateSeries("models differ in dimension".into()));
    }
    let n = models.len() - delay;
    let mut total = 0.0;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for k in 0..d {
        for t in 0..n {
            a[t] = models[t][k];
            b[t] = models[t + delay][k];
        }
        total += tdmi(&a, &b, bins)?;
    }
    Ok(total / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub statistic: f64,
    pub dof: f64,
    pub p_value: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's t-test of `H_a: mean_a > mean_b`.
pub fn welch_one_tailed_t(sample_a: &[f64], sample_b: &[f64]) -> Result<WelchTest> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(Error::DegenerateSample(format!(
            "need >= 2 values per sample, got {} and {}",
            sample_a.len(),
            sample_b.len()
        )));
    }
    let (ma, va) = mean_var(sample_a);
    let (mb, vb) = mean_var(sample_b);
    let (na, nb) = (sample_a.len() as f64, sample_b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if !(se2 > 0.0) || !se2.is_finite() {
        return Err(Error::DegenerateSample("both samples have zero variance".into()));
    }
    let statistic = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchTest {
        statistic,
        dof,
        p_value: student_t_sf(statistic, dof),
    })
}

/// `P(T > t)` for Student's t with `dof` degrees of freedom.
pub fn student_t_sf(t: f64, dof: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t == f64::INFINITY {
        return 0.0;
    }
    if t == f64::NEG_INFINITY {
        return 1.0;
    }
    let tail = 0.5 * regularized_incomplete_beta(dof / (dof + t * t), dof / 2.0, 0.5);
    if t > 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// `ln Γ(x)` for `x > 0`, Lanczos (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` by the Lentz continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_cf(x, a, b) / a).min(1.0)
    } else {
        (1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b).max(0.0)
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// `Pr(X ≥ 1) = 1 − C(K−b, m)/C(K, m)`: chance that `m` clients drawn
/// without replacement from `K` include at least one of `b` malicious ones.
pub fn prob_at_least_one_malicious(k: usize, b: usize, m: usize) -> Result<f64> {
    if b > k || m == 0 || m > k {
        return Err(Error::InvalidCounts(format!(
            "need 0 <= b <= K and 1 <= m <= K, got K={k} b={b} m={m}"
        )));
    }
    if b == 0 {
        return Ok(0.0);
    }
    if m > k - b {
        return Ok(1.0);
    }
    // C(K−b, m)/C(K, m) = Π_{i<m} (1 − b/(K−i))
    let log_none: f64 = (0..m).map(|i| (-(b as f64) / (k - i) as f64).ln_1p()).sum();
    Ok((-log_none.exp_m1()).clamp(0.0, 1.0))
}
