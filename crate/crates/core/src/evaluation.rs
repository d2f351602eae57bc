//! Metrics, paired t-test strategy comparison and the typicality shift
//! analysis.

use std::fmt;
use std::str::FromStr;

use ndarray::Axis;

use crate::data::{ClientPartition, FeatureDataset};
use crate::error::{Error, Result};
use crate::geometry;
use crate::model::{self, ModelParams};

/// Default win threshold: the two-sided 95% t critical value used with four
/// seeds.
pub const DEFAULT_WIN_THRESHOLD: f64 = 2.776;

/// Two-sided 95% Student-t critical values, degrees of freedom 3 through 9.
const T_CRITICAL_95: [(usize, f64); 7] = [
    (3, 3.182),
    (4, 2.776),
    (5, 2.571),
    (6, 2.447),
    (7, 2.365),
    (8, 2.306),
    (9, 2.262),
];

pub fn t_critical_95(df: usize) -> Option<f64> {
    T_CRITICAL_95
        .iter()
        .find(|(d, _)| *d == df)
        .map(|&(_, t)| t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Accuracy,
    BalancedRecall,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "accuracy" => Ok(Metric::Accuracy),
            "balanced_recall" => Ok(Metric::BalancedRecall),
            other => Err(Error::invalid(format!(
                "unknown metric {other:?} (expected accuracy or balanced_recall)"
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::BalancedRecall => "balanced_recall",
        })
    }
}

fn predictions(params: &ModelParams, test: &FeatureDataset) -> Result<Vec<usize>> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    model::predict(params, test.features.view())
}

pub fn accuracy(params: &ModelParams, test: &FeatureDataset) -> Result<f64> {
    let pred = predictions(params, test)?;
    Ok(accuracy_of(&pred, &test.labels))
}

pub fn accuracy_of(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Unweighted mean of per-class recall over classes present in the test set.
pub fn balanced_recall(params: &ModelParams, test: &FeatureDataset) -> Result<f64> {
    let pred = predictions(params, test)?;
    Ok(balanced_recall_of(&pred, &test.labels, test.num_classes))
}

pub fn balanced_recall_of(pred: &[usize], truth: &[usize], num_classes: usize) -> f64 {
    let mut support = vec![0usize; num_classes];
    let mut hits = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        support[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let recalls: Vec<f64> = support
        .iter()
        .zip(&hits)
        .filter(|(&s, _)| s > 0)
        .map(|(&s, &h)| h as f64 / s as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Paired t statistic `sqrt(L) * mean / sd` of the differences `a_i - a_j`
/// over `L` seeds, with the `L - 1` sample standard deviation. A zero
/// standard deviation gives a signed infinity, or zero when the mean is zero.
pub fn t_score(a_i: &[f64], a_j: &[f64]) -> Result<f64> {
    if a_i.len() != a_j.len() {
        return Err(Error::DimensionMismatch {
            expected: a_i.len(),
            actual: a_j.len(),
        });
    }
    let l = a_i.len();
    if l < 2 {
        return Err(Error::invalid(format!(
            "t-score needs at least 2 seeds, got {l}"
        )));
    }
    let diffs: Vec<f64> = a_i.iter().zip(a_j).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / l as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (l - 1) as f64;
    let sd = var.sqrt();
    Ok(if sd == 0.0 {
        if mean > 0.0 {
            f64::INFINITY
        } else if mean < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    } else {
        (l as f64).sqrt() * mean / sd
    })
}

/// One strategy's metric series for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub strategy: String,
    pub seed: u64,
    pub metric: Metric,
    /// Value after round `r` at index `r - 1`.
    pub series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub strategy_i: String,
    pub strategy_j: String,
    pub metric: Metric,
    pub threshold: f64,
    /// `t_r^{ij}` for rounds `1..=R`.
    pub t_scores: Vec<f64>,
    pub wins: Vec<bool>,
    pub defeats: Vec<bool>,
    pub win_rate: f64,
    pub defeat_rate: f64,
}

impl ComparisonReport {
    pub fn pair(&self) -> String {
        format!("{}_vs_{}", self.strategy_i, self.strategy_j)
    }
}

fn series_by_seed(results: &[RunResult]) -> Result<Vec<&RunResult>> {
    let mut sorted: Vec<&RunResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.seed);
    if sorted.windows(2).any(|w| w[0].seed == w[1].seed) {
        return Err(Error::invalid("duplicate seed in results"));
    }
    Ok(sorted)
}

/// Per-round paired t-test of strategy `i` against `j`. Round `r` counts as a
/// win when `t_r^{ij} > threshold` and as a defeat when `t_r^{ji} > threshold`.
pub fn win_rate(
    results_i: &[RunResult],
    results_j: &[RunResult],
    threshold: f64,
) -> Result<ComparisonReport> {
    if !(threshold > 0.0) {
        return Err(Error::invalid("threshold must be positive"));
    }
    let si = series_by_seed(results_i)?;
    let sj = series_by_seed(results_j)?;
    if si.is_empty() {
        return Err(Error::Empty("results"));
    }
    let seeds_i: Vec<u64> = si.iter().map(|r| r.seed).collect();
    let seeds_j: Vec<u64> = sj.iter().map(|r| r.seed).collect();
    if seeds_i != seeds_j {
        return Err(Error::invalid(format!(
            "seed sets differ: {seeds_i:?} vs {seeds_j:?}"
        )));
    }
    let metric = si[0].metric;
    let rounds = si[0].series.len();
    for r in si.iter().chain(&sj) {
        if r.metric != metric {
            return Err(Error::invalid("results mix metrics"));
        }
        if r.series.len() != rounds {
            return Err(Error::invalid(format!(
                "round counts differ: {} vs {}",
                rounds,
                r.series.len()
            )));
        }
    }
    if rounds == 0 {
        return Err(Error::Empty("series"));
    }

    let mut t_scores = Vec::with_capacity(rounds);
    let mut wins = Vec::with_capacity(rounds);
    let mut defeats = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let ai: Vec<f64> = si.iter().map(|s| s.series[r]).collect();
        let aj: Vec<f64> = sj.iter().map(|s| s.series[r]).collect();
        let t_ij = t_score(&ai, &aj)?;
        let t_ji = t_score(&aj, &ai)?;
        t_scores.push(t_ij);
        wins.push(t_ij > threshold);
        defeats.push(t_ji > threshold);
    }
    let rate = |flags: &[bool]| flags.iter().filter(|&&f| f).count() as f64 / rounds as f64;
    Ok(ComparisonReport {
        strategy_i: si[0].strategy.clone(),
        strategy_j: sj[0].strategy.clone(),
        metric,
        threshold,
        win_rate: rate(&wins),
        defeat_rate: rate(&defeats),
        t_scores,
        wins,
        defeats,
    })
}

pub const SHIFT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReport {
    pub k: usize,
    pub threshold: f64,
    /// Typicality of each dataset row within the whole dataset.
    pub centralized: Vec<f64>,
    /// Typicality of each dataset row within its own client.
    pub per_client: Vec<f64>,
    /// `SHIFT_BINS + 1` edges from 0 to twice the centralized maximum.
    pub bin_edges: Vec<f64>,
    pub centralized_hist: Vec<usize>,
    pub per_client_hist: Vec<usize>,
    pub centralized_mean: f64,
    pub per_client_mean: f64,
    pub above_threshold: usize,
    pub retained: usize,
    /// `retained / above_threshold`; `None` when no row exceeds the threshold
    /// centrally.
    pub retention: Option<f64>,
}

/// Values past the last edge are counted in the last bin.
fn histogram(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    counts
}

/// Compares each row's typicality in the pooled dataset with its typicality
/// inside its own client.
pub fn typicality_shift_report(
    dataset: &FeatureDataset,
    partitions: &[ClientPartition],
    k: usize,
    threshold: f64,
) -> Result<ShiftReport> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let n = dataset.len();
    let centralized = geometry::typicality(dataset.features.view(), k)?;
    let mut per_client = vec![f64::NAN; n];
    for p in partitions {
        if p.indices.len() < 2 {
            return Err(Error::invalid(format!(
                "client {} has {} points; typicality needs at least 2",
                p.client_id,
                p.indices.len()
            )));
        }
        let feats = dataset.features.select(Axis(0), &p.indices);
        let t = geometry::typicality(feats.view(), k)?;
        for (&row, v) in p.indices.iter().zip(t) {
            per_client[row] = v;
        }
    }
    if per_client.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("partitions do not cover the dataset"));
    }

    let max = centralized.iter().cloned().fold(0.0, f64::max);
    let top = 2.0 * max;
    let bin_edges: Vec<f64> = (0..=SHIFT_BINS)
        .map(|b| top * b as f64 / SHIFT_BINS as f64)
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let above: Vec<usize> = (0..n).filter(|&i| centralized[i] > threshold).collect();
    let retained = above.iter().filter(|&&i| per_client[i] > threshold).count();
    Ok(ShiftReport {
        k,
        threshold,
        centralized_hist: histogram(&centralized, &bin_edges),
        per_client_hist: histogram(&per_client, &bin_edges),
        centralized_mean: mean(&centralized),
        per_client_mean: mean(&per_client),
        above_threshold: above.len(),
        retained,
        retention: (!above.is_empty()).then(|| retained as f64 / above.len() as f64),
        bin_edges,
        centralized,
        per_client,
    })
}
