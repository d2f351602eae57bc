//! CSV formats written and read by the commands. Floats use the shortest
//! representation that parses back to the same value.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use falsim_core::evaluation::{ComparisonReport, Metric, RunResult, ShiftReport};

use crate::error::{CliError, CliResult};

pub const RESULTS_HEADER: [&str; 6] = [
    "strategy",
    "seed",
    "round",
    "labeled_per_client",
    "accuracy",
    "balanced_recall",
];
pub const SELECTIONS_HEADER: [&str; 5] = ["seed", "round", "client", "row_index", "id"];
pub const COMPARISON_HEADER: [&str; 5] = ["pair", "round", "t_score", "win", "defeat"];
pub const SUMMARY_HEADER: [&str; 7] = [
    "pair",
    "metric",
    "rounds",
    "seeds",
    "threshold",
    "win_rate",
    "defeat_rate",
];
pub const HISTOGRAM_HEADER: [&str; 4] = ["bin_lo", "bin_hi", "centralized", "per_client"];

/// One row of a results file: the state after a round of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub strategy: String,
    pub seed: u64,
    /// 1-based.
    pub round: usize,
    pub labeled_per_client: Vec<usize>,
    pub accuracy: f64,
    pub balanced_recall: f64,
}

impl ResultRow {
    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::BalancedRecall => self.balanced_recall,
        }
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.strategy.clone(),
            self.seed.to_string(),
            self.round.to_string(),
            join(&self.labeled_per_client),
            self.accuracy.to_string(),
            self.balanced_recall.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub seed: u64,
    pub round: usize,
    pub client: usize,
    pub row_index: usize,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub pair: String,
    pub metric: Metric,
    pub rounds: usize,
    pub seeds: usize,
    pub threshold: f64,
    pub win_rate: f64,
    pub defeat_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub centralized: usize,
    pub per_client: usize,
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

pub(crate) fn writer(path: &Path) -> CliResult<csv::Writer<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> CliError {
    let msg = format!("{}: {e}", path.display());
    if e.is_io_error() {
        CliError::Runtime(msg)
    } else {
        CliError::Validation(msg)
    }
}

fn reader(path: &Path, header: &[&str]) -> CliResult<csv::Reader<File>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let found = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(CliError::validation(format!(
            "{}: expected header {}, found {}",
            path.display(),
            header.join(","),
            found.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(rdr)
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    let line = rec.position().map_or(0, |p| p.line());
    rec[i].parse().map_err(|e| {
        CliError::validation(format!(
            "{}:{line}: column {}: cannot parse {:?}: {e}",
            path.display(),
            i + 1,
            &rec[i]
        ))
    })
}

fn records(path: &Path, header: &[&str]) -> CliResult<Vec<csv::StringRecord>> {
    reader(path, header)?
        .records()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Append-only results writer; every row is flushed as soon as it is written.
pub struct ResultsWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl ResultsWriter {
    pub fn create(path: &Path) -> CliResult<Self> {
        let mut inner = writer(path)?;
        inner
            .write_record(RESULTS_HEADER)
            .map_err(|e| csv_err(path, e))?;
        inner.flush()?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, row: &ResultRow) -> CliResult<()> {
        self.inner
            .write_record(row.record())
            .map_err(|e| csv_err(&self.path, e))?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> CliResult<()> {
    let mut w = ResultsWriter::create(path)?;
    rows.iter().try_for_each(|r| w.append(r))
}

pub fn read_results(path: &Path) -> CliResult<Vec<ResultRow>> {
    records(path, &RESULTS_HEADER)?
        .iter()
        .map(|rec| {
            let labeled = if rec[3].is_empty() {
                Vec::new()
            } else {
                rec[3]
                    .split(';')
                    .map(|s| {
                        s.parse().map_err(|e| {
                            CliError::validation(format!(
                                "{}: labeled_per_client {s:?}: {e}",
                                path.display()
                            ))
                        })
                    })
                    .collect::<CliResult<_>>()?
            };
            Ok(ResultRow {
                strategy: rec[0].to_string(),
                seed: field(path, rec, 1)?,
                round: field(path, rec, 2)?,
                labeled_per_client: labeled,
                accuracy: field(path, rec, 4)?,
                balanced_recall: field(path, rec, 5)?,
            })
        })
        .collect()
}

/// Groups rows by strategy (in order of first appearance), then by seed, into
/// per-round metric series. Rounds of each seed must be exactly 1..=R.
pub fn run_results(rows: &[ResultRow], metric: Metric) -> CliResult<Vec<(String, Vec<RunResult>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<(String, u64), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.strategy) {
            order.push(r.strategy.clone());
        }
        grouped
            .entry((r.strategy.clone(), r.seed))
            .or_default()
            .push(r);
    }
    let mut out: Vec<(String, Vec<RunResult>)> =
        order.iter().map(|s| (s.clone(), Vec::new())).collect();
    for ((strategy, seed), mut rs) in grouped {
        rs.sort_by_key(|r| r.round);
        if rs.iter().enumerate().any(|(i, r)| r.round != i + 1) {
            return Err(CliError::validation(format!(
                "{strategy} seed {seed}: rounds are not exactly 1..={}",
                rs.len()
            )));
        }
        let slot = order.iter().position(|s| *s == strategy).unwrap_or(0);
        out[slot].1.push(RunResult {
            strategy,
            seed,
            metric,
            series: rs.iter().map(|r| r.metric(metric)).collect(),
        });
    }
    Ok(out)
}

pub fn write_selections(path: &Path, rows: &[SelectionRow]) -> CliResult<()> {
    let mut w = writer(path)?;
    w.write_record(SELECTIONS_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.round.to_string(),
            r.client.to_string(),
            r.row_index.to_string(),
            r.id.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_selections(path: &Path) -> CliResult<Vec<SelectionRow>> {
    records(path, &SELECTIONS_HEADER)?
        .iter()
        .map(|rec| {
            Ok(SelectionRow {
                seed: field(path, rec, 0)?,
                round: field(path, rec, 1)?,
                client: field(path, rec, 2)?,
                row_index: field(path, rec, 3)?,
                id: field(path, rec, 4)?,
            })
        })
        .collect()
}

/// Per-round t-scores and outcomes; infinite scores are written as `inf`.
pub fn write_comparison(path: &Path, report: &ComparisonReport) -> CliResult<()> {
    let mut w = writer(path)?;
    w.write_record(COMPARISON_HEADER)
        .map_err(|e| csv_err(path, e))?;
    let pair = report.pair();
    for (r, t) in report.t_scores.iter().enumerate() {
        w.write_record([
            pair.clone(),
            (r + 1).to_string(),
            t.to_string(),
            u8::from(report.wins[r]).to_string(),
            u8::from(report.defeats[r]).to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// `(pair, round, t_score, win, defeat)`.
pub type ComparisonRow = (String, usize, f64, bool, bool);

pub fn read_comparison(path: &Path) -> CliResult<Vec<ComparisonRow>> {
    records(path, &COMPARISON_HEADER)?
        .iter()
        .map(|rec| {
            Ok((
                rec[0].to_string(),
                field(path, rec, 1)?,
                field(path, rec, 2)?,
                field::<u8>(path, rec, 3)? == 1,
                field::<u8>(path, rec, 4)? == 1,
            ))
        })
        .collect()
}

pub fn summary_row(report: &ComparisonReport, seeds: usize) -> SummaryRow {
    SummaryRow {
        pair: report.pair(),
        metric: report.metric,
        rounds: report.t_scores.len(),
        seeds,
        threshold: report.threshold,
        win_rate: report.win_rate,
        defeat_rate: report.defeat_rate,
    }
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> CliResult<()> {
    let mut w = writer(path)?;
    w.write_record(SUMMARY_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.pair.clone(),
            r.metric.to_string(),
            r.rounds.to_string(),
            r.seeds.to_string(),
            r.threshold.to_string(),
            r.win_rate.to_string(),
            r.defeat_rate.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> CliResult<Vec<SummaryRow>> {
    records(path, &SUMMARY_HEADER)?
        .iter()
        .map(|rec| {
            Ok(SummaryRow {
                pair: rec[0].to_string(),
                metric: field(path, rec, 1)?,
                rounds: field(path, rec, 2)?,
                seeds: field(path, rec, 3)?,
                threshold: field(path, rec, 4)?,
                win_rate: field(path, rec, 5)?,
                defeat_rate: field(path, rec, 6)?,
            })
        })
        .collect()
}

pub fn histogram_rows(report: &ShiftReport) -> Vec<HistogramRow> {
    report
        .bin_edges
        .windows(2)
        .zip(report.centralized_hist.iter().zip(&report.per_client_hist))
        .map(|(e, (&c, &p))| HistogramRow {
            bin_lo: e[0],
            bin_hi: e[1],
            centralized: c,
            per_client: p,
        })
        .collect()
}

pub fn write_histogram(path: &Path, rows: &[HistogramRow]) -> CliResult<()> {
    let mut w = writer(path)?;
    w.write_record(HISTOGRAM_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.bin_lo.to_string(),
            r.bin_hi.to_string(),
            r.centralized.to_string(),
            r.per_client.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_histogram(path: &Path) -> CliResult<Vec<HistogramRow>> {
    records(path, &HISTOGRAM_HEADER)?
        .iter()
        .map(|rec| {
            Ok(HistogramRow {
                bin_lo: field(path, rec, 0)?,
                bin_hi: field(path, rec, 1)?,
                centralized: field(path, rec, 2)?,
                per_client: field(path, rec, 3)?,
            })
        })
        .collect()
}

/// `key,value` summary of a shift report. `retention` is empty when no point
/// reaches the threshold centrally.
pub fn write_shift_summary(path: &Path, report: &ShiftReport) -> CliResult<()> {
    let mut f =
        File::create(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let retention = report.retention.map(|r| r.to_string()).unwrap_or_default();
    let rows = [
        ("k", report.k.to_string()),
        ("points", report.centralized.len().to_string()),
        ("centralized_mean", report.centralized_mean.to_string()),
        ("per_client_mean", report.per_client_mean.to_string()),
        ("threshold", report.threshold.to_string()),
        ("above_threshold", report.above_threshold.to_string()),
        ("retained", report.retained.to_string()),
        ("retention", retention),
    ];
    writeln!(f, "key,value")?;
    for (k, v) in rows {
        writeln!(f, "{k},{v}")?;
    }
    Ok(())
}

pub fn read_shift_summary(path: &Path) -> CliResult<BTreeMap<String, String>> {
    Ok(records(path, &["key", "value"])?
        .iter()
        .map(|rec| (rec[0].to_string(), rec[1].to_string()))
        .collect())
}
