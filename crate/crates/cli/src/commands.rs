//! The subcommands, as library functions so tests can drive them directly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use falsim_core::data::{
    self, dirichlet_partition, load_dataset, load_partitions, mean_max_class_share,
    partition_class_counts, save_dataset, save_partitions, ClientPartition, FeatureDataset,
    PartitionSpec,
};
use falsim_core::evaluation::{self, ComparisonReport, Metric, RunResult, ShiftReport};
use falsim_core::federation::Federation;
use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::results::{
    self, csv_err, HistogramRow, ResultRow, ResultsWriter, SelectionRow, SummaryRow,
};

pub const RESULTS_FILE: &str = "results.csv";
pub const SELECTIONS_FILE: &str = "selections.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SHIFT_HISTOGRAM_FILE: &str = "shift_histogram.csv";
pub const SHIFT_SUMMARY_FILE: &str = "shift_summary.csv";
pub const SHIFT_POINTS_FILE: &str = "shift_points.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const WINRATES_FILE: &str = "winrates.csv";
pub const HISTOGRAMS_FILE: &str = "histograms.csv";

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Writes `train.csv` and `test.csv` into the output directory.
pub fn cmd_synth(args: &SynthArgs) -> CliResult<(PathBuf, PathBuf)> {
    let (train, test) = data::synth_dataset(
        args.num_classes,
        args.dim,
        args.per_class,
        args.spread,
        args.seed,
    )?;
    create_dir(&args.out_dir)?;
    let train_path = args.out_dir.join("train.csv");
    let test_path = args.out_dir.join("test.csv");
    save_dataset(&train, &train_path)?;
    save_dataset(&test, &test_path)?;
    log::info!(
        "wrote {} train and {} test rows to {}",
        train.len(),
        test.len(),
        args.out_dir.display()
    );
    Ok((train_path, test_path))
}

/// Partitions a dataset file and writes `client_id,row_index` rows. Returns
/// the per-client class-count table.
pub fn cmd_partition(dataset: &Path, spec: &PartitionSpec, out: &Path) -> CliResult<String> {
    let ds = load_dataset(dataset)?;
    let parts = dirichlet_partition(&ds, spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_partitions(&parts, out)?;
    Ok(class_count_table(&ds, &parts))
}

pub fn class_count_table(ds: &FeatureDataset, parts: &[ClientPartition]) -> String {
    let counts = partition_class_counts(ds, parts);
    let mut s = String::new();
    let _ = write!(s, "{:>6} {:>7}", "client", "size");
    for c in 0..ds.num_classes {
        let _ = write!(s, " {:>6}", format!("c{c}"));
    }
    s.push('\n');
    for (p, row) in parts.iter().zip(&counts) {
        let _ = write!(s, "{:>6} {:>7}", p.client_id, p.indices.len());
        for n in row {
            let _ = write!(s, " {n:>6}");
        }
        s.push('\n');
    }
    let _ = write!(s, "{:>6} {:>7}", "total", ds.len());
    for n in ds.class_counts() {
        let _ = write!(s, " {n:>6}");
    }
    let _ = writeln!(
        s,
        "\nmean max-class share: {:.4}",
        mean_max_class_share(ds, parts)
    );
    s
}

/// Everything a run needs besides the config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub train: FeatureDataset,
    pub test: FeatureDataset,
    pub partitions: Vec<ClientPartition>,
    pub selection_features: Option<Vec<Array2<f64>>>,
    pub budget: usize,
}

pub fn load_experiment(cfg: &ExperimentConfig) -> CliResult<Experiment> {
    let (train, test) = match &cfg.dataset {
        DatasetSource::Files { train, test } => (load_dataset(train)?, load_dataset(test)?),
        DatasetSource::Synth {
            num_classes,
            dim,
            per_class,
            spread,
            seed,
        } => data::synth_dataset(*num_classes, *dim, *per_class, *spread, *seed)?,
    };
    if test.num_classes != train.num_classes {
        return Err(CliError::validation(format!(
            "train has {} classes, test has {}",
            train.num_classes, test.num_classes
        )));
    }
    let partitions = match &cfg.partition_file {
        Some(path) => {
            let parts = load_partitions(path, train.len())?;
            if parts.len() != cfg.partition.num_clients {
                return Err(CliError::validation(format!(
                    "{} holds {} clients, config says {}",
                    path.display(),
                    parts.len(),
                    cfg.partition.num_clients
                )));
            }
            parts
        }
        None => dirichlet_partition(&train, &cfg.partition)?,
    };

    let budget = cfg.budget.resolve(train.num_classes);
    let needed = cfg.rounds * budget;
    if let Some(p) = partitions.iter().find(|p| p.indices.len() < needed) {
        return Err(CliError::validation(format!(
            "{} rounds at budget {budget} need {needed} points per client; client {} holds {}",
            cfg.rounds,
            p.client_id,
            p.indices.len()
        )));
    }

    let selection_features = selection_features(cfg, &train, &partitions)?;
    Ok(Experiment {
        train,
        test,
        partitions,
        selection_features,
        budget,
    })
}

fn selection_features(
    cfg: &ExperimentConfig,
    train: &FeatureDataset,
    partitions: &[ClientPartition],
) -> CliResult<Option<Vec<Array2<f64>>>> {
    if cfg.selection_features.is_none() && cfg.client_features.is_empty() {
        return Ok(None);
    }
    let shared = cfg
        .selection_features
        .as_ref()
        .map(load_dataset)
        .transpose()?;
    let mut out = Vec::with_capacity(partitions.len());
    for p in partitions {
        let own = cfg
            .client_features
            .get(&p.client_id)
            .map(load_dataset)
            .transpose()?;
        let Some(src) = own.as_ref().or(shared.as_ref()) else {
            out.push(train.features.select(Axis(0), &p.indices));
            continue;
        };
        let rows = src.row_of_id();
        let picked: Vec<usize> = p
            .indices
            .iter()
            .map(|&i| {
                rows.get(&train.ids[i]).copied().ok_or_else(|| {
                    CliError::validation(format!(
                        "selection features for client {} lack id {}",
                        p.client_id, train.ids[i]
                    ))
                })
            })
            .collect::<CliResult<_>>()?;
        out.push(src.features.select(Axis(0), &picked));
    }
    Ok(Some(out))
}

/// Runs every round of one master seed, appending each round to `sink` as
/// soon as it completes.
pub fn run_seed(
    cfg: &ExperimentConfig,
    exp: &Experiment,
    seed: u64,
    sink: &mut ResultsWriter,
) -> CliResult<Vec<SelectionRow>> {
    let fed_cfg = cfg.federation(exp.train.num_classes, seed);
    let mut fed = Federation::new(
        &exp.train,
        &exp.test,
        &exp.partitions,
        exp.selection_features.clone(),
        fed_cfg,
    )?;
    let mut selections = Vec::new();
    for _ in 0..cfg.rounds {
        let rec = fed.run_fal_round()?;
        for c in fed.clients() {
            if c.labeled.len() != rec.round * exp.budget
                || c.labeled.len() + c.unlabeled.len() != c.partition.indices.len()
            {
                return Err(CliError::runtime(format!(
                    "budget accounting broken for client {} after round {}",
                    c.client_id, rec.round
                )));
            }
        }
        if rec.fallbacks > 0 {
            log::warn!(
                "seed {seed} round {}: {} clients fell back to random selection",
                rec.round,
                rec.fallbacks
            );
        }
        for (client, rows) in rec.selections.iter().enumerate() {
            selections.extend(rows.iter().map(|&row| SelectionRow {
                seed,
                round: rec.round,
                client,
                row_index: row,
                id: exp.train.ids[row],
            }));
        }
        sink.append(&ResultRow {
            strategy: cfg.strategy.name().to_string(),
            seed,
            round: rec.round,
            labeled_per_client: rec.labeled_per_client,
            accuracy: rec.accuracy,
            balanced_recall: rec.balanced_recall,
        })?;
        log::info!(
            "seed {seed} round {}: accuracy {:.4}, balanced recall {:.4}",
            rec.round,
            rec.accuracy,
            rec.balanced_recall
        );
    }
    Ok(selections)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub results: PathBuf,
    pub selections: PathBuf,
    pub rows: Vec<ResultRow>,
}

/// Runs every seed of the config. Each seed writes its own temporary file;
/// the files are merged in seed-list order into `results.csv`.
pub fn cmd_run(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    let exp = load_experiment(cfg)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let tmp_path = |seed: u64| out.join(format!(".{RESULTS_FILE}.seed-{seed}.tmp"));

    let one = |&seed: &u64| -> CliResult<Vec<SelectionRow>> {
        let mut sink = ResultsWriter::create(&tmp_path(seed))?;
        run_seed(cfg, &exp, seed, &mut sink)
    };
    let per_seed: Vec<CliResult<Vec<SelectionRow>>> = if cfg.parallel {
        cfg.seeds.par_iter().map(one).collect()
    } else {
        cfg.seeds.iter().map(one).collect()
    };
    let cleanup = || {
        for &s in &cfg.seeds {
            let _ = std::fs::remove_file(tmp_path(s));
        }
    };
    let per_seed = match per_seed.into_iter().collect::<CliResult<Vec<_>>>() {
        Ok(v) => v,
        Err(e) => {
            cleanup();
            return Err(e);
        }
    };

    let results_path = out.join(RESULTS_FILE);
    let merged = merge_seed_files(&results_path, cfg.seeds.iter().map(|&s| tmp_path(s)));
    cleanup();
    merged?;
    let selections_path = out.join(SELECTIONS_FILE);
    let selections: Vec<SelectionRow> = per_seed.into_iter().flatten().collect();
    results::write_selections(&selections_path, &selections)?;
    let rows = results::read_results(&results_path)?;
    Ok(RunOutput {
        results: results_path,
        selections: selections_path,
        rows,
    })
}

fn merge_seed_files(dest: &Path, parts: impl Iterator<Item = PathBuf>) -> CliResult<()> {
    let io = |p: &Path, e: std::io::Error| CliError::runtime(format!("{}: {e}", p.display()));
    let mut w = std::io::BufWriter::new(std::fs::File::create(dest).map_err(|e| io(dest, e))?);
    writeln!(w, "{}", results::RESULTS_HEADER.join(",")).map_err(|e| io(dest, e))?;
    for part in parts {
        let r = BufReader::new(std::fs::File::open(&part).map_err(|e| io(&part, e))?);
        for line in r.lines().skip(1) {
            let line = line.map_err(|e| io(&part, e))?;
            writeln!(w, "{line}").map_err(|e| io(dest, e))?;
        }
    }
    w.flush().map_err(|e| io(dest, e))
}

/// Labelled groups of runs: one per (input file, strategy). A strategy that
/// appears in several files gets `@<file stem>` appended to its label.
pub fn load_run_groups(
    files: &[PathBuf],
    metric: Metric,
) -> CliResult<Vec<(String, Vec<RunResult>)>> {
    let mut groups = Vec::new();
    for f in files {
        let rows = results::read_results(f)?;
        if rows.is_empty() {
            return Err(CliError::validation(format!(
                "{}: no result rows",
                f.display()
            )));
        }
        let stem = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (name, runs) in results::run_results(&rows, metric)? {
            groups.push((name, stem.clone(), runs));
        }
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (name, _, _) in &groups {
        *seen.entry(name.clone()).or_default() += 1;
    }
    let mut labels: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for (name, stem, runs) in groups {
        let mut label = if seen[&name] > 1 {
            format!("{name}@{stem}")
        } else {
            name
        };
        while labels.contains(&label) {
            label.push('\'');
        }
        labels.push(label.clone());
        out.push((label, runs));
    }
    Ok(out)
}

/// Compares a reference group against every other group, or against itself
/// when only one group is present. Writes one `<i>_vs_<j>.csv` per pair plus
/// `summary.csv`.
pub fn cmd_compare(
    files: &[PathBuf],
    metric: Metric,
    reference: Option<&str>,
    threshold: f64,
    out_dir: &Path,
) -> CliResult<Vec<ComparisonReport>> {
    if files.is_empty() {
        return Err(CliError::validation(
            "compare needs at least one results file",
        ));
    }
    let groups = load_run_groups(files, metric)?;
    let ref_idx = match reference {
        Some(name) => groups.iter().position(|(l, _)| l == name).ok_or_else(|| {
            let labels: Vec<&str> = groups.iter().map(|(l, _)| l.as_str()).collect();
            CliError::validation(format!("no results for {name:?}; found {labels:?}"))
        })?,
        None => 0,
    };
    let others: Vec<usize> = if groups.len() == 1 {
        vec![0]
    } else {
        (0..groups.len()).filter(|&j| j != ref_idx).collect()
    };

    create_dir(out_dir)?;
    let (ref_label, ref_runs) = &groups[ref_idx];
    let mut reports = Vec::new();
    let mut summary = Vec::new();
    for j in others {
        let (label, runs) = &groups[j];
        let mut report = evaluation::win_rate(ref_runs, runs, threshold)?;
        report.strategy_i = ref_label.clone();
        report.strategy_j = label.clone();
        let path = out_dir.join(format!("{}.csv", sanitize(&report.pair())));
        results::write_comparison(&path, &report)?;
        summary.push(results::summary_row(&report, ref_runs.len()));
        log::info!(
            "{}: win rate {:.3}, defeat rate {:.3}",
            report.pair(),
            report.win_rate,
            report.defeat_rate
        );
        reports.push(report);
    }
    results::write_summary(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(reports)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "_-.@".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes the histogram, a key/value summary and per-point typicalities.
pub fn cmd_shift(
    dataset: &Path,
    partitions: &Path,
    k: usize,
    threshold: f64,
    out_dir: &Path,
) -> CliResult<ShiftReport> {
    let ds = load_dataset(dataset)?;
    let parts = load_partitions(partitions, ds.len())?;
    let report = evaluation::typicality_shift_report(&ds, &parts, k, threshold)?;
    create_dir(out_dir)?;
    results::write_histogram(
        &out_dir.join(SHIFT_HISTOGRAM_FILE),
        &results::histogram_rows(&report),
    )?;
    results::write_shift_summary(&out_dir.join(SHIFT_SUMMARY_FILE), &report)?;

    let mut owner = vec![0usize; ds.len()];
    for p in &parts {
        for &i in &p.indices {
            owner[i] = p.client_id;
        }
    }
    let path = out_dir.join(SHIFT_POINTS_FILE);
    let mut w = results::writer(&path)?;
    w.write_record(["row_index", "id", "client", "centralized", "per_client"])
        .map_err(|e| csv_err(&path, e))?;
    for i in 0..ds.len() {
        w.write_record([
            i.to_string(),
            ds.ids[i].to_string(),
            owner[i].to_string(),
            report.centralized[i].to_string(),
            report.per_client[i].to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush()?;
    log::info!(
        "mean typicality: centralized {:.6}, per client {:.6}",
        report.centralized_mean,
        report.per_client_mean
    );
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct PlotInputs {
    pub results: Vec<PathBuf>,
    pub summaries: Vec<PathBuf>,
    pub histograms: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub label: String,
    pub metric: Metric,
    pub round: usize,
    pub mean: f64,
    pub std_err: f64,
    pub seeds: usize,
}

/// Sample mean and standard error of the mean (zero for a single value or
/// identical values).
pub fn mean_std_err(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn curves(groups: &[(String, Vec<RunResult>)]) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    for (label, runs) in groups {
        let rounds = runs.iter().map(|r| r.series.len()).min().unwrap_or(0);
        for r in 0..rounds {
            let xs: Vec<f64> = runs.iter().map(|run| run.series[r]).collect();
            let (mean, std_err) = mean_std_err(&xs);
            out.push(CurvePoint {
                label: label.clone(),
                metric: runs[0].metric,
                round: r + 1,
                mean,
                std_err,
                seeds: xs.len(),
            });
        }
    }
    out
}

fn source_label(path: &Path) -> String {
    path.parent()
        .and_then(Path::file_name)
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Writes `curves.csv`, `winrates.csv` and `histograms.csv` for whichever
/// input kinds were given.
pub fn cmd_plotdata(inputs: &PlotInputs, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    if inputs.results.is_empty() && inputs.summaries.is_empty() && inputs.histograms.is_empty() {
        return Err(CliError::validation(
            "plotdata needs at least one input file",
        ));
    }
    create_dir(out_dir)?;
    let mut written = Vec::new();

    if !inputs.results.is_empty() {
        let path = out_dir.join(CURVES_FILE);
        let mut w = results::writer(&path)?;
        w.write_record(["label", "metric", "round", "mean", "std_err", "seeds"])
            .map_err(|e| csv_err(&path, e))?;
        for metric in [Metric::Accuracy, Metric::BalancedRecall] {
            for p in curves(&load_run_groups(&inputs.results, metric)?) {
                w.write_record([
                    p.label,
                    p.metric.to_string(),
                    p.round.to_string(),
                    p.mean.to_string(),
                    p.std_err.to_string(),
                    p.seeds.to_string(),
                ])
                .map_err(|e| csv_err(&path, e))?;
            }
        }
        w.flush()?;
        written.push(path);
    }

    if !inputs.summaries.is_empty() {
        let mut rows: Vec<(String, SummaryRow)> = Vec::new();
        for f in &inputs.summaries {
            let summary = results::read_summary(f)?;
            if summary.is_empty() {
                return Err(CliError::validation(format!(
                    "{}: no summary rows",
                    f.display()
                )));
            }
            let label = source_label(f);
            rows.extend(summary.into_iter().map(|r| (label.clone(), r)));
        }
        let path = out_dir.join(WINRATES_FILE);
        let mut w = results::writer(&path)?;
        w.write_record(["config", "pair", "metric", "win_rate", "defeat_rate"])
            .map_err(|e| csv_err(&path, e))?;
        let mut by_pair: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (config, r) in &rows {
            w.write_record([
                config.clone(),
                r.pair.clone(),
                r.metric.to_string(),
                r.win_rate.to_string(),
                r.defeat_rate.to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
            let e = by_pair
                .entry((r.pair.clone(), r.metric.to_string()))
                .or_default();
            e.0.push(r.win_rate);
            e.1.push(r.defeat_rate);
        }
        for ((pair, metric), (wins, defeats)) in by_pair {
            w.write_record([
                "mean".to_string(),
                pair,
                metric,
                mean_std_err(&wins).0.to_string(),
                mean_std_err(&defeats).0.to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush()?;
        written.push(path);
    }

    if !inputs.histograms.is_empty() {
        let path = out_dir.join(HISTOGRAMS_FILE);
        let mut w = results::writer(&path)?;
        w.write_record([
            "source",
            "bin_lo",
            "bin_hi",
            "centralized",
            "per_client",
            "centralized_frac",
            "per_client_frac",
        ])
        .map_err(|e| csv_err(&path, e))?;
        for f in &inputs.histograms {
            let hist: Vec<HistogramRow> = results::read_histogram(f)?;
            let total_c: usize = hist.iter().map(|h| h.centralized).sum();
            let total_p: usize = hist.iter().map(|h| h.per_client).sum();
            if hist.is_empty() || total_c == 0 {
                return Err(CliError::validation(format!(
                    "{}: empty histogram",
                    f.display()
                )));
            }
            let label = source_label(f);
            for h in hist {
                w.write_record([
                    label.clone(),
                    h.bin_lo.to_string(),
                    h.bin_hi.to_string(),
                    h.centralized.to_string(),
                    h.per_client.to_string(),
                    (h.centralized as f64 / total_c as f64).to_string(),
                    (h.per_client as f64 / total_p.max(1) as f64).to_string(),
                ])
                .map_err(|e| csv_err(&path, e))?;
            }
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}
