use std::path::{Path, PathBuf};
use std::process::Command;

use falsim::commands::{self, PlotInputs, SynthArgs};
use falsim::config::{Budget, DatasetSource, ExperimentConfig};
use falsim::results::{self, ResultRow};
use falsim_core::data::{load_dataset, load_partitions, Alpha, PartitionSpec};
use falsim_core::evaluation::Metric;
use falsim_core::strategies::Strategy;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_falsim"));
    c.env("RUST_LOG", "error");
    c
}

fn code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

fn synth(dir: &Path, classes: usize, per_class: usize, seed: u64) -> (PathBuf, PathBuf) {
    commands::cmd_synth(&SynthArgs {
        num_classes: classes,
        dim: 4,
        per_class,
        spread: 1.0,
        seed,
        out_dir: dir.to_path_buf(),
    })
    .unwrap()
}

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetSource::Synth {
            num_classes: 3,
            dim: 4,
            per_class: 40,
            spread: 1.0,
            seed: 5,
        },
        rounds: 2,
        seeds: vec![0, 1],
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.partition.num_clients = 3;
    cfg.train.local_epochs = 2;
    cfg
}

#[test]
fn synth_writes_requested_sizes_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name);
    for name in ["a", "b"] {
        let mut cmd = bin();
        cmd.args([
            "synth",
            "--classes",
            "10",
            "--dim",
            "16",
            "--per-class",
            "100",
        ])
        .args(["--spread", "0.5", "--seed", "1", "--out"])
        .arg(out(name));
        assert_eq!(code(&mut cmd), 0);
    }
    for f in ["train.csv", "test.csv"] {
        assert_eq!(
            std::fs::read(out("a").join(f)).unwrap(),
            std::fs::read(out("b").join(f)).unwrap()
        );
    }
    let train = load_dataset(out("a").join("train.csv")).unwrap();
    let test = load_dataset(out("a").join("test.csv")).unwrap();
    assert_eq!((train.len(), test.len(), train.dim()), (800, 200, 16));
    assert_eq!(train.class_counts(), vec![80; 10]);
    assert_eq!(test.class_counts(), vec![20; 10]);
}

#[test]
fn synth_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.args(["synth", "--per-class", "1", "--out"])
        .arg(dir.path());
    assert_eq!(code(&mut cmd), 2);
}

#[test]
fn partition_uniform_is_balanced_and_conserves_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(dir.path(), 4, 50, 0);
    let parts_path = dir.path().join("parts.csv");
    let out = bin()
        .args([
            "partition",
            "--alpha",
            "uniform",
            "--clients",
            "4",
            "--dataset",
        ])
        .arg(&train)
        .arg("--out")
        .arg(&parts_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("mean max-class share: 0.2500"), "{table}");

    let ds = load_dataset(&train).unwrap();
    let parts = load_partitions(&parts_path, ds.len()).unwrap();
    let counts = falsim_core::data::partition_class_counts(&ds, &parts);
    assert!(counts.iter().all(|c| c == &vec![10; 4]), "{counts:?}");
    let mut rows: Vec<usize> = parts.iter().flat_map(|p| p.indices.clone()).collect();
    rows.sort_unstable();
    assert_eq!(rows, (0..ds.len()).collect::<Vec<_>>());
}

#[test]
fn partition_heterogeneity_direction() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(dir.path(), 10, 100, 0);
    let ds = load_dataset(&train).unwrap();
    let share = |alpha| {
        (0..10)
            .map(|seed| {
                let spec = PartitionSpec {
                    alpha,
                    num_clients: 10,
                    seed,
                };
                let out = dir.path().join("p.csv");
                commands::cmd_partition(&train, &spec, &out).unwrap();
                let parts = load_partitions(&out, ds.len()).unwrap();
                falsim_core::data::mean_max_class_share(&ds, &parts)
            })
            .sum::<f64>()
    };
    assert!(share(Alpha::Dirichlet(0.1)) > share(Alpha::Dirichlet(1.0)));
}

#[test]
fn partition_rejects_bad_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(dir.path(), 3, 10, 0);
    let mut cmd = bin();
    cmd.args(["partition", "--alpha", "-2", "--dataset"])
        .arg(&train)
        .arg("--out")
        .arg(dir.path().join("p.csv"));
    assert_eq!(code(&mut cmd), 1);
    let mut cmd = bin();
    cmd.args(["partition", "--clients", "1000", "--dataset"])
        .arg(&train)
        .arg("--out")
        .arg(dir.path().join("p.csv"));
    assert_eq!(code(&mut cmd), 2);
}

#[test]
fn tiny_budget_ten_clients_ten_rounds_labels_one_thousand() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("out"));
    cfg.dataset = DatasetSource::Synth {
        num_classes: 10,
        dim: 4,
        per_class: 150,
        spread: 1.0,
        seed: 1,
    };
    cfg.partition.num_clients = 10;
    cfg.rounds = 10;
    cfg.seeds = vec![0];
    cfg.budget = Budget::Tiny;
    cfg.strategy = Strategy::Random;
    cfg.train.local_epochs = 1;
    let run = commands::cmd_run(&cfg).unwrap();
    assert_eq!(run.rows.len(), 10);
    let last = run.rows.last().unwrap();
    assert_eq!(last.labeled_per_client, vec![100; 10]);
    assert_eq!(last.labeled_per_client.iter().sum::<usize>(), 1000);
    assert_eq!(
        results::read_selections(&run.selections).unwrap().len(),
        1000
    );
}

#[test]
fn run_through_binary_is_byte_identical_and_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = synth(&dir.path().join("data"), 3, 40, 2);
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(
        &cfg_path,
        format!(
            "[dataset]\ntrain = {}\ntest = {}\n[partition]\nclients = 3\n\
             [train]\nlocal_epochs = 2\n[run]\nrounds = 2\nseeds = 0..3\n[output]\ndir = ignored\n",
            train.display(),
            test.display()
        ),
    )
    .unwrap();
    for name in ["a", "b"] {
        let mut cmd = bin();
        cmd.args(["run", "--strategy", "coreset", "--seeds", "4,5", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(dir.path().join(name));
        assert_eq!(code(&mut cmd), 0);
    }
    let read = |n: &str, f: &str| std::fs::read(dir.path().join(n).join(f)).unwrap();
    assert_eq!(read("a", "results.csv"), read("b", "results.csv"));
    assert_eq!(read("a", "selections.csv"), read("b", "selections.csv"));
    let rows = results::read_results(&dir.path().join("a/results.csv")).unwrap();
    assert!(rows.iter().all(|r| r.strategy == "coreset"));
    let seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![4, 4, 5, 5]);
    assert!(!dir.path().join("ignored").exists());
    // No temporary per-seed files are left behind.
    assert_eq!(std::fs::read_dir(dir.path().join("a")).unwrap().count(), 2);
}

#[test]
fn random_and_typiclust_select_differently() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = small_config(&dir.path().join("random"));
    a.strategy = Strategy::Random;
    let mut b = small_config(&dir.path().join("typiclust"));
    b.strategy = Strategy::Typiclust;
    let ra = commands::cmd_run(&a).unwrap();
    let rb = commands::cmd_run(&b).unwrap();
    assert_ne!(
        results::read_selections(&ra.selections).unwrap(),
        results::read_selections(&rb.selections).unwrap()
    );
}

#[test]
fn run_rejects_budget_beyond_pool() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("out"));
    cfg.rounds = 20;
    let err = commands::cmd_run(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");

    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, "[budget]\nper_round = 1000\n[run]\nseeds = 0\n").unwrap();
    let mut cmd = bin();
    cmd.arg("run").arg("--config").arg(&cfg_path);
    assert_eq!(code(&mut cmd), 2);
}

#[test]
fn run_rejects_malformed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.cfg");
    std::fs::write(&cfg_path, "[run]\nrounds = many\n").unwrap();
    let mut cmd = bin();
    cmd.arg("run").arg("--config").arg(&cfg_path);
    assert_eq!(code(&mut cmd), 2);
}

fn write_series(path: &Path, strategy: &str, per_seed: &[&[f64]]) {
    let rows: Vec<ResultRow> = per_seed
        .iter()
        .enumerate()
        .flat_map(|(s, series)| {
            series.iter().enumerate().map(move |(r, &acc)| ResultRow {
                strategy: strategy.into(),
                seed: s as u64,
                round: r + 1,
                labeled_per_client: vec![r + 1],
                accuracy: acc,
                balanced_recall: acc,
            })
        })
        .collect();
    results::write_results(path, &rows).unwrap();
}

#[test]
fn compare_fixture_reproduces_t_score() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    // Round 1 differences (1,2,3,2); round 2 differences (1,-1,1,-1).
    write_series(
        &a,
        "a",
        &[&[1.0, 1.0], &[2.0, -1.0], &[3.0, 1.0], &[2.0, -1.0]],
    );
    write_series(&b, "b", &[&[0.0, 0.0][..]; 4]);
    let out = dir.path().join("cmp");
    let mut cmd = bin();
    cmd.arg("compare").arg(&a).arg(&b).arg("--out").arg(&out);
    assert_eq!(code(&mut cmd), 0);
    let rows = results::read_comparison(&out.join("a_vs_b.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!((rows[0].2 - 24f64.sqrt()).abs() < 1e-12);
    assert!(rows[0].3 && !rows[0].4);
    assert_eq!(rows[1].2, 0.0);
    let summary = results::read_summary(&out.join("summary.csv")).unwrap();
    assert_eq!(summary[0].win_rate, 0.5);
    assert_eq!(summary[0].defeat_rate, 0.0);
    assert_eq!(summary[0].seeds, 4);

    let rev = commands::cmd_compare(
        &[a.clone(), b.clone()],
        Metric::Accuracy,
        Some("b"),
        2.776,
        &out,
    )
    .unwrap();
    assert_eq!(rev[0].pair(), "b_vs_a");
    assert_eq!((rev[0].win_rate, rev[0].defeat_rate), (0.0, 0.5));
}

#[test]
fn compare_self_is_zero_and_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    write_series(
        &a,
        "a",
        &[&[0.1, 0.2, 0.3], &[0.2, 0.1, 0.5], &[0.3, 0.3, 0.3]],
    );
    let reports =
        commands::cmd_compare(&[a.clone()], Metric::Accuracy, None, 2.776, dir.path()).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!((reports[0].win_rate, reports[0].defeat_rate), (0.0, 0.0));
    assert_eq!(reports[0].t_scores.len(), 3);

    let short = dir.path().join("short.csv");
    write_series(&short, "s", &[&[0.1, 0.2], &[0.2, 0.1], &[0.3, 0.3]]);
    let mut cmd = bin();
    cmd.arg("compare")
        .arg(&a)
        .arg(&short)
        .arg("--out")
        .arg(dir.path());
    assert_eq!(code(&mut cmd), 2);

    let mut cmd = bin();
    cmd.arg("compare")
        .arg(&a)
        .args(["--strategy", "zzz", "--out"])
        .arg(dir.path());
    assert_eq!(code(&mut cmd), 2);
}

#[test]
fn shift_single_client_is_identity_and_histograms_conserve() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(dir.path(), 3, 40, 9);
    let ds = load_dataset(&train).unwrap();
    let one = dir.path().join("one.csv");
    commands::cmd_partition(
        &train,
        &PartitionSpec {
            alpha: Alpha::Uniform,
            num_clients: 1,
            seed: 0,
        },
        &one,
    )
    .unwrap();
    let out = dir.path().join("shift1");
    let report = commands::cmd_shift(&train, &one, 5, 1.0, &out).unwrap();
    assert_eq!(report.centralized, report.per_client);

    let three = dir.path().join("three.csv");
    commands::cmd_partition(
        &train,
        &PartitionSpec {
            alpha: Alpha::Uniform,
            num_clients: 3,
            seed: 0,
        },
        &three,
    )
    .unwrap();
    let out = dir.path().join("shift3");
    let mut cmd = bin();
    cmd.args(["shift", "--k", "5", "--dataset"])
        .arg(&train)
        .arg("--partition")
        .arg(&three)
        .arg("--out")
        .arg(&out);
    assert_eq!(code(&mut cmd), 0);
    let hist = results::read_histogram(&out.join(commands::SHIFT_HISTOGRAM_FILE)).unwrap();
    assert_eq!(hist.len(), 50);
    assert_eq!(hist.iter().map(|h| h.centralized).sum::<usize>(), ds.len());
    assert_eq!(hist.iter().map(|h| h.per_client).sum::<usize>(), ds.len());
    assert!(hist.windows(2).all(|w| w[0].bin_hi == w[1].bin_lo));
    let summary = results::read_shift_summary(&out.join(commands::SHIFT_SUMMARY_FILE)).unwrap();
    let c: f64 = summary["centralized_mean"].parse().unwrap();
    let p: f64 = summary["per_client_mean"].parse().unwrap();
    assert!(p < c);
}

#[test]
fn shift_rejects_tiny_clients() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(dir.path(), 2, 5, 0);
    let parts = dir.path().join("p.csv");
    commands::cmd_partition(
        &train,
        &PartitionSpec {
            alpha: Alpha::Uniform,
            num_clients: 8,
            seed: 0,
        },
        &parts,
    )
    .unwrap();
    let mut cmd = bin();
    cmd.args(["shift", "--dataset"])
        .arg(&train)
        .arg("--partition")
        .arg(&parts)
        .arg("--out")
        .arg(dir.path());
    assert_eq!(code(&mut cmd), 2);
}

#[test]
fn plotdata_means_standard_errors_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let same = dir.path().join("same.csv");
    write_series(&same, "same", &[&[0.5, 0.6][..]; 4]);
    let two = dir.path().join("two.csv");
    write_series(&two, "two", &[&[0.2], &[0.4]]);
    let out = dir.path().join("plots");
    let mut cmd = bin();
    cmd.arg("plotdata")
        .arg("--results")
        .arg(&same)
        .arg("--results")
        .arg(&two)
        .arg("--out")
        .arg(&out);
    assert_eq!(code(&mut cmd), 0);

    let text = std::fs::read_to_string(out.join(commands::CURVES_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("label,metric,round,mean,std_err,seeds"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let same_rows: Vec<_> = rows.iter().filter(|r| r[0] == "same").collect();
    assert_eq!(same_rows.len(), 4);
    assert!(same_rows.iter().all(|r| r[4] == "0" && r[5] == "4"));
    let two_acc = rows
        .iter()
        .find(|r| r[0] == "two" && r[1] == "accuracy")
        .unwrap();
    assert!((two_acc[3].parse::<f64>().unwrap() - 0.3).abs() < 1e-12);
    assert!((two_acc[4].parse::<f64>().unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn plotdata_winrates_and_histograms() {
    let dir = tempfile::tempdir().unwrap();
    for (cfg, win) in [("cfg1", 0.2), ("cfg2", 0.6)] {
        let d = dir.path().join(cfg);
        std::fs::create_dir_all(&d).unwrap();
        results::write_summary(
            &d.join("summary.csv"),
            &[results::SummaryRow {
                pair: "typiclust_vs_random".into(),
                metric: Metric::Accuracy,
                rounds: 5,
                seeds: 4,
                threshold: 2.776,
                win_rate: win,
                defeat_rate: 0.0,
            }],
        )
        .unwrap();
    }
    let hist = dir.path().join("cfg1").join("h.csv");
    results::write_histogram(
        &hist,
        &[
            results::HistogramRow {
                bin_lo: 0.0,
                bin_hi: 1.0,
                centralized: 1,
                per_client: 3,
            },
            results::HistogramRow {
                bin_lo: 1.0,
                bin_hi: 2.0,
                centralized: 3,
                per_client: 1,
            },
        ],
    )
    .unwrap();
    let out = dir.path().join("plots");
    let written = commands::cmd_plotdata(
        &PlotInputs {
            results: vec![],
            summaries: vec![
                dir.path().join("cfg1/summary.csv"),
                dir.path().join("cfg2/summary.csv"),
            ],
            histograms: vec![hist],
        },
        &out,
    )
    .unwrap();
    assert_eq!(written.len(), 2);
    let win = std::fs::read_to_string(out.join(commands::WINRATES_FILE)).unwrap();
    assert_eq!(
        win,
        "config,pair,metric,win_rate,defeat_rate\n\
         cfg1,typiclust_vs_random,accuracy,0.2,0\n\
         cfg2,typiclust_vs_random,accuracy,0.6,0\n\
         mean,typiclust_vs_random,accuracy,0.4,0\n"
    );
    let h = std::fs::read_to_string(out.join(commands::HISTOGRAMS_FILE)).unwrap();
    assert!(h.contains("cfg1,0,1,1,3,0.25,0.75"), "{h}");
}

#[test]
fn plotdata_rejects_empty_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.arg("plotdata").arg("--out").arg(dir.path());
    assert_eq!(code(&mut cmd), 2);

    let empty = dir.path().join("empty.csv");
    results::write_results(&empty, &[]).unwrap();
    let mut cmd = bin();
    cmd.arg("plotdata")
        .arg("--results")
        .arg(&empty)
        .arg("--out")
        .arg(dir.path());
    assert_eq!(code(&mut cmd), 2);
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(code(bin().arg("frobnicate")), 1);
    assert_eq!(code(bin().args(["run"])), 1);
    assert_eq!(code(bin().arg("--help")), 0);
    assert_eq!(code(bin().arg("--version")), 0);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(
            bin()
                .arg("run")
                .arg("--config")
                .arg(dir.path().join("missing.cfg"))
        ),
        2
    );
}

#[test]
fn emitted_run_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("out"));
    let run = commands::cmd_run(&cfg).unwrap();
    let back = dir.path().join("copy.csv");
    results::write_results(&back, &run.rows).unwrap();
    assert_eq!(
        std::fs::read(&back).unwrap(),
        std::fs::read(&run.results).unwrap()
    );
    let sel = results::read_selections(&run.selections).unwrap();
    let copy = dir.path().join("sel.csv");
    results::write_selections(&copy, &sel).unwrap();
    assert_eq!(
        std::fs::read(&copy).unwrap(),
        std::fs::read(&run.selections).unwrap()
    );
}

#[test]
fn shipped_example_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/example.cfg");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.seeds, vec![0, 1, 2, 3]);
    assert_eq!(cfg.budget.resolve(10), 10);
}
