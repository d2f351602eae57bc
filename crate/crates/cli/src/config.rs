//! Experiment configuration: flat `key = value` lines grouped under
//! `[section]` headers. `#` starts a comment. Relative paths are resolved
//! against the directory holding the config file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use falsim_core::data::{Alpha, PartitionSpec};
use falsim_core::federation::{AggregationWeight, FederationConfig};
use falsim_core::model::{Arch, TrainConfig};
use falsim_core::strategies::{GeometryConfig, Selector, Strategy};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Files {
        train: PathBuf,
        test: PathBuf,
    },
    Synth {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        seed: u64,
    },
}

/// Per-client, per-round annotation quota.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    /// One label per class.
    Tiny,
    /// Three labels per class.
    Small,
    Explicit(usize),
}

impl Budget {
    pub fn resolve(self, num_classes: usize) -> usize {
        match self {
            Budget::Tiny => num_classes,
            Budget::Small => 3 * num_classes,
            Budget::Explicit(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Features keyed by id used for selection instead of the model inputs.
    pub selection_features: Option<PathBuf>,
    /// Per-client overrides of `selection_features`.
    pub client_features: BTreeMap<usize, PathBuf>,
    pub partition: PartitionSpec,
    /// Precomputed partition file; overrides `partition` when set.
    pub partition_file: Option<PathBuf>,
    pub arch: Arch,
    pub train: TrainConfig,
    pub strategy: Strategy,
    pub selector: Selector,
    pub logo_micro: Selector,
    pub budget: Budget,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub geometry: GeometryConfig,
    pub aggregation: AggregationWeight,
    pub parallel: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synth {
                num_classes: 10,
                dim: 16,
                per_class: 200,
                spread: 1.0,
                seed: 0,
            },
            selection_features: None,
            client_features: BTreeMap::new(),
            partition: PartitionSpec {
                alpha: Alpha::Uniform,
                num_clients: 10,
                seed: 0,
            },
            partition_file: None,
            arch: Arch::Linear,
            train: TrainConfig::default(),
            strategy: Strategy::Typiclust,
            selector: Selector::Global,
            logo_micro: Selector::Global,
            budget: Budget::Tiny,
            rounds: 10,
            seeds: vec![0, 1, 2, 3],
            geometry: GeometryConfig::default(),
            aggregation: AggregationWeight::Labeled,
            parallel: true,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let entries = parse_entries(text)?;
        let mut cfg = ExperimentConfig::default();
        let mut train_path = None;
        let mut test_path = None;
        let mut synth = BTreeMap::new();
        let mut budget_mode = None;
        let mut per_round = None;
        let path = |v: &str| base.join(v);

        for (key, (value, line)) in &entries {
            let v = value.as_str();
            let bad = |e: String| CliError::validation(format!("line {line}: {key}: {e}"));
            match key.as_str() {
                "dataset.train" => train_path = Some(path(v)),
                "dataset.test" => test_path = Some(path(v)),
                "dataset.synth_classes"
                | "dataset.synth_dim"
                | "dataset.synth_per_class"
                | "dataset.synth_spread"
                | "dataset.synth_seed" => {
                    synth.insert(&key["dataset.synth_".len()..], (v, *line));
                }
                "dataset.selection_features" => cfg.selection_features = Some(path(v)),
                k if k.starts_with("dataset.client_features.") => {
                    let client: usize = num(&k["dataset.client_features.".len()..])
                        .map_err(|e| bad(format!("client index: {e}")))?;
                    cfg.client_features.insert(client, path(v));
                }
                "partition.alpha" => {
                    cfg.partition.alpha = v.parse().map_err(|e| bad(format!("{e}")))?
                }
                "partition.clients" => cfg.partition.num_clients = num(v).map_err(bad)?,
                "partition.seed" => cfg.partition.seed = num(v).map_err(bad)?,
                "partition.file" => cfg.partition_file = Some(path(v)),
                "model.arch" => cfg.arch = v.parse().map_err(|e| bad(format!("{e}")))?,
                "train.learning_rate" => cfg.train.learning_rate = num(v).map_err(bad)?,
                "train.momentum" => cfg.train.momentum = num(v).map_err(bad)?,
                "train.weight_decay" => cfg.train.weight_decay = num(v).map_err(bad)?,
                "train.local_epochs" => cfg.train.local_epochs = num(v).map_err(bad)?,
                "train.batch_size" => {
                    cfg.train.batch_size = match v {
                        "auto" => None,
                        _ => Some(num(v).map_err(bad)?),
                    }
                }
                "strategy.name" => cfg.strategy = v.parse().map_err(|e| bad(format!("{e}")))?,
                "strategy.selector" => cfg.selector = v.parse().map_err(|e| bad(format!("{e}")))?,
                "strategy.logo_micro" => {
                    cfg.logo_micro = v.parse().map_err(|e| bad(format!("{e}")))?
                }
                "budget.mode" => budget_mode = Some((v, *line)),
                "budget.per_round" => per_round = Some(num::<usize>(v).map_err(bad)?),
                "run.rounds" => cfg.rounds = num(v).map_err(bad)?,
                "run.seeds" => cfg.seeds = parse_seeds(v).map_err(|e| bad(e.to_string()))?,
                "run.parallel" => cfg.parallel = num(v).map_err(bad)?,
                "run.aggregation_weight" => {
                    cfg.aggregation = v.parse().map_err(|e| bad(format!("{e}")))?
                }
                "geometry.typicality_k" => cfg.geometry.typicality_k = num(v).map_err(bad)?,
                "geometry.kmeans_max_iters" => {
                    cfg.geometry.kmeans.max_iters = num(v).map_err(bad)?
                }
                "geometry.kmeans_tol" => cfg.geometry.kmeans.tol = num(v).map_err(bad)?,
                "output.dir" => cfg.output_dir = path(v),
                _ => {
                    return Err(CliError::validation(format!(
                        "line {line}: unknown key {key}"
                    )))
                }
            }
        }

        cfg.dataset = match (train_path, test_path, synth.is_empty()) {
            (Some(train), Some(test), true) => DatasetSource::Files { train, test },
            (None, None, _) => {
                let mut src = ExperimentConfig::default().dataset;
                if let DatasetSource::Synth {
                    num_classes,
                    dim,
                    per_class,
                    spread,
                    seed,
                } = &mut src
                {
                    for (k, (v, line)) in synth {
                        let bad = |e: String| {
                            CliError::validation(format!("line {line}: dataset.synth_{k}: {e}"))
                        };
                        match k {
                            "classes" => *num_classes = num(v).map_err(bad)?,
                            "dim" => *dim = num(v).map_err(bad)?,
                            "per_class" => *per_class = num(v).map_err(bad)?,
                            "spread" => *spread = num(v).map_err(bad)?,
                            _ => *seed = num(v).map_err(bad)?,
                        }
                    }
                }
                src
            }
            (Some(_), Some(_), false) => {
                return Err(CliError::validation(
                    "dataset: give either train/test files or synth_* parameters, not both",
                ))
            }
            _ => {
                return Err(CliError::validation(
                    "dataset: train and test must be given together",
                ))
            }
        };

        cfg.budget = match (budget_mode, per_round) {
            (Some(_), Some(_)) => {
                return Err(CliError::validation(
                    "budget: give either mode or per_round, not both",
                ))
            }
            (None, Some(b)) => Budget::Explicit(b),
            (Some(("tiny", _)), None) | (None, None) => Budget::Tiny,
            (Some(("small", _)), None) => Budget::Small,
            (Some((other, line)), None) => {
                return Err(CliError::validation(format!(
                    "line {line}: budget.mode: expected tiny or small, got {other:?}"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::validation("run.seeds must not be empty"));
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(CliError::validation("run.seeds contains duplicates"));
        }
        if self.rounds == 0 {
            return Err(CliError::validation("run.rounds must be at least 1"));
        }
        if self.partition.num_clients == 0 {
            return Err(CliError::validation("partition.clients must be at least 1"));
        }
        if self.budget == Budget::Explicit(0) {
            return Err(CliError::validation("budget.per_round must be at least 1"));
        }
        if self.geometry.typicality_k == 0 {
            return Err(CliError::validation(
                "geometry.typicality_k must be at least 1",
            ));
        }
        if self.geometry.kmeans.max_iters == 0 {
            return Err(CliError::validation(
                "geometry.kmeans_max_iters must be at least 1",
            ));
        }
        if !(self.geometry.kmeans.tol >= 0.0) {
            return Err(CliError::validation(
                "geometry.kmeans_tol must be non-negative",
            ));
        }
        if let Some(&k) = self.client_features.keys().next_back() {
            if k >= self.partition.num_clients {
                return Err(CliError::validation(format!(
                    "dataset.client_features.{k}: no such client"
                )));
            }
        }
        self.train.validate()?;
        Ok(())
    }

    /// Federation settings for one master seed.
    pub fn federation(&self, num_classes: usize, seed: u64) -> FederationConfig {
        FederationConfig {
            arch: self.arch,
            train: self.train,
            strategy: self.strategy,
            selector: self.selector,
            logo_micro: self.logo_micro,
            budget: self.budget.resolve(num_classes),
            geometry: self.geometry,
            aggregation: self.aggregation,
            parallel: self.parallel,
            seed,
        }
    }
}

/// Comma-separated seeds; `a..b` expands to the half-open range.
pub fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: u64 = num(lo).map_err(CliError::Validation)?;
            let hi: u64 = num(hi).map_err(CliError::Validation)?;
            if lo >= hi {
                return Err(CliError::validation(format!("empty seed range {part}")));
            }
            seeds.extend(lo..hi);
        } else {
            seeds.push(num(part).map_err(CliError::Validation)?);
        }
    }
    if seeds.is_empty() {
        return Err(CliError::validation("no seeds given"));
    }
    Ok(seeds)
}

fn num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.trim()
        .parse()
        .map_err(|e| format!("cannot parse {:?}: {e}", s.trim()))
}

/// `section.key -> (value, line)`; duplicate keys are rejected.
fn parse_entries(text: &str) -> CliResult<BTreeMap<String, (String, usize)>> {
    let mut section = String::new();
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| CliError::validation(format!("line {line}: unterminated section")))?
                .trim();
            if name.is_empty() {
                return Err(CliError::validation(format!(
                    "line {line}: empty section name"
                )));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| CliError::validation(format!("line {line}: expected key = value")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CliError::validation(format!("line {line}: empty key")));
        }
        if section.is_empty() {
            return Err(CliError::validation(format!(
                "line {line}: key {k} outside any section"
            )));
        }
        let key = format!("{section}.{k}");
        if out.insert(key.clone(), (v.to_string(), line)).is_some() {
            return Err(CliError::validation(format!(
                "line {line}: duplicate key {key}"
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_when_empty() {
        let cfg = ExperimentConfig::parse("", Path::new("")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn full_config() {
        let text = "
            # comment
            [dataset]
            train = a/train.csv
            test = a/test.csv   # trailing
            client_features.1 = f1.csv
            [partition]
            alpha = 0.1
            clients = 4
            seed = 9
            [model]
            arch = mlp:32
            [train]
            learning_rate = 0.05
            batch_size = 16
            [strategy]
            name = logo
            selector = local_only
            logo_micro = local_only
            [budget]
            mode = small
            [run]
            rounds = 3
            seeds = 0..2, 7
            parallel = false
            aggregation_weight = partition
            [geometry]
            typicality_k = 5
            kmeans_tol = 0
            [output]
            dir = out
        ";
        let cfg = ExperimentConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetSource::Files {
                train: "/base/a/train.csv".into(),
                test: "/base/a/test.csv".into()
            }
        );
        assert_eq!(cfg.client_features[&1], PathBuf::from("/base/f1.csv"));
        assert_eq!(cfg.partition.alpha, Alpha::Dirichlet(0.1));
        assert_eq!(cfg.partition.num_clients, 4);
        assert_eq!(cfg.arch, Arch::Mlp { hidden: 32 });
        assert_eq!(cfg.train.batch_size, Some(16));
        assert_eq!(cfg.strategy, Strategy::Logo);
        assert_eq!(cfg.selector, Selector::LocalOnly);
        assert_eq!(cfg.budget, Budget::Small);
        assert_eq!(cfg.seeds, vec![0, 1, 7]);
        assert!(!cfg.parallel);
        assert_eq!(cfg.aggregation, AggregationWeight::Partition);
        assert_eq!(cfg.geometry.typicality_k, 5);
        assert_eq!(cfg.geometry.kmeans.tol, 0.0);
        assert_eq!(cfg.output_dir, PathBuf::from("/base/out"));
    }

    #[test]
    fn budget_resolution() {
        assert_eq!(Budget::Tiny.resolve(10), 10);
        assert_eq!(Budget::Small.resolve(10), 30);
        assert_eq!(Budget::Small.resolve(8), 24);
        assert_eq!(Budget::Explicit(7).resolve(10), 7);
        let cfg = ExperimentConfig::parse("[budget]\nper_round = 4", Path::new("")).unwrap();
        assert_eq!(cfg.budget, Budget::Explicit(4));
    }

    #[test]
    fn synth_keys() {
        let text = "[dataset]\nsynth_classes = 3\nsynth_spread = 0.5\nsynth_seed = 11";
        let cfg = ExperimentConfig::parse(text, Path::new("")).unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetSource::Synth {
                num_classes: 3,
                dim: 16,
                per_class: 200,
                spread: 0.5,
                seed: 11
            }
        );
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "[run]\nseeds =",
            "[run]\nseeds = 1,1",
            "[run]\nrounds = 0",
            "[run]\nfoo = 1",
            "rounds = 1",
            "[run\nrounds = 1",
            "[run]\nrounds",
            "[run]\nrounds = 1\nrounds = 2",
            "[budget]\nmode = huge",
            "[budget]\nmode = tiny\nper_round = 2",
            "[budget]\nper_round = 0",
            "[dataset]\ntrain = x.csv",
            "[dataset]\ntrain = a\ntest = b\nsynth_dim = 3",
            "[dataset]\nclient_features.10 = f.csv",
            "[strategy]\nname = oracle",
            "[partition]\nalpha = -1",
            "[train]\nlearning_rate = nope",
        ] {
            let err = ExperimentConfig::parse(text, Path::new("")).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..4").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds(" 5, 2 ").unwrap(), vec![5, 2]);
        assert!(parse_seeds("4..4").is_err());
        assert!(parse_seeds("x").is_err());
    }
}
