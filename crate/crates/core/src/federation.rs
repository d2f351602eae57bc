//! Clients, annotation bookkeeping, FedAvg and round orchestration.

use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::data::{ClientPartition, FeatureDataset};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::model::{self, Arch, ModelParams, TrainConfig};
use crate::seed::{self, Purpose};
use crate::strategies::{GeometryConfig, QueryContext, Selector, Strategy};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub partition: ClientPartition,
    /// Sorted dataset rows with revealed labels.
    pub labeled: Vec<usize>,
    /// Sorted dataset rows still unlabelled.
    pub unlabeled: Vec<usize>,
    pub local_params: ModelParams,
    pub local_only_params: Option<ModelParams>,
}

impl ClientState {
    /// A client with everything unlabelled.
    pub fn new(partition: ClientPartition, params: ModelParams) -> Self {
        Self {
            client_id: partition.client_id,
            unlabeled: partition.indices.clone(),
            labeled: Vec::new(),
            partition,
            local_params: params,
            local_only_params: None,
        }
    }

    fn position(&self, row: usize) -> usize {
        self.partition
            .indices
            .binary_search(&row)
            .expect("client rows come from its partition")
    }

    fn positions(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.position(r)).collect()
    }

    /// Checks that labelled and unlabelled rows are a disjoint cover of the
    /// partition.
    pub fn check_cover(&self) -> Result<()> {
        let mut all: Vec<usize> = self
            .labeled
            .iter()
            .chain(&self.unlabeled)
            .copied()
            .collect();
        all.sort_unstable();
        if all != self.partition.indices {
            return Err(Error::Invariant(format!(
                "client {}: labeled and unlabeled sets do not partition its rows",
                self.client_id
            )));
        }
        Ok(())
    }
}

/// Moves `selected` rows from the unlabelled to the labelled set.
pub fn annotate(mut client: ClientState, selected: &[usize], budget: usize) -> Result<ClientState> {
    if selected.len() != budget {
        return Err(Error::invalid(format!(
            "client {}: selected {} points, budget is {budget}",
            client.client_id,
            selected.len()
        )));
    }
    let mut sel = selected.to_vec();
    sel.sort_unstable();
    if sel.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("selection contains duplicates"));
    }
    for &row in &sel {
        if client.unlabeled.binary_search(&row).is_err() {
            return Err(Error::invalid(format!(
                "client {}: row {row} is not unlabeled",
                client.client_id
            )));
        }
    }
    client.unlabeled.retain(|r| sel.binary_search(r).is_err());
    client.labeled.extend(sel);
    client.labeled.sort_unstable();
    Ok(client)
}

/// Weighted arithmetic mean of parameter sets, accumulated in the given order.
///
/// Uses the running update `m += (w_k / W_k) (theta_k - m)`, so identical
/// inputs reproduce themselves exactly.
pub fn fedavg(entries: &[(&ModelParams, f64)]) -> Result<ModelParams> {
    let (first, _) = entries.first().ok_or(Error::Empty("fedavg entries"))?;
    for (p, w) in entries {
        if !p.same_shape(first) {
            return Err(Error::invalid("fedavg: architecture mismatch"));
        }
        if !(*w >= 0.0 && w.is_finite()) {
            return Err(Error::invalid(format!("fedavg: invalid weight {w}")));
        }
    }
    let mut live = entries.iter().filter(|(_, w)| *w > 0.0);
    let (start, w0) = live
        .next()
        .ok_or_else(|| Error::invalid("fedavg: all weights are zero"))?;
    let mut mean = (*start).clone();
    let mut total = *w0;
    for (p, w) in live {
        total += w;
        let frac = w / total;
        for (mut m, t) in mean.tensors_mut().zip(p.tensors()) {
            Zip::from(&mut m)
                .and(&t)
                .for_each(|m, &t| *m += frac * (t - *m));
        }
    }
    Ok(mean)
}

fn labeled_batch(
    client: &ClientState,
    dataset: &FeatureDataset,
    features: ArrayView2<f64>,
) -> (Array2<f64>, Vec<usize>) {
    let pos = client.positions(&client.labeled);
    let x = features.select(Axis(0), &pos);
    let y = client.labeled.iter().map(|&r| dataset.labels[r]).collect();
    (x, y)
}

/// Trains a fresh model on the client's labelled rows only.
///
/// `features` are the client's model inputs, one row per partition index.
pub fn train_local_only(
    client: &ClientState,
    dataset: &FeatureDataset,
    features: ArrayView2<f64>,
    arch: Arch,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<ModelParams> {
    if client.labeled.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    let init = model::init_params(arch, features.ncols(), dataset.num_classes, init_seed);
    let (x, y) = labeled_batch(client, dataset, features);
    model::sgd_train(&init, x.view(), &y, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationWeight {
    /// Current labelled-set size.
    #[default]
    Labeled,
    /// Partition size.
    Partition,
}

impl FromStr for AggregationWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "labeled" => Ok(AggregationWeight::Labeled),
            "partition" => Ok(AggregationWeight::Partition),
            other => Err(Error::invalid(format!(
                "unknown aggregation weight {other:?} (expected labeled or partition)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub arch: Arch,
    /// `seed` is ignored; each client and round gets its own substream.
    pub train: TrainConfig,
    pub strategy: Strategy,
    pub selector: Selector,
    pub logo_micro: Selector,
    /// Points each client annotates per round.
    pub budget: usize,
    pub geometry: GeometryConfig,
    pub aggregation: AggregationWeight,
    pub parallel: bool,
    /// Master seed of the run.
    pub seed: u64,
}

impl FederationConfig {
    pub fn new(strategy: Strategy, budget: usize, seed: u64) -> Self {
        Self {
            arch: Arch::Linear,
            train: TrainConfig::default(),
            strategy,
            selector: Selector::Global,
            logo_micro: Selector::Global,
            budget,
            geometry: GeometryConfig::default(),
            aggregation: AggregationWeight::Labeled,
            parallel: true,
            seed,
        }
    }

    fn uses_local_only(&self) -> bool {
        self.strategy.needs_local_only()
            || self.selector == Selector::LocalOnly
            || (self.strategy == Strategy::Logo && self.logo_micro == Selector::LocalOnly)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub labeled_per_client: Vec<usize>,
    /// Fingerprint of the aggregated parameters.
    pub global_params_id: u64,
    pub accuracy: f64,
    pub balanced_recall: f64,
    /// Dataset rows annotated this round, per client.
    pub selections: Vec<Vec<usize>>,
    /// Clients whose strategy fell back to random selection.
    pub fallbacks: usize,
}

/// FNV-1a over the parameter bit patterns.
pub fn params_fingerprint(params: &ModelParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in params.flatten() {
        for byte in v.to_bits().to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

struct ClientData {
    features: Array2<f64>,
    selection: Option<Array2<f64>>,
}

struct ClientUpdate {
    selection: Vec<usize>,
    fallback: bool,
}

/// A simulated federation over one dataset.
pub struct Federation<'a> {
    dataset: &'a FeatureDataset,
    test: &'a FeatureDataset,
    config: FederationConfig,
    clients: Vec<ClientState>,
    data: Vec<ClientData>,
    global: ModelParams,
    round: usize,
}

impl<'a> Federation<'a> {
    /// `selection_features`, when given, holds one matrix per client (rows in
    /// partition order) used by TypiClust in place of the model inputs.
    pub fn new(
        dataset: &'a FeatureDataset,
        test: &'a FeatureDataset,
        partitions: &[ClientPartition],
        selection_features: Option<Vec<Array2<f64>>>,
        config: FederationConfig,
    ) -> Result<Self> {
        config.train.validate()?;
        if partitions.is_empty() {
            return Err(Error::Empty("partitions"));
        }
        if test.dim() != dataset.dim() {
            return Err(Error::DimensionMismatch {
                expected: dataset.dim(),
                actual: test.dim(),
            });
        }
        if let Some(sel) = &selection_features {
            if sel.len() != partitions.len() {
                return Err(Error::invalid(
                    "one selection feature matrix per client required",
                ));
            }
            for (m, p) in sel.iter().zip(partitions) {
                if m.nrows() != p.indices.len() {
                    return Err(Error::DimensionMismatch {
                        expected: p.indices.len(),
                        actual: m.nrows(),
                    });
                }
            }
        }
        let global = model::init_params(
            config.arch,
            dataset.dim(),
            dataset.num_classes,
            seed::derive(config.seed, 0, 0, Purpose::GlobalInit),
        );
        let mut sel_iter = selection_features.map(Vec::into_iter);
        let mut clients = Vec::with_capacity(partitions.len());
        let mut data = Vec::with_capacity(partitions.len());
        for (k, p) in partitions.iter().enumerate() {
            if p.client_id != k {
                return Err(Error::invalid("partitions must be ordered by client id"));
            }
            let mut c = ClientState::new(p.clone(), global.clone());
            if config.uses_local_only() {
                // Nothing is labelled before the first round, so the first
                // query sees an untrained local-only model.
                c.local_only_params = Some(model::init_params(
                    config.arch,
                    dataset.dim(),
                    dataset.num_classes,
                    seed::derive(config.seed, k as u64, 0, Purpose::LocalOnlyInit),
                ));
            }
            clients.push(c);
            data.push(ClientData {
                features: dataset.features.select(Axis(0), &p.indices),
                selection: sel_iter.as_mut().and_then(Iterator::next),
            });
        }
        Ok(Self {
            dataset,
            test,
            config,
            clients,
            data,
            global,
            round: 0,
        })
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn global_params(&self) -> &ModelParams {
        &self.global
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    /// One federated active-learning round: every client queries and
    /// annotates `budget` points, trains from the global model, and the
    /// results are averaged into the next global model.
    pub fn run_fal_round(&mut self) -> Result<RoundRecord> {
        let round = self.round + 1;
        let b = self.config.budget;
        if let Some(c) = self.clients.iter().find(|c| c.unlabeled.len() < b) {
            return Err(Error::invalid(format!(
                "client {} has {} unlabeled points left, budget is {b}",
                c.client_id,
                c.unlabeled.len()
            )));
        }

        let cfg = &self.config;
        let dataset = self.dataset;
        let global = &self.global;
        let step = |(client, data): (&mut ClientState, &ClientData)| {
            client_step(client, data, dataset, global, cfg, round)
        };
        let updates: Vec<ClientUpdate> = if cfg.parallel {
            self.clients
                .par_iter_mut()
                .zip(self.data.par_iter())
                .map(step)
                .collect::<Result<_>>()?
        } else {
            self.clients
                .iter_mut()
                .zip(self.data.iter())
                .map(step)
                .collect::<Result<_>>()?
        };

        let entries: Vec<(&ModelParams, f64)> = self
            .clients
            .iter()
            .map(|c| {
                let w = match cfg.aggregation {
                    AggregationWeight::Labeled => c.labeled.len(),
                    AggregationWeight::Partition => c.partition.indices.len(),
                };
                (&c.local_params, w as f64)
            })
            .collect();
        let next = fedavg(&entries)?;

        for c in &self.clients {
            c.check_cover()?;
            if c.labeled.len() != round * b {
                return Err(Error::Invariant(format!(
                    "client {}: {} labeled after round {round}, expected {}",
                    c.client_id,
                    c.labeled.len(),
                    round * b
                )));
            }
        }

        self.global = next;
        self.round = round;
        let pred = model::predict(&self.global, self.test.features.view())?;
        if pred.is_empty() {
            return Err(Error::Empty("test set"));
        }
        Ok(RoundRecord {
            round,
            labeled_per_client: self.clients.iter().map(|c| c.labeled.len()).collect(),
            global_params_id: params_fingerprint(&self.global),
            accuracy: evaluation::accuracy_of(&pred, &self.test.labels),
            balanced_recall: evaluation::balanced_recall_of(
                &pred,
                &self.test.labels,
                self.test.num_classes,
            ),
            fallbacks: updates.iter().filter(|u| u.fallback).count(),
            selections: updates.into_iter().map(|u| u.selection).collect(),
        })
    }

    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundRecord>> {
        (0..rounds).map(|_| self.run_fal_round()).collect()
    }
}

fn client_step(
    client: &mut ClientState,
    data: &ClientData,
    dataset: &FeatureDataset,
    global: &ModelParams,
    cfg: &FederationConfig,
    round: usize,
) -> Result<ClientUpdate> {
    let k = client.client_id as u64;
    let r = round as u64;
    let labeled_pos = client.positions(&client.labeled);
    let unlabeled_pos = client.positions(&client.unlabeled);
    let ctx = QueryContext {
        features: data.features.view(),
        selection_features: data
            .selection
            .as_ref()
            .map_or(data.features.view(), |m| m.view()),
        labeled: &labeled_pos,
        unlabeled: &unlabeled_pos,
        budget: cfg.budget,
        global_params: global,
        local_only_params: client.local_only_params.as_ref(),
        selector: cfg.selector,
        logo_micro: cfg.logo_micro,
        geometry: cfg.geometry,
        seed: seed::derive(cfg.seed, k, r, Purpose::Query),
    };
    let picked = cfg.strategy.query(&ctx)?;
    let rows: Vec<usize> = picked
        .indices
        .iter()
        .map(|&p| client.partition.indices[p])
        .collect();

    let owned = std::mem::replace(
        client,
        ClientState::new(client.partition.clone(), global.clone()),
    );
    *client = annotate(owned, &rows, cfg.budget)?;

    let (x, y) = labeled_batch(client, dataset, data.features.view());
    let train = TrainConfig {
        seed: seed::derive(cfg.seed, k, r, Purpose::LocalTrain),
        ..cfg.train
    };
    client.local_params = model::sgd_train(global, x.view(), &y, &train)?;

    if cfg.uses_local_only() {
        let train = TrainConfig {
            seed: seed::derive(cfg.seed, k, r, Purpose::LocalOnlyTrain),
            ..cfg.train
        };
        client.local_only_params = Some(train_local_only(
            client,
            dataset,
            data.features.view(),
            cfg.arch,
            &train,
            seed::derive(cfg.seed, k, r, Purpose::LocalOnlyInit),
        )?);
    }
    Ok(ClientUpdate {
        selection: rows,
        fallback: picked.fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dirichlet_partition, synth_dataset, Alpha, PartitionSpec};
    use crate::model::init_params;

    fn client(indices: Vec<usize>) -> ClientState {
        ClientState::new(
            ClientPartition {
                client_id: 0,
                indices,
            },
            ModelParams::zeros(Arch::Linear, 1, 2),
        )
    }

    #[test]
    fn annotate_moves_rows() {
        let c = annotate(client(vec![1, 2, 3]), &[2], 1).unwrap();
        assert_eq!(c.labeled, vec![2]);
        assert_eq!(c.unlabeled, vec![1, 3]);
        assert_eq!(c.labeled.len() + c.unlabeled.len(), 3);
        c.check_cover().unwrap();
        assert!(annotate(client(vec![1, 2, 3]), &[9], 1).is_err());
        assert!(annotate(client(vec![1, 2, 3]), &[1, 2], 1).is_err());
        assert!(annotate(client(vec![1, 2, 3]), &[2, 2], 2).is_err());
        let twice = annotate(c, &[2], 1);
        assert!(twice.is_err());
    }

    #[test]
    fn fedavg_fixed_point_and_symmetry() {
        let theta = init_params(Arch::Mlp { hidden: 4 }, 3, 2, 5);
        let same = fedavg(&[(&theta, 1.0), (&theta, 3.0), (&theta, 0.7)]).unwrap();
        assert_eq!(same, theta);

        let mut neg = theta.clone();
        for mut t in neg.tensors_mut() {
            t.mapv_inplace(|v| -v);
        }
        let zero = fedavg(&[(&theta, 1.0), (&neg, 1.0)]).unwrap();
        assert!(zero.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fedavg_matches_weighted_loop() {
        let ps: Vec<ModelParams> = (0..3).map(|s| init_params(Arch::Linear, 4, 3, s)).collect();
        let w = [1.0, 2.0, 1.0];
        let avg = fedavg(&[(&ps[0], w[0]), (&ps[1], w[1]), (&ps[2], w[2])]).unwrap();
        let flat: Vec<Vec<f64>> = ps.iter().map(ModelParams::flatten).collect();
        for (i, got) in avg.flatten().into_iter().enumerate() {
            let mut s = 0.0;
            for k in 0..3 {
                s += w[k] * flat[k][i];
            }
            assert!((got - s / 4.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn fedavg_errors() {
        let a = init_params(Arch::Linear, 2, 2, 0);
        let b = init_params(Arch::Linear, 3, 2, 0);
        assert!(fedavg(&[]).is_err());
        assert!(fedavg(&[(&a, 1.0), (&b, 1.0)]).is_err());
        assert!(fedavg(&[(&a, 0.0), (&a, 0.0)]).is_err());
        assert!(fedavg(&[(&a, -1.0)]).is_err());
        assert_eq!(fedavg(&[(&a, 0.0), (&a, 2.0)]).unwrap(), a);
    }

    fn small_setup(clients: usize) -> (FeatureDataset, FeatureDataset, Vec<ClientPartition>) {
        let (train, test) = synth_dataset(3, 4, 40, 0.4, 2).unwrap();
        let parts = dirichlet_partition(
            &train,
            &PartitionSpec {
                alpha: Alpha::Uniform,
                num_clients: clients,
                seed: 1,
            },
        )
        .unwrap();
        (train, test, parts)
    }

    #[test]
    fn rounds_accumulate_budget() {
        let (train, test, parts) = small_setup(3);
        for st in Strategy::ALL {
            let mut cfg = FederationConfig::new(st, 3, 7);
            cfg.train.local_epochs = 2;
            let mut fed = Federation::new(&train, &test, &parts, None, cfg).unwrap();
            let records = fed.run(3).unwrap();
            assert_eq!(records.len(), 3);
            for (r, rec) in records.iter().enumerate() {
                assert_eq!(rec.round, r + 1);
                assert!(rec.labeled_per_client.iter().all(|&l| l == (r + 1) * 3));
                assert!((0.0..=1.0).contains(&rec.accuracy));
            }
            for c in fed.clients() {
                c.check_cover().unwrap();
            }
            let total: usize = fed.clients().iter().map(|c| c.labeled.len()).sum();
            assert_eq!(total, 3 * 3 * 3);
        }
    }

    #[test]
    fn exhausted_pool_is_an_error() {
        let (train, test, parts) = small_setup(3);
        let mut fed = Federation::new(
            &train,
            &test,
            &parts,
            None,
            FederationConfig::new(Strategy::Random, 20, 0),
        )
        .unwrap();
        assert!(fed.run(3).is_err());
    }

    #[test]
    fn parallel_and_serial_agree() {
        let (train, test, parts) = small_setup(4);
        for st in [Strategy::Typiclust, Strategy::Kafal, Strategy::Badge] {
            let mut cfg = FederationConfig::new(st, 2, 3);
            cfg.train.local_epochs = 3;
            let par = Federation::new(&train, &test, &parts, None, cfg.clone())
                .unwrap()
                .run(3)
                .unwrap();
            cfg.parallel = false;
            let ser = Federation::new(&train, &test, &parts, None, cfg)
                .unwrap()
                .run(3)
                .unwrap();
            assert_eq!(par, ser);
        }
    }

    #[test]
    fn single_client_aggregate_is_its_model() {
        let (train, test, parts) = small_setup(1);
        let mut cfg = FederationConfig::new(Strategy::Random, 4, 9);
        cfg.train.local_epochs = 3;
        let mut fed = Federation::new(&train, &test, &parts, None, cfg.clone()).unwrap();
        fed.run_fal_round().unwrap();
        let c = &fed.clients()[0];
        assert_eq!(fed.global_params(), &c.local_params);

        // The same seeds through the local-only path reproduce the model.
        let train_cfg = TrainConfig {
            seed: seed::derive(9, 0, 1, Purpose::LocalTrain),
            ..cfg.train
        };
        let feats = train.features.select(Axis(0), &c.partition.indices);
        let local_only = train_local_only(
            c,
            &train,
            feats.view(),
            Arch::Linear,
            &train_cfg,
            seed::derive(9, 0, 0, Purpose::GlobalInit),
        )
        .unwrap();
        assert_eq!(&local_only, fed.global_params());
    }

    #[test]
    fn local_only_sees_local_classes() {
        // The client only holds classes 0 and 1 of a four-class toy set.
        let centres = [[4.0, 1.0], [1.0, 4.0], [3.0, 3.0], [2.0, 2.0]];
        let n = 80;
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            centres[i % 4][j] + 0.05 * ((i * 7 + j * 3) % 11) as f64 / 11.0
        });
        let train = FeatureDataset::new((0..n as u64).collect(), x, labels, 4).unwrap();
        let rows_for = |classes: &[usize]| -> Vec<usize> {
            (0..train.len())
                .filter(|&i| classes.contains(&train.labels[i]))
                .collect()
        };
        let mut c = ClientState::new(
            ClientPartition {
                client_id: 0,
                indices: rows_for(&[0, 1]),
            },
            ModelParams::zeros(Arch::Linear, 2, 4),
        );
        c.labeled = c.partition.indices.clone();
        c.unlabeled.clear();
        let feats = train.features.select(Axis(0), &c.partition.indices);
        let cfg = TrainConfig {
            local_epochs: 100,
            learning_rate: 0.1,
            ..Default::default()
        };
        let p = train_local_only(&c, &train, feats.view(), Arch::Linear, &cfg, 1).unwrap();
        let other = train.features.select(Axis(0), &rows_for(&[2, 3]));
        let proba = model::predict_proba(&p, other.view()).unwrap();
        let local_mass: f64 =
            proba.outer_iter().map(|r| r[0] + r[1]).sum::<f64>() / proba.nrows() as f64;
        assert!(local_mass > 0.9, "{local_mass}");
        assert_eq!(
            p,
            train_local_only(&c, &train, feats.view(), Arch::Linear, &cfg, 1).unwrap()
        );

        let empty = ClientState::new(c.partition.clone(), ModelParams::zeros(Arch::Linear, 2, 4));
        assert!(train_local_only(&empty, &train, feats.view(), Arch::Linear, &cfg, 1).is_err());
    }

    #[test]
    fn fingerprint_tracks_params() {
        let a = init_params(Arch::Linear, 2, 2, 0);
        let b = init_params(Arch::Linear, 2, 2, 1);
        assert_eq!(params_fingerprint(&a), params_fingerprint(&a.clone()));
        assert_ne!(params_fingerprint(&a), params_fingerprint(&b));
    }
}
