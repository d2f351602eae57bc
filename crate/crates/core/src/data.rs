//! Datasets, synthetic data and non-IID client partitioning.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

const CLASSES_TAG: &str = "#classes=";

/// A labelled table of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub ids: Vec<u64>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureDataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        ids: Vec<u64>,
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: ids.len(),
            });
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: labels.len(),
            });
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(Self {
            ids,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> FeatureDataset {
        FeatureDataset {
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn row_of_id(&self) -> std::collections::HashMap<u64, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a dataset CSV: header `id,label,f0,...,f{d-1}[,#classes=C]`, then one
/// `id,label,f0,...` row per sample.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(path, 1, e.to_string()))?,
        None => return Err(parse_err(path, 1, "missing header")),
    };
    if header.len() < 2 || &header[0] != "id" || &header[1] != "label" {
        return Err(parse_err(path, 1, "header must start with id,label"));
    }
    let mut declared_classes = None;
    let mut dim = 0;
    for (j, field) in header.iter().enumerate().skip(2) {
        if let Some(c) = field.strip_prefix(CLASSES_TAG) {
            if j != header.len() - 1 {
                return Err(parse_err(path, 1, "#classes= must be the last column"));
            }
            let c: usize = c
                .parse()
                .map_err(|_| parse_err(path, 1, format!("bad class count {c:?}")))?;
            declared_classes = Some(c);
        } else if field != format!("f{dim}") {
            return Err(parse_err(
                path,
                1,
                format!("expected column f{dim}, found {field:?}"),
            ));
        } else {
            dim += 1;
        }
    }

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for record in records {
        let record = record.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 2 {
            return Err(parse_err(
                path,
                line,
                format!(
                    "ragged row: expected {} fields, found {}",
                    dim + 2,
                    record.len()
                ),
            ));
        }
        let id: u64 = record[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("non-numeric id {:?}", &record[0])))?;
        let label: usize = record[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("non-numeric label {:?}", &record[1])))?;
        ids.push(id);
        labels.push(label);
        for cell in record.iter().skip(2) {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("non-numeric value {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value {cell:?}")));
            }
            values.push(v);
        }
    }

    let num_classes = match declared_classes {
        Some(c) => c,
        None => labels.iter().max().map_or(0, |&m| m + 1),
    };
    let features = Array2::from_shape_vec((ids.len(), dim), values)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    FeatureDataset::new(ids, features, labels, num_classes)
}

/// Writes a dataset in the layout read by [`load_dataset`]. Values use the
/// shortest representation that parses back to the identical `f64`.
pub fn save_dataset(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        write!(w, "id,label")?;
        for j in 0..dataset.dim() {
            write!(w, ",f{j}")?;
        }
        writeln!(w, ",{CLASSES_TAG}{}", dataset.num_classes)?;
        for (i, row) in dataset.features.outer_iter().enumerate() {
            write!(w, "{},{}", dataset.ids[i], dataset.labels[i])?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Gaussian-mixture stand-in for an extracted feature space.
///
/// Class means are drawn from a standard normal; samples are the mean plus
/// `spread` times standard normal noise. Each class contributes
/// `floor(0.8 * per_class)` (at least one, at most `per_class - 1`) samples to
/// the training split and the rest to the test split. Rows of each split are
/// shuffled; ids are unique across both splits.
pub fn synth_dataset(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset)> {
    if num_classes < 2 {
        return Err(Error::invalid("synth needs at least 2 classes"));
    }
    if dim < 1 {
        return Err(Error::invalid("synth needs dim >= 1"));
    }
    if per_class < 2 {
        return Err(Error::invalid(
            "per_class must be at least 2 to split into train and test",
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be finite and non-negative"));
    }
    let mut rng = seed::rng(seed::derive(seed, 0, 0, seed::Purpose::Synth));
    let n_train = (per_class * 4 / 5).clamp(1, per_class - 1);

    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for (c, mean) in means.iter().enumerate() {
        for j in 0..per_class {
            let x: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + spread * z
                })
                .collect();
            let id = (c * per_class + j) as u64;
            if j < n_train {
                train_rows.push((id, c, x));
            } else {
                test_rows.push((id, c, x));
            }
        }
    }
    train_rows.shuffle(&mut rng);
    test_rows.shuffle(&mut rng);

    let build = |rows: Vec<(u64, usize, Vec<f64>)>| {
        let n = rows.len();
        let mut ids = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * dim);
        for (id, c, x) in rows {
            ids.push(id);
            labels.push(c);
            values.extend(x);
        }
        let features = Array2::from_shape_vec((n, dim), values).expect("row-major buffer");
        FeatureDataset::new(ids, features, labels, num_classes)
    };
    Ok((build(train_rows)?, build(test_rows)?))
}

/// Dirichlet concentration, or the `uniform` sentinel for alpha = infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Alpha {
    Dirichlet(f64),
    Uniform,
}

impl FromStr for Alpha {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" | "inf" | "infinity" => Ok(Alpha::Uniform),
            other => {
                let a: f64 = other
                    .parse()
                    .map_err(|_| Error::invalid(format!("invalid alpha {s:?}")))?;
                if a.is_infinite() && a > 0.0 {
                    Ok(Alpha::Uniform)
                } else if a > 0.0 {
                    Ok(Alpha::Dirichlet(a))
                } else {
                    Err(Error::invalid(format!("alpha must be positive, got {s:?}")))
                }
            }
        }
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Dirichlet(a) => write!(f, "{a}"),
            Alpha::Uniform => f.write_str("uniform"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub alpha: Alpha,
    pub num_clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPartition {
    pub client_id: usize,
    /// Sorted dataset row indices.
    pub indices: Vec<usize>,
}

/// Draws `p ~ Dir(alpha * 1)` by normalising independent Gamma(alpha, 1)
/// samples. Returns `None` if every sample underflowed to zero.
fn sample_dirichlet<R: Rng>(alpha: f64, classes: usize, rng: &mut R) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Some(draws.into_iter().map(|g| g / total).collect())
    } else {
        None
    }
}

/// Largest-remainder apportionment of `total` items over `weights`.
/// Remainder ties go to the lower class index.
fn largest_remainder(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut counts = Vec::with_capacity(weights.len());
    let mut rems = Vec::with_capacity(weights.len());
    for (c, &w) in weights.iter().enumerate() {
        let num = total * w;
        counts.push(num / sum);
        rems.push((num % sum, c));
    }
    let assigned: usize = counts.iter().sum();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in rems.iter().take(total - assigned) {
        counts[c] += 1;
    }
    counts
}

/// Splits the dataset's rows across `spec.num_clients` clients.
///
/// Client `k` receives `floor(N/K)` rows, plus one for the first `N mod K`
/// clients. Under a Dirichlet alpha each client draws class proportions
/// `p_k ~ Dir(alpha)` and fills its quota one row at a time by sampling a
/// class from `p_k` restricted to classes whose pool is not yet exhausted.
/// If `p_k` puts no mass on any remaining class the draw falls back to the
/// remaining pool sizes. Under `Alpha::Uniform` each client takes the
/// largest-remainder rounding of its quota over the remaining class
/// proportions, which for the first client equals the global proportions.
pub fn dirichlet_partition(
    dataset: &FeatureDataset,
    spec: &PartitionSpec,
) -> Result<Vec<ClientPartition>> {
    let n = dataset.len();
    let k = spec.num_clients;
    if k == 0 {
        return Err(Error::invalid("num_clients must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!(
            "cannot split {n} rows across {k} clients"
        )));
    }
    if let Alpha::Dirichlet(a) = spec.alpha {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {a}")));
        }
    }

    let classes = dataset.num_classes;
    let mut rng = seed::rng(seed::derive(spec.seed, 0, 0, seed::Purpose::Partition));
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let mut partitions = Vec::with_capacity(k);
    for client in 0..k {
        let quota = n / k + usize::from(client < n % k);
        let mut indices = Vec::with_capacity(quota);
        match spec.alpha {
            Alpha::Uniform => {
                let remaining: Vec<usize> = pools.iter().map(Vec::len).collect();
                let counts = largest_remainder(quota, &remaining);
                for (c, &take) in counts.iter().enumerate() {
                    let at = pools[c].len() - take;
                    indices.extend(pools[c].drain(at..));
                }
            }
            Alpha::Dirichlet(alpha) => {
                let proportions = sample_dirichlet(alpha, classes, &mut rng)
                    .unwrap_or_else(|| vec![1.0 / classes as f64; classes]);
                for _ in 0..quota {
                    let c = draw_class(&proportions, &pools, &mut rng);
                    indices.push(pools[c].pop().expect("class drawn from a non-empty pool"));
                }
            }
        }
        indices.sort_unstable();
        partitions.push(ClientPartition {
            client_id: client,
            indices,
        });
    }
    Ok(partitions)
}

fn draw_class<R: Rng>(proportions: &[f64], pools: &[Vec<usize>], rng: &mut R) -> usize {
    let mass: f64 = proportions
        .iter()
        .zip(pools)
        .filter(|(_, pool)| !pool.is_empty())
        .map(|(p, _)| p)
        .sum();
    if mass > 0.0 {
        let mut u = rng.random::<f64>() * mass;
        let mut last = None;
        for (c, (p, pool)) in proportions.iter().zip(pools).enumerate() {
            if pool.is_empty() || *p <= 0.0 {
                continue;
            }
            last = Some(c);
            if u < *p {
                return c;
            }
            u -= p;
        }
        if let Some(c) = last {
            return c;
        }
    }
    let total: usize = pools.iter().map(Vec::len).sum();
    let mut u = rng.random_range(0..total);
    for (c, pool) in pools.iter().enumerate() {
        if u < pool.len() {
            return c;
        }
        u -= pool.len();
    }
    unreachable!("total pool size covers the draw")
}

/// Per-client class counts, `[client][class]`.
pub fn partition_class_counts(
    dataset: &FeatureDataset,
    partitions: &[ClientPartition],
) -> Vec<Vec<usize>> {
    partitions
        .iter()
        .map(|p| {
            let mut counts = vec![0; dataset.num_classes];
            for &i in &p.indices {
                counts[dataset.labels[i]] += 1;
            }
            counts
        })
        .collect()
}

/// Mean over clients of the largest single-class share within the client.
pub fn mean_max_class_share(dataset: &FeatureDataset, partitions: &[ClientPartition]) -> f64 {
    let counts = partition_class_counts(dataset, partitions);
    let shares: Vec<f64> = counts
        .iter()
        .filter(|c| c.iter().sum::<usize>() > 0)
        .map(|c| *c.iter().max().unwrap() as f64 / c.iter().sum::<usize>() as f64)
        .collect();
    shares.iter().sum::<f64>() / shares.len() as f64
}

/// Writes `client_id,row_index` rows, clients in id order.
pub fn save_partitions(partitions: &[ClientPartition], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "client_id,row_index")?;
        for p in partitions {
            for &i in &p.indices {
                writeln!(w, "{},{}", p.client_id, i)?;
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads a partition file and checks that it is a disjoint cover of
/// `0..num_rows` with contiguous client ids.
pub fn load_partitions(path: impl AsRef<Path>, num_rows: usize) -> Result<Vec<ClientPartition>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().from_reader(file);
    {
        let header = reader
            .headers()
            .map_err(|e| parse_err(path, 1, e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != ["client_id", "row_index"] {
            return Err(parse_err(path, 1, "header must be client_id,row_index"));
        }
    }
    let mut by_client: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    let mut owner = vec![None; num_rows];
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let client: usize = record[0]
            .parse()
            .map_err(|_| parse_err(path, line, "non-numeric client_id"))?;
        let row: usize = record[1]
            .parse()
            .map_err(|_| parse_err(path, line, "non-numeric row_index"))?;
        if row >= num_rows {
            return Err(parse_err(path, line, format!("row {row} out of range")));
        }
        if owner[row].replace(client).is_some() {
            return Err(parse_err(path, line, format!("row {row} assigned twice")));
        }
        by_client.entry(client).or_default().push(row);
    }
    if let Some(row) = owner.iter().position(Option::is_none) {
        return Err(parse_err(path, 0, format!("row {row} not assigned")));
    }
    let partitions: Vec<ClientPartition> = by_client
        .into_iter()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            ClientPartition { client_id, indices }
        })
        .collect();
    if partitions.iter().enumerate().any(|(k, p)| p.client_id != k) {
        return Err(parse_err(path, 0, "client ids must be 0..K"));
    }
    Ok(partitions)
}
