//! Distance kernels, nearest neighbours, typicality and k-means.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed;

/// Mean K-NN distances below this are treated as zero by [`typicality`].
pub const TYPICALITY_EPS: f64 = 1e-12;

/// Neighbourhood size used by typicality unless configured otherwise.
pub const DEFAULT_TYPICALITY_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[inline]
pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_finite(points: ArrayView2<f64>) -> Result<()> {
    if points.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("non-finite coordinate"))
    }
}

/// Full matrix of squared Euclidean distances. Each pair is computed once and
/// mirrored, so the result is exactly symmetric.
pub fn pairwise_sq_dist(points: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_finite(points)?;
    let n = points.nrows();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| sq_dist(points.row(i), points.row(j)).max(0.0))
                .collect()
        })
        .collect();
    let mut out = Array2::zeros((n, n));
    for (i, row) in upper.into_iter().enumerate() {
        for (off, d) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    Ok(out)
}

/// `(distance, index)` pairs of the `k` nearest other points, ascending.
fn nearest(points: ArrayView2<f64>, i: usize, k: usize) -> Vec<(f64, usize)> {
    let target = points.row(i);
    let mut all: Vec<(f64, usize)> = points
        .outer_iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, row)| (sq_dist(target, row), j))
        .collect();
    let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, by_dist);
        all.truncate(k);
    }
    all.sort_unstable_by(by_dist);
    all.into_iter().map(|(d, j)| (d.sqrt(), j)).collect()
}

/// Indices of the `k` nearest neighbours of point `i` (excluding `i`),
/// ordered by distance then index.
pub fn knn(points: ArrayView2<f64>, i: usize, k: usize) -> Result<Vec<usize>> {
    let n = points.nrows();
    if i >= n {
        return Err(Error::invalid(format!(
            "point {i} out of range for {n} points"
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "k must be in 1..={} for {n} points, got {k}",
            n.saturating_sub(1)
        )));
    }
    check_finite(points)?;
    Ok(nearest(points, i, k).into_iter().map(|(_, j)| j).collect())
}

/// Inverse mean distance to the `k` nearest neighbours of every point.
///
/// `k` is capped at `N - 1`. Points whose neighbours all coincide with them get
/// `1 / TYPICALITY_EPS`.
pub fn typicality(points: ArrayView2<f64>, k: usize) -> Result<Vec<f64>> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "typicality needs at least 2 points, got {n}"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("typicality k must be at least 1"));
    }
    check_finite(points)?;
    let k = k.min(n - 1);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mean = nearest(points, i, k).iter().map(|(d, _)| d).sum::<f64>() / k as f64;
            if mean < TYPICALITY_EPS {
                1.0 / TYPICALITY_EPS
            } else {
                1.0 / mean
            }
        })
        .collect())
}

/// The neighbourhood size actually used for a set of `size` points.
pub fn capped_k(k: usize, size: usize) -> usize {
    k.min(size.saturating_sub(1)).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub k: usize,
    pub inertia: f64,
    /// Inertia after each assignment step, starting with the seeding.
    pub inertia_trace: Vec<f64>,
}

impl Clustering {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.k];
        for (i, &c) in self.assignments.iter().enumerate() {
            members[c].push(i);
        }
        members
    }
}

/// k-means++ seeding: first centre uniform, then each next centre drawn with
/// probability proportional to squared distance to the nearest chosen centre.
/// When every remaining point coincides with a centre, the next centre is drawn
/// uniformly from points not yet chosen.
pub fn kmeans_pp_seeds<R: Rng>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.nrows();
    let first = rng.random_range(0..n);
    let weights: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(first)))
        .collect();
    d2_sample(points, k, first, weights, rng)
}

/// Continues D² sampling from a chosen first centre with the given initial
/// weights (squared distances to the first centre, or any positive scores for
/// the first draw).
pub(crate) fn d2_sample<R: Rng>(
    points: ArrayView2<f64>,
    k: usize,
    first: usize,
    mut nearest_sq: Vec<f64>,
    rng: &mut R,
) -> Vec<usize> {
    let n = points.nrows();
    let mut chosen = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    nearest_sq[first] = 0.0;
    while chosen.len() < k {
        let total: f64 = nearest_sq.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest_sq.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if u < w {
                    break;
                }
                u -= w;
            }
            pick.expect("positive total mass")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        for i in 0..n {
            let d = sq_dist(points.row(i), points.row(next));
            if d < nearest_sq[i] {
                nearest_sq[i] = d;
            }
        }
        nearest_sq[next] = 0.0;
    }
    chosen
}

fn assign(points: ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    points
        .outer_iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (c, centre) in centroids.outer_iter().enumerate() {
                let d = sq_dist(p, centre);
                if d < best.0 {
                    best = (d, c);
                }
            }
            (best.1, best.0)
        })
        .unzip()
}

/// Gives each empty cluster the point farthest from its own centroid, taken
/// from a cluster that still has more than one member.
fn repair_empty(
    points: ArrayView2<f64>,
    centroids: &mut Array2<f64>,
    assignments: &mut [usize],
    dists: &mut [f64],
) {
    let k = centroids.nrows();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let victim = (0..assignments.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        let Some(i) = victim else { break };
        sizes[assignments[i]] -= 1;
        sizes[empty] = 1;
        assignments[i] = empty;
        dists[i] = 0.0;
        centroids.row_mut(empty).assign(&points.row(i));
    }
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when the largest centroid move is below `cfg.tol` or after
/// `cfg.max_iters` updates. Assignment ties go to the lower centroid index.
pub fn kmeans(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<Clustering> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k must be in 1..={n}, got {k}")));
    }
    check_finite(points)?;
    let d = points.ncols();
    let mut rng = seed::rng(seed);
    let seeds = kmeans_pp_seeds(points, k, &mut rng);
    let mut centroids = Array2::zeros((k, d));
    for (c, &i) in seeds.iter().enumerate() {
        centroids.row_mut(c).assign(&points.row(i));
    }

    let (mut assignments, mut dists) = assign(points, &centroids);
    repair_empty(points, &mut centroids, &mut assignments, &mut dists);
    let mut trace = vec![dists.iter().sum::<f64>()];

    for _ in 0..cfg.max_iters {
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut sizes = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            sizes[c] += 1;
            let mut row = sums.row_mut(c);
            row += &points.row(i);
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if sizes[c] == 0 {
                continue;
            }
            let mean = sums.row(c).mapv(|v| v / sizes[c] as f64);
            shift = shift.max(sq_dist(mean.view(), centroids.row(c)).sqrt());
            centroids.row_mut(c).assign(&mean);
        }
        let (a, ds) = assign(points, &centroids);
        assignments = a;
        dists = ds;
        repair_empty(points, &mut centroids, &mut assignments, &mut dists);
        trace.push(dists.iter().sum());
        if shift < cfg.tol {
            break;
        }
    }

    let inertia = dists.iter().sum::<f64>().max(0.0);
    Ok(Clustering {
        assignments,
        centroids,
        k,
        inertia,
        inertia_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn line(xs: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).unwrap()
    }

    #[test]
    fn pairwise_three_four_five() {
        let m = pairwise_sq_dist(array![[0.0, 0.0], [3.0, 4.0]].view()).unwrap();
        assert_eq!(m, array![[0.0, 25.0], [25.0, 0.0]]);
        assert!(pairwise_sq_dist(array![[f64::NAN]].view()).is_err());
    }

    #[test]
    fn pairwise_matches_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts = Array2::from_shape_fn((20, 5), |_| rng.random_range(-3.0..3.0));
        let m = pairwise_sq_dist(pts.view()).unwrap();
        assert_eq!(m, m.t());
        for i in 0..20 {
            for j in 0..20 {
                let mut s = 0.0;
                for c in 0..5 {
                    s += (pts[[i, c]] - pts[[j, c]]).powi(2);
                }
                assert!((m[[i, j]] - s).abs() <= 1e-9 * s.max(1e-300));
            }
        }
    }

    #[test]
    fn knn_examples() {
        let pts = line(&[0.0, 1.0, 3.0]);
        assert_eq!(knn(pts.view(), 0, 1).unwrap(), vec![1]);
        assert_eq!(knn(pts.view(), 2, 2).unwrap(), vec![1, 0]);
        let same = Array2::zeros((4, 3));
        assert_eq!(knn(same.view(), 0, 2).unwrap(), vec![1, 2]);
        assert!(knn(pts.view(), 0, 3).is_err());
        assert!(knn(pts.view(), 0, 0).is_err());
    }

    #[test]
    fn typicality_examples() {
        let two = line(&[0.0, 2.0]);
        assert_eq!(typicality(two.view(), 1).unwrap(), vec![0.5, 0.5]);

        let t = typicality(line(&[0.0, 1.0, 3.0]).view(), 2).unwrap();
        assert!((t[0] - 0.5).abs() < 1e-15);
        assert!((t[1] - 1.0 / 1.5).abs() < 1e-15);
        assert!((t[2] - 0.4).abs() < 1e-15);

        let same = Array2::zeros((3, 2));
        assert_eq!(typicality(same.view(), 2).unwrap(), vec![1e12; 3]);

        assert!(typicality(line(&[1.0]).view(), 1).is_err());
    }

    #[test]
    fn kmeans_degenerate_k_equals_n() {
        let pts = line(&[0.0, 5.0, 1.0, 7.5]);
        let c = kmeans(pts.view(), 4, 3, &KMeansConfig::default()).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut a = c.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_two_pairs() {
        // Oracle: enumerate every 2-partition of the four points.
        let xs = [0.0, 0.1, 10.0, 10.1];
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << 4) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let g: Vec<f64> = (0..4)
                    .filter(|&i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| xs[i])
                    .collect();
                let m = g.iter().sum::<f64>() / g.len() as f64;
                cost += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
            }
            best = best.min(cost);
        }
        assert!((best - 0.01).abs() < 1e-12);
        for seed in 0..20 {
            let c = kmeans(line(&xs).view(), 2, seed, &KMeansConfig::default()).unwrap();
            assert_eq!(c.assignments[0], c.assignments[1]);
            assert_eq!(c.assignments[2], c.assignments[3]);
            assert_ne!(c.assignments[0], c.assignments[2]);
            assert!((c.inertia - best).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = array![[1.0, 2.0], [3.0, -2.0], [5.0, 3.0]];
        let c = kmeans(pts.view(), 1, 0, &KMeansConfig::default()).unwrap();
        assert!((c.centroids[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((c.centroids[[0, 1]] - 1.0).abs() < 1e-12);
        assert!(kmeans(pts.view(), 4, 0, &KMeansConfig::default()).is_err());
        assert!(kmeans(pts.view(), 0, 0, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn kmeans_repairs_duplicates() {
        let pts = array![[0.0], [0.0], [0.0], [1.0]];
        let c = kmeans(pts.view(), 3, 1, &KMeansConfig::default()).unwrap();
        assert!(c.members().iter().all(|m| !m.is_empty()));
    }

    fn points_strategy() -> impl Strategy<Value = Array2<f64>> {
        (3usize..30, 1usize..5).prop_flat_map(|(n, d)| {
            proptest::collection::vec(-10.0f64..10.0, n * d)
                .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn inertia_never_increases(pts in points_strategy(), k in 1usize..4, seed in any::<u64>()) {
            let k = k.min(pts.nrows());
            let c = kmeans(pts.view(), k, seed, &KMeansConfig::default()).unwrap();
            for w in c.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            prop_assert!(c.assignments.iter().all(|&a| a < k));
            prop_assert!(c.inertia >= 0.0);
        }

        #[test]
        fn typicality_scales_inversely(pts in points_strategy(), s in 0.1f64..10.0, k in 1usize..6) {
            let base = typicality(pts.view(), k).unwrap();
            let scaled = typicality((&pts * s).view(), k).unwrap();
            for (b, t) in base.iter().zip(&scaled) {
                if *b < 1e11 && *t < 1e11 {
                    prop_assert!((t * s - b).abs() <= 1e-9 * b);
                }
            }
        }

        #[test]
        fn typicality_translation_invariant(pts in points_strategy(), shift in -5.0f64..5.0) {
            let base = typicality(pts.view(), 3).unwrap();
            let moved = typicality((&pts + shift).view(), 3).unwrap();
            for (a, b) in base.iter().zip(&moved) {
                if *a < 1e6 {
                    prop_assert!((a - b).abs() <= 1e-6 * a);
                }
            }
        }
    }

    #[test]
    fn typicality_rotation_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pts = Array2::from_shape_fn((40, 2), |_| rng.random_range(-1.0..1.0));
        let (s, c) = 0.7f64.sin_cos();
        let rot = array![[c, -s], [s, c]];
        let turned = pts.dot(&rot);
        let a = typicality(pts.view(), 5).unwrap();
        let b = typicality(turned.view(), 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * x);
        }
    }
}
