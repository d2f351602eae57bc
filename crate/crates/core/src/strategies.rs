//! Acquisition strategies.
//!
//! Every strategy maps a [`QueryContext`] to exactly `budget` distinct
//! positions drawn from the context's unlabelled set. Positions index the rows
//! of the context's feature matrices; callers map them back to dataset rows.
//! Since client rows are kept in dataset order, "lowest position" and "lowest
//! dataset index" agree, and every tie in this module breaks that way.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, KMeansConfig};
use crate::model::{self, ModelParams};
use crate::seed;

/// Probability floor used in the KAFAL disagreement score.
pub const KL_FLOOR: f64 = 1e-12;

/// Gradient embeddings whose squared norms all fall below this are treated as
/// zero by BADGE.
pub const BADGE_ZERO_NORM: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Random,
    Entropy,
    Margin,
    Coreset,
    Badge,
    Kafal,
    Logo,
    Typiclust,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Random,
        Strategy::Entropy,
        Strategy::Margin,
        Strategy::Coreset,
        Strategy::Badge,
        Strategy::Kafal,
        Strategy::Logo,
        Strategy::Typiclust,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Margin => "margin",
            Strategy::Coreset => "coreset",
            Strategy::Badge => "badge",
            Strategy::Kafal => "kafal",
            Strategy::Logo => "logo",
            Strategy::Typiclust => "typiclust",
        }
    }

    /// Whether the strategy consults a local-only model regardless of the
    /// selector setting.
    pub fn needs_local_only(self) -> bool {
        matches!(self, Strategy::Kafal | Strategy::Logo)
    }

    pub fn query(self, ctx: &QueryContext<'_>) -> Result<Selection> {
        ctx.validate()?;
        let plain = |indices: Result<Vec<usize>>| {
            indices.map(|indices| Selection {
                indices,
                fallback: false,
            })
        };
        match self {
            Strategy::Random => plain(Ok(random_query(ctx))),
            Strategy::Entropy => plain(entropy_query(ctx)),
            Strategy::Margin => plain(margin_query(ctx)),
            Strategy::Coreset => plain(coreset_query(ctx)),
            Strategy::Badge => badge_query(ctx),
            Strategy::Kafal => plain(kafal_query(ctx)),
            Strategy::Logo => plain(logo_query(ctx)),
            Strategy::Typiclust => plain(typiclust_query(ctx)),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which model a model-dependent strategy evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selector {
    #[default]
    Global,
    LocalOnly,
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "global" => Ok(Selector::Global),
            "local_only" | "local-only" => Ok(Selector::LocalOnly),
            other => Err(Error::invalid(format!(
                "unknown selector {other:?} (expected global or local_only)"
            ))),
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selector::Global => "global",
            Selector::LocalOnly => "local_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryConfig {
    pub typicality_k: usize,
    pub kmeans: KMeansConfig,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            typicality_k: geometry::DEFAULT_TYPICALITY_K,
            kmeans: KMeansConfig::default(),
        }
    }
}

/// Everything a strategy may consult for one client's query.
#[derive(Debug, Clone)]
pub struct QueryContext<'a> {
    /// Model inputs for the client's rows.
    pub features: ArrayView2<'a, f64>,
    /// Feature space clustered by TypiClust; usually the same as `features`.
    pub selection_features: ArrayView2<'a, f64>,
    /// Sorted labelled positions.
    pub labeled: &'a [usize],
    /// Sorted unlabelled positions.
    pub unlabeled: &'a [usize],
    pub budget: usize,
    pub global_params: &'a ModelParams,
    pub local_only_params: Option<&'a ModelParams>,
    pub selector: Selector,
    /// Model scoring uncertainty in LoGo's micro step.
    pub logo_micro: Selector,
    pub geometry: GeometryConfig,
    pub seed: u64,
}

impl QueryContext<'_> {
    fn validate(&self) -> Result<()> {
        if self.budget > self.unlabeled.len() {
            return Err(Error::invalid(format!(
                "budget {} exceeds {} unlabeled points",
                self.budget,
                self.unlabeled.len()
            )));
        }
        if self.selection_features.nrows() != self.features.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.features.nrows(),
                actual: self.selection_features.nrows(),
            });
        }
        if self.selector == Selector::LocalOnly && self.local_only_params.is_none() {
            return Err(Error::invalid(
                "selector local_only requires a local-only model",
            ));
        }
        Ok(())
    }

    fn model(&self, which: Selector) -> Result<&ModelParams> {
        match which {
            Selector::Global => Ok(self.global_params),
            Selector::LocalOnly => self
                .local_only_params
                .ok_or_else(|| Error::invalid("missing local-only model")),
        }
    }

    fn selector_model(&self) -> Result<&ModelParams> {
        self.model(self.selector)
    }

    fn unlabeled_rows(&self, m: ArrayView2<f64>) -> Array2<f64> {
        m.select(Axis(0), self.unlabeled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Sorted positions.
    pub indices: Vec<usize>,
    /// Set when a strategy had to fall back to random selection.
    pub fallback: bool,
}

/// Positions of the `b` highest scores among `candidates`, ties broken by
/// lower position. Returned sorted.
fn top_b(candidates: &[usize], scores: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &c| desc_then_index(scores[a], candidates[a], scores[c], candidates[c]));
    let mut out: Vec<usize> = order.into_iter().take(b).map(|i| candidates[i]).collect();
    out.sort_unstable();
    out
}

fn desc_then_index(sa: f64, ia: usize, sb: f64, ib: usize) -> Ordering {
    sb.total_cmp(&sa).then(ia.cmp(&ib))
}

pub fn random_query(ctx: &QueryContext<'_>) -> Vec<usize> {
    let mut rng = seed::rng(ctx.seed);
    let mut out: Vec<usize> = rand::seq::index::sample(&mut rng, ctx.unlabeled.len(), ctx.budget)
        .into_iter()
        .map(|i| ctx.unlabeled[i])
        .collect();
    out.sort_unstable();
    out
}

pub fn entropy(p: ArrayView1<f64>) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Top-1 minus top-2 probability.
pub fn margin(p: ArrayView1<f64>) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    if second == f64::NEG_INFINITY {
        first
    } else {
        first - second
    }
}

/// Highest Shannon entropy of the selector model's predictions.
pub fn entropy_query(ctx: &QueryContext<'_>) -> Result<Vec<usize>> {
    let proba = model::predict_proba(
        ctx.selector_model()?,
        ctx.unlabeled_rows(ctx.features).view(),
    )?;
    let scores: Vec<f64> = proba.outer_iter().map(entropy).collect();
    Ok(top_b(ctx.unlabeled, &scores, ctx.budget))
}

fn margin_scores(params: &ModelParams, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(model::predict_proba(params, x)?
        .outer_iter()
        .map(|p| -margin(p))
        .collect())
}

/// Smallest top-1/top-2 margin of the selector model's predictions.
pub fn margin_query(ctx: &QueryContext<'_>) -> Result<Vec<usize>> {
    let scores = margin_scores(
        ctx.selector_model()?,
        ctx.unlabeled_rows(ctx.features).view(),
    )?;
    Ok(top_b(ctx.unlabeled, &scores, ctx.budget))
}

/// Greedy k-center over the penultimate embedding of the selector model.
pub fn coreset_query(ctx: &QueryContext<'_>) -> Result<Vec<usize>> {
    let emb = model::penultimate_embedding(ctx.selector_model()?, ctx.features)?;
    Ok(k_center_greedy(
        emb.view(),
        ctx.labeled,
        ctx.unlabeled,
        ctx.budget,
    ))
}

/// Repeatedly picks the candidate farthest from every labelled or already
/// picked point. With no labelled points, the first pick is the lower index of
/// the farthest candidate pair.
pub fn k_center_greedy(
    emb: ArrayView2<f64>,
    labeled: &[usize],
    candidates: &[usize],
    b: usize,
) -> Vec<usize> {
    let mut picked = Vec::with_capacity(b);
    if b == 0 {
        return picked;
    }
    let mut nearest = vec![f64::INFINITY; candidates.len()];
    let mut taken = vec![false; candidates.len()];
    let absorb = |centre: usize, nearest: &mut [f64]| {
        for (slot, &c) in nearest.iter_mut().zip(candidates) {
            let d = geometry::sq_dist(emb.row(c), emb.row(centre));
            if d < *slot {
                *slot = d;
            }
        }
    };
    for &l in labeled {
        absorb(l, &mut nearest);
    }

    if labeled.is_empty() {
        let mut best = (f64::NEG_INFINITY, 0);
        for a in 0..candidates.len() {
            for c in a + 1..candidates.len() {
                let d = geometry::sq_dist(emb.row(candidates[a]), emb.row(candidates[c]));
                if d > best.0 {
                    best = (d, a);
                }
            }
        }
        let first = if best.0.is_finite() { best.1 } else { 0 };
        taken[first] = true;
        picked.push(candidates[first]);
        absorb(candidates[first], &mut nearest);
    }

    while picked.len() < b {
        let mut best: Option<usize> = None;
        for i in 0..candidates.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|j| nearest[i] > nearest[j]) {
                best = Some(i);
            }
        }
        let i = best.expect("budget bounded by candidate count");
        taken[i] = true;
        picked.push(candidates[i]);
        absorb(candidates[i], &mut nearest);
    }
    picked.sort_unstable();
    picked
}

/// k-means++ seeding in gradient-embedding space. The first centre is drawn
/// proportionally to squared embedding norm.
pub fn badge_query(ctx: &QueryContext<'_>) -> Result<Selection> {
    let emb = model::gradient_embedding(
        ctx.selector_model()?,
        ctx.unlabeled_rows(ctx.features).view(),
    )?;
    let norms: Vec<f64> = emb
        .outer_iter()
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect();
    if ctx.budget == 0 {
        return Ok(Selection {
            indices: Vec::new(),
            fallback: false,
        });
    }
    if norms.iter().all(|&n| n <= BADGE_ZERO_NORM) {
        log::warn!("badge: all gradient embeddings are zero, falling back to random selection");
        return Ok(Selection {
            indices: random_query(ctx),
            fallback: true,
        });
    }
    let mut rng = seed::rng(ctx.seed);
    let total: f64 = norms.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut first = 0;
    for (i, &w) in norms.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        first = i;
        if u < w {
            break;
        }
        u -= w;
    }
    let weights: Vec<f64> = (0..emb.nrows())
        .map(|i| geometry::sq_dist(emb.row(i), emb.row(first)))
        .collect();
    let chosen = geometry::d2_sample(emb.view(), ctx.budget, first, weights, &mut rng);
    let mut indices: Vec<usize> = chosen.into_iter().map(|i| ctx.unlabeled[i]).collect();
    indices.sort_unstable();
    Ok(Selection {
        indices,
        fallback: false,
    })
}

/// `KL(p || q) + KL(q || p)` with both distributions floored at [`KL_FLOOR`].
pub fn symmetric_kl(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(KL_FLOOR), b.max(KL_FLOOR));
            a * (a / b).ln() + b * (b / a).ln()
        })
        .sum()
}

/// Largest disagreement between the global and local-only predictions.
pub fn kafal_query(ctx: &QueryContext<'_>) -> Result<Vec<usize>> {
    let local = ctx
        .local_only_params
        .ok_or_else(|| Error::invalid("kafal requires a local-only model"))?;
    let x = ctx.unlabeled_rows(ctx.features);
    let pg = model::predict_proba(ctx.global_params, x.view())?;
    let pl = model::predict_proba(local, x.view())?;
    let scores: Vec<f64> = pg
        .outer_iter()
        .zip(pl.outer_iter())
        .map(|(a, b)| symmetric_kl(a, b))
        .collect();
    Ok(top_b(ctx.unlabeled, &scores, ctx.budget))
}

/// Macro step: k-means with `k = budget` on local-only gradient embeddings.
/// Micro step: the smallest-margin member of each cluster.
pub fn logo_query(ctx: &QueryContext<'_>) -> Result<Vec<usize>> {
    let local = ctx
        .local_only_params
        .ok_or_else(|| Error::invalid("logo requires a local-only model"))?;
    let b = ctx.budget;
    if b == 0 {
        return Ok(Vec::new());
    }
    let x = ctx.unlabeled_rows(ctx.features);
    let emb = model::gradient_embedding(local, x.view())?;
    let clustering = geometry::kmeans(emb.view(), b, ctx.seed, &ctx.geometry.kmeans)?;
    let scores = margin_scores(ctx.model(ctx.logo_micro)?, x.view())?;

    let mut picked = vec![false; ctx.unlabeled.len()];
    let mut out = Vec::with_capacity(b);
    let mut empty = 0;
    for members in clustering.members() {
        let best = members
            .iter()
            .copied()
            .min_by(|&a, &c| desc_then_index(scores[a], a, scores[c], c));
        match best {
            Some(i) => {
                picked[i] = true;
                out.push(i);
            }
            None => empty += 1,
        }
    }
    if empty > 0 {
        let rest: Vec<usize> = (0..ctx.unlabeled.len()).filter(|&i| !picked[i]).collect();
        let rest_scores: Vec<f64> = rest.iter().map(|&i| scores[i]).collect();
        out.extend(top_b(&rest, &rest_scores, empty));
    }
    let mut indices: Vec<usize> = out.into_iter().map(|i| ctx.unlabeled[i]).collect();
    indices.sort_unstable();
    Ok(indices)
}

/// Position of the most typical candidate of `cluster` (sorted positions),
/// with typicality computed among all cluster members.
fn most_typical(
    feats: ArrayView2<f64>,
    cluster: &[usize],
    eligible: impl Fn(usize) -> bool,
    k: usize,
) -> Result<Option<usize>> {
    let candidates: Vec<usize> = (0..cluster.len())
        .filter(|&i| eligible(cluster[i]))
        .collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    if cluster.len() == 1 {
        return Ok(Some(cluster[0]));
    }
    let pts = feats.select(Axis(0), cluster);
    let typ = geometry::typicality(pts.view(), geometry::capped_k(k, cluster.len()))?;
    let best = candidates
        .into_iter()
        .min_by(|&a, &c| desc_then_index(typ[a], cluster[a], typ[c], cluster[c]))
        .expect("non-empty candidates");
    Ok(Some(cluster[best]))
}

/// Clusters every client point into `|L| + b` groups and takes the most
/// typical point of each of the `b` largest clusters without a labelled
/// member. A shortfall of uncovered clusters is filled round-robin from the
/// remaining clusters, largest first, one most-typical unpicked point each.
pub fn typiclust_query(ctx: &QueryContext<'_>) -> Result<Vec<usize>> {
    let b = ctx.budget;
    if b == 0 {
        return Ok(Vec::new());
    }
    let feats = ctx.selection_features;
    let n = feats.nrows();
    let k = (ctx.labeled.len() + b).min(n);
    let clustering = geometry::kmeans(feats, k, ctx.seed, &ctx.geometry.kmeans)?;

    let mut is_labeled = vec![false; n];
    for &l in ctx.labeled {
        is_labeled[l] = true;
    }
    let mut is_unlabeled = vec![false; n];
    for &u in ctx.unlabeled {
        is_unlabeled[u] = true;
    }

    let mut clusters: Vec<Vec<usize>> = clustering
        .members()
        .into_iter()
        .filter(|m| !m.is_empty())
        .collect();
    // Largest first, ties by smallest member.
    clusters.sort_by(|a, c| c.len().cmp(&a.len()).then(a[0].cmp(&c[0])));
    let (uncovered, covered): (Vec<_>, Vec<_>) = clusters
        .into_iter()
        .partition(|m| m.iter().all(|&i| !is_labeled[i]));

    let tk = ctx.geometry.typicality_k;
    let mut picked = vec![false; n];
    let mut out = Vec::with_capacity(b);
    for cluster in uncovered.iter().take(b) {
        if let Some(i) = most_typical(feats, cluster, |i| is_unlabeled[i], tk)? {
            picked[i] = true;
            out.push(i);
        }
    }

    if out.len() < b {
        let fill_order: Vec<&Vec<usize>> = covered.iter().chain(uncovered.iter()).collect();
        while out.len() < b {
            let before = out.len();
            for cluster in &fill_order {
                if out.len() == b {
                    break;
                }
                if let Some(i) =
                    most_typical(feats, cluster, |i| is_unlabeled[i] && !picked[i], tk)?
                {
                    picked[i] = true;
                    out.push(i);
                }
            }
            if out.len() == before {
                return Err(Error::Invariant(
                    "typiclust ran out of unlabeled points".into(),
                ));
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}
