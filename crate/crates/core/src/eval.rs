//! Full-ranking top-K metrics and representation geometry.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::{DatasetSplit, InteractionSet, Target};
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::loss::{softplus, UNIFORMITY_T};
use crate::matrix::{dot, norm, sq_dist, Matrix};

/// Recall@K and NDCG@K averaged over evaluated users.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingMetrics {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users_evaluated: usize,
}

/// Ranking order: higher score first, ties by ascending item ID.
fn rank_order(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top-`k` items for `user` by dot product, excluding the user's training items.
pub fn top_k_items(table: &EmbeddingTable, split: &DatasetSplit, user: usize, k: usize) -> Vec<u32> {
    let u = table.users.row(user);
    let mut scored: Vec<(f64, u32)> = (0..table.n_items() as u32)
        .filter(|&i| !split.is_train_pair(user, i))
        .map(|i| (dot(u, table.items.row(i as usize)), i))
        .collect();
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored.into_iter().map(|(_, i)| i).collect()
}

#[inline]
fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Recall and NDCG at every `k` for one ranked list.
pub fn user_metrics(ranked: &[u32], targets: &[u32], ks: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut recall = Vec::with_capacity(ks.len());
    let mut ndcg = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut hits = 0usize;
        let mut dcg = 0.0;
        for (pos, item) in ranked.iter().take(k).enumerate() {
            if targets.contains(item) {
                hits += 1;
                dcg += discount(pos + 1);
            }
        }
        let idcg: f64 = (1..=k.min(targets.len())).map(discount).sum();
        recall.push(hits as f64 / targets.len() as f64);
        ndcg.push(if idcg > 0.0 { dcg / idcg } else { 0.0 });
    }
    (recall, ndcg)
}

/// Ranks all non-training items for every user holding target items.
pub fn rank_eval(table: &EmbeddingTable, split: &DatasetSplit, target: Target, ks: &[usize]) -> Result<RankingMetrics> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("cutoffs must be a non-empty list of positive integers".into()));
    }
    if table.n_users() != split.n_users() || table.n_items() != split.n_items() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings cover {} users / {} items, data has {} / {}",
            table.n_users(),
            table.n_items(),
            split.n_users(),
            split.n_items()
        )));
    }
    let mut targets: Vec<Vec<u32>> = vec![Vec::new(); split.n_users()];
    for p in split.target(target) {
        targets[p.user as usize].push(p.item);
    }
    let k_max = *ks.iter().max().expect("non-empty");
    let per_user: Vec<(Vec<f64>, Vec<f64>)> = targets
        .par_iter()
        .enumerate()
        .filter(|(_, t)| !t.is_empty())
        .map(|(user, t)| user_metrics(&top_k_items(table, split, user, k_max), t, ks))
        .collect();
    if per_user.is_empty() {
        return Err(Error::NothingToEvaluate);
    }
    let n = per_user.len() as f64;
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for (j, &k) in ks.iter().enumerate() {
        recall.insert(k, per_user.iter().map(|(r, _)| r[j]).sum::<f64>() / n);
        ndcg.insert(k, per_user.iter().map(|(_, g)| g[j]).sum::<f64>() / n);
    }
    Ok(RankingMetrics { recall, ndcg, n_users_evaluated: per_user.len() })
}

/// Alignment and uniformity of a whole embedding table over an interaction set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryReport {
    pub l_align: f64,
    pub l_uniform: f64,
    pub l_uniform_user: f64,
    pub l_uniform_item: f64,
}

fn unit_row(m: &Matrix, r: usize) -> Result<Vec<f64>> {
    let n = norm(m.row(r));
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding { row: r });
    }
    Ok(m.row(r).iter().map(|x| x / n).collect())
}

/// Normalizes the rows whose popularity is positive; others stay empty.
fn unit_rows_with_support(m: &Matrix, pop: &[u32]) -> Result<Vec<Vec<f64>>> {
    (0..m.rows()).map(|r| if pop[r] > 0 { unit_row(m, r) } else { Ok(Vec::new()) }).collect()
}

fn check_table(table: &EmbeddingTable, interactions: &InteractionSet) -> Result<()> {
    if table.n_users() != interactions.n_users() || table.n_items() != interactions.n_items() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings cover {} users / {} items, interactions have {} / {}",
            table.n_users(),
            table.n_items(),
            interactions.n_users(),
            interactions.n_items()
        )));
    }
    Ok(())
}

/// Mean squared distance between normalized user and item rows over all
/// interactions.
pub fn measure_alignment(table: &EmbeddingTable, interactions: &InteractionSet) -> Result<f64> {
    check_table(table, interactions)?;
    if interactions.is_empty() {
        return Err(Error::InsufficientData { n: 0 });
    }
    let users = unit_rows_with_support(&table.users, interactions.user_pop())?;
    let items = unit_rows_with_support(&table.items, interactions.item_pop())?;
    let total: f64 =
        interactions.pairs().iter().map(|p| sq_dist(&users[p.user as usize], &items[p.item as usize])).sum();
    Ok(total / interactions.len() as f64)
}

/// Log of the mean potential between the `side` entities of two distinct
/// interactions, evaluated per entity with popularity weights:
/// `Σ_{a≠b} p_a p_b e^{−2||x_a−x_b||²} + Σ_a p_a (p_a − 1)` over `|R|(|R|−1)`.
fn popularity_weighted_uniformity(rows: &[Vec<f64>], pop: &[u32], n_interactions: usize) -> f64 {
    let support: Vec<usize> = (0..pop.len()).filter(|&a| pop[a] > 0).collect();
    let cross: Vec<f64> = support
        .par_iter()
        .enumerate()
        .map(|(j, &a)| {
            let pa = f64::from(pop[a]);
            let mut acc = 0.0;
            for &b in &support[j + 1..] {
                acc += f64::from(pop[b]) * (-UNIFORMITY_T * sq_dist(&rows[a], &rows[b])).exp();
            }
            2.0 * pa * acc + pa * (pa - 1.0)
        })
        .collect();
    let total: f64 = cross.iter().sum();
    let r = n_interactions as f64;
    total.ln() - (r * (r - 1.0)).ln()
}

/// `(user term, item term, their mean)`, exactly equal to averaging over
/// ordered pairs of distinct interactions.
pub fn measure_uniformity(table: &EmbeddingTable, interactions: &InteractionSet) -> Result<(f64, f64, f64)> {
    check_table(table, interactions)?;
    if interactions.len() < 2 {
        return Err(Error::InsufficientData { n: interactions.len() });
    }
    let users = unit_rows_with_support(&table.users, interactions.user_pop())?;
    let items = unit_rows_with_support(&table.items, interactions.item_pop())?;
    let u = popularity_weighted_uniformity(&users, interactions.user_pop(), interactions.len());
    let i = popularity_weighted_uniformity(&items, interactions.item_pop(), interactions.len());
    Ok((u, i, (u + i) / 2.0))
}

pub fn measure_geometry(table: &EmbeddingTable, interactions: &InteractionSet) -> Result<GeometryReport> {
    let l_align = measure_alignment(table, interactions)?;
    let (l_uniform_user, l_uniform_item, l_uniform) = measure_uniformity(table, interactions)?;
    Ok(GeometryReport { l_align, l_uniform, l_uniform_user, l_uniform_item })
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Estimate { mean, std_err: (var / n).sqrt() }
    }
}

/// Measured cosine-BPR loss of a configuration next to the lower bound
/// `−1 + E log(e + e^{xᵀy})`, `x, y` uniform on the sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub measured: Estimate,
    pub bound: Estimate,
}

impl BoundCheck {
    /// Standard error of `measured − bound`.
    pub fn combined_std_err(&self) -> f64 {
        self.measured.std_err.hypot(self.bound.std_err)
    }

    /// Gap in units of the combined standard error.
    pub fn z_score(&self) -> f64 {
        (self.measured.mean - self.bound.mean) / self.combined_std_err()
    }
}

/// `n` points drawn uniformly on the unit sphere in `d` dimensions.
pub fn sample_sphere<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for r in 0..n {
        loop {
            let row = m.row_mut(r);
            row.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            let len = norm(row);
            if len > 1e-12 {
                row.iter_mut().for_each(|x| *x /= len);
                break;
            }
        }
    }
    m
}

/// Cosine-score BPR over positive pairs `(users[k], items[k])`, each with a
/// negative drawn uniformly from the other samples' items.
pub fn cosine_bpr_estimate<R: Rng + ?Sized>(users: &Matrix, items: &Matrix, rng: &mut R) -> Result<Estimate> {
    let n = users.rows();
    if n < 2 || items.rows() != n {
        return Err(Error::InsufficientData { n });
    }
    let mut losses = Vec::with_capacity(n);
    for k in 0..n {
        let u = unit_row(users, k)?;
        let pos = unit_row(items, k)?;
        let mut j = rng.random_range(0..n - 1);
        if j >= k {
            j += 1;
        }
        let neg = unit_row(items, j)?;
        losses.push(softplus(dot(&u, &neg) - dot(&u, &pos)));
    }
    Ok(Estimate::from_samples(&losses))
}

/// Monte-Carlo estimate of `−1 + E log(e + e^{xᵀy})` for independent uniform
/// `x, y` on the sphere.
pub fn sphere_bound_estimate<R: Rng + ?Sized>(d: usize, n_samples: usize, rng: &mut R) -> Estimate {
    let x = sample_sphere(n_samples, d, rng);
    let y = sample_sphere(n_samples, d, rng);
    // −1 + log(e + e^z) = softplus(z − 1)
    let vals: Vec<f64> = (0..n_samples).map(|k| softplus(dot(x.row(k), y.row(k)) - 1.0)).collect();
    Estimate::from_samples(&vals)
}

/// Perfectly aligned (`ĩ = ũ`), near-uniform configuration against the bound.
pub fn bpr_bound_harness<R: Rng + ?Sized>(d: usize, n_samples: usize, rng: &mut R) -> Result<BoundCheck> {
    if d < 2 || n_samples < 2 {
        return Err(Error::InsufficientData { n: n_samples });
    }
    let users = sample_sphere(n_samples, d, rng);
    let measured = cosine_bpr_estimate(&users, &users, rng)?;
    let bound = sphere_bound_estimate(d, n_samples, rng);
    Ok(BoundCheck { measured, bound })
}
