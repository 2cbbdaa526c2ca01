//! Training losses with analytic gradients w.r.t. the raw (unnormalized)
//! batch representations.
//!
//! Losses that act on the hypersphere normalize rows internally and chain
//! the gradient through `x ↦ x / ||x||`, whose Jacobian is
//! `(I − x̃x̃ᵀ) / ||x||`.

use rand::Rng;

use crate::dataset::DatasetSplit;
use crate::encoder::{normalize_with_norms, EmbeddingTable};
use crate::error::{Error, Result};
use crate::matrix::{dot, sq_dist, Matrix};

/// Exponent scale of the Gaussian potential `exp(−t·||x − y||²)`.
pub const UNIFORMITY_T: f64 = 2.0;

/// Loss value and one gradient per input matrix, in argument order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Matrix>,
    /// Component values when the loss is a combination of align/uniformity.
    pub terms: Option<AuTerms>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuTerms {
    pub align: f64,
    pub uniform_user: f64,
    pub uniform_item: f64,
}

/// How a user/item pair is scored inside BPR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Score {
    #[default]
    Dot,
    Cosine,
}

fn check_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols())));
    }
    Ok(())
}

/// Maps a gradient w.r.t. normalized rows back to the raw rows.
fn unnormalize_grad(unit: &Matrix, norms: &[f64], grad_unit: &Matrix) -> Matrix {
    let mut out = grad_unit.clone();
    for (r, &n) in norms.iter().enumerate() {
        let x = unit.row(r);
        let radial = dot(x, grad_unit.row(r));
        for (g, xi) in out.row_mut(r).iter_mut().zip(x) {
            *g = (*g - radial * xi) / n;
        }
    }
    out
}

/// Mean squared distance between paired normalized rows.
pub fn align_loss(u_reps: &Matrix, i_reps: &Matrix) -> Result<LossOutput> {
    check_same_shape(u_reps, i_reps)?;
    let n = u_reps.rows();
    if n == 0 {
        return Err(Error::InsufficientBatch { n });
    }
    let (u, u_norms) = normalize_with_norms(u_reps)?;
    let (i, i_norms) = normalize_with_norms(i_reps)?;
    let mut value = 0.0;
    let mut gu = Matrix::zeros(n, u.cols());
    let scale = 2.0 / n as f64;
    for k in 0..n {
        value += sq_dist(u.row(k), i.row(k));
        for ((g, a), b) in gu.row_mut(k).iter_mut().zip(u.row(k)).zip(i.row(k)) {
            *g = scale * (a - b);
        }
    }
    let mut gi = gu.clone();
    gi.scale(-1.0);
    Ok(LossOutput {
        value: value / n as f64,
        grads: vec![unnormalize_grad(&u, &u_norms, &gu), unnormalize_grad(&i, &i_norms, &gi)],
        terms: None,
    })
}

/// Log of the mean Gaussian potential over unordered distinct row pairs,
/// and its gradient w.r.t. the normalized rows.
fn uniform_on_sphere(x: &Matrix) -> (f64, Matrix) {
    let n = x.rows();
    let pairs = n * (n - 1) / 2;
    let mut expo = Vec::with_capacity(pairs);
    for j in 0..n {
        for k in j + 1..n {
            expo.push(-UNIFORMITY_T * sq_dist(x.row(j), x.row(k)));
        }
    }
    let max = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = expo.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let value = max + total.ln() - (pairs as f64).ln();

    // d/dx̃_j = −2t · Σ_k w_jk (x̃_j − x̃_k), w = softmax over pairs
    let mut grad = Matrix::zeros(n, x.cols());
    let mut idx = 0;
    for j in 0..n {
        for k in j + 1..n {
            let c = -2.0 * UNIFORMITY_T * weights[idx] / total;
            idx += 1;
            for t in 0..x.cols() {
                let diff = x.row(j)[t] - x.row(k)[t];
                grad.row_mut(j)[t] += c * diff;
                grad.row_mut(k)[t] -= c * diff;
            }
        }
    }
    (value, grad)
}

/// In-batch uniformity: `log mean_{j<k} exp(−2·||x̃_j − x̃_k||²)`.
pub fn uniform_loss(reps: &Matrix) -> Result<LossOutput> {
    if reps.rows() < 2 {
        return Err(Error::InsufficientBatch { n: reps.rows() });
    }
    let (x, norms) = normalize_with_norms(reps)?;
    let (value, grad) = uniform_on_sphere(&x);
    Ok(LossOutput { value, grads: vec![unnormalize_grad(&x, &norms, &grad)], terms: None })
}

/// `align + γ·(uniform(users) + uniform(items)) / 2`.
pub fn direct_au_loss(u_reps: &Matrix, i_reps: &Matrix, gamma: f64) -> Result<LossOutput> {
    let align = align_loss(u_reps, i_reps)?;
    let uni_u = uniform_loss(u_reps)?;
    let uni_i = uniform_loss(i_reps)?;
    let half_gamma = gamma / 2.0;
    let mut grads = align.grads;
    for (g, uni) in grads.iter_mut().zip([&uni_u, &uni_i]) {
        for (a, b) in g.as_mut_slice().iter_mut().zip(uni.grads[0].as_slice()) {
            *a += half_gamma * b;
        }
    }
    Ok(LossOutput {
        value: align.value + half_gamma * (uni_u.value + uni_i.value),
        grads,
        terms: Some(AuTerms { align: align.value, uniform_user: uni_u.value, uniform_item: uni_i.value }),
    })
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean of `−ln σ(s(u,i) − s(u,i⁻))` over the batch.
pub fn bpr_loss(u_reps: &Matrix, pos_reps: &Matrix, neg_reps: &Matrix, score: Score) -> Result<LossOutput> {
    check_same_shape(u_reps, pos_reps)?;
    check_same_shape(u_reps, neg_reps)?;
    let n = u_reps.rows();
    if n == 0 {
        return Err(Error::InsufficientBatch { n });
    }
    match score {
        Score::Dot => Ok(bpr_dot(u_reps, pos_reps, neg_reps)),
        Score::Cosine => {
            let (u, un) = normalize_with_norms(u_reps)?;
            let (p, pn) = normalize_with_norms(pos_reps)?;
            let (q, qn) = normalize_with_norms(neg_reps)?;
            let out = bpr_dot(&u, &p, &q);
            let grads = vec![
                unnormalize_grad(&u, &un, &out.grads[0]),
                unnormalize_grad(&p, &pn, &out.grads[1]),
                unnormalize_grad(&q, &qn, &out.grads[2]),
            ];
            Ok(LossOutput { grads, ..out })
        }
    }
}

fn bpr_dot(u: &Matrix, pos: &Matrix, neg: &Matrix) -> LossOutput {
    let n = u.rows();
    let d = u.cols();
    let mut value = 0.0;
    let mut gu = Matrix::zeros(n, d);
    let mut gp = Matrix::zeros(n, d);
    let mut gn = Matrix::zeros(n, d);
    for k in 0..n {
        let delta = dot(u.row(k), pos.row(k)) - dot(u.row(k), neg.row(k));
        value += softplus(-delta);
        let c = -sigmoid(-delta) / n as f64;
        for t in 0..d {
            gu.row_mut(k)[t] = c * (pos.row(k)[t] - neg.row(k)[t]);
            gp.row_mut(k)[t] = c * u.row(k)[t];
            gn.row_mut(k)[t] = -c * u.row(k)[t];
        }
    }
    LossOutput { value: value / n as f64, grads: vec![gu, gp, gn], terms: None }
}

/// Negative-item sampling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeStrategy {
    /// Uniform over items outside the user's training set.
    Uniform,
    /// Draw `candidates` uniform negatives, keep one with probability
    /// given by the softmax of their dot-product scores.
    Dynamic { candidates: usize },
}

/// Default candidate pool size of dynamic sampling.
pub const DEFAULT_DS_CANDIDATES: usize = 32;

fn uniform_negative<R: Rng + ?Sized>(split: &DatasetSplit, user: usize, rng: &mut R) -> Result<usize> {
    let n_items = split.n_items();
    let seen = split.train_items(user);
    if seen.len() >= n_items {
        return Err(Error::NoNegativeAvailable { user });
    }
    if seen.len() * 2 <= n_items {
        loop {
            let item = rng.random_range(0..n_items);
            if seen.binary_search(&(item as u32)).is_err() {
                return Ok(item);
            }
        }
    }
    // Dense users: pick the k-th item of the complement directly.
    let mut item = rng.random_range(0..n_items - seen.len());
    for &s in seen {
        if s as usize <= item {
            item += 1;
        } else {
            break;
        }
    }
    Ok(item)
}

/// One negative item per user.
pub fn sample_negatives<R: Rng + ?Sized>(
    split: &DatasetSplit,
    users: &[usize],
    strategy: NegativeStrategy,
    table: &EmbeddingTable,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(users.len());
    for &user in users {
        if user >= split.n_users() {
            return Err(Error::IdOutOfRange { kind: "user", id: user, bound: split.n_users() });
        }
        let item = match strategy {
            NegativeStrategy::Uniform => uniform_negative(split, user, rng)?,
            NegativeStrategy::Dynamic { candidates } => {
                let pool =
                    (0..candidates.max(1)).map(|_| uniform_negative(split, user, rng)).collect::<Result<Vec<_>>>()?;
                let scores: Vec<f64> = pool.iter().map(|&i| dot(table.users.row(user), table.items.row(i))).collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let mut r = rng.random::<f64>() * weights.iter().sum::<f64>();
                let mut chosen = pool[pool.len() - 1];
                for (&i, &w) in pool.iter().zip(&weights) {
                    if r < w {
                        chosen = i;
                        break;
                    }
                    r -= w;
                }
                chosen
            }
        };
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split, Interaction, InteractionSet, SplitRatios};
    use crate::rng::{substream, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    const EXACT: f64 = 1e-12;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn align_fixed_points() {
        let x = m(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let mut y = x.clone();
        y.scale(4.0);
        assert!(align_loss(&x, &y).unwrap().value.abs() < EXACT);
        assert!((align_loss(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap().value - 2.0).abs() < EXACT);
        assert!((align_loss(&m(&[&[0.0, 2.0]]), &m(&[&[0.0, -5.0]])).unwrap().value - 4.0).abs() < EXACT);
    }

    #[test]
    fn uniform_fixed_points() {
        let same = m(&[&[1.0, 1.0], &[2.0, 2.0], &[0.5, 0.5]]);
        assert!(uniform_loss(&same).unwrap().value.abs() < EXACT);
        let antipodal = m(&[&[0.0, 3.0], &[0.0, -1.0]]);
        assert!((uniform_loss(&antipodal).unwrap().value + 8.0).abs() < EXACT);
        let third = 2.0 * std::f64::consts::PI / 3.0;
        let tri = m(&[&[1.0, 0.0], &[third.cos(), third.sin()], &[(2.0 * third).cos(), (2.0 * third).sin()]]);
        assert!((uniform_loss(&tri).unwrap().value + 6.0).abs() < EXACT);
        assert!(matches!(uniform_loss(&m(&[&[1.0, 0.0]])), Err(Error::InsufficientBatch { n: 1 })));
        assert!(matches!(uniform_loss(&m(&[&[1.0, 0.0], &[0.0, 0.0]])), Err(Error::DegenerateEmbedding { row: 1 })));
    }

    #[test]
    fn direct_au_composition() {
        let u = m(&[&[1.0, 0.2], &[-0.3, 0.9], &[0.4, -1.1]]);
        let i = m(&[&[0.7, 0.7], &[-1.0, 0.1], &[0.2, -0.5]]);
        assert_eq!(direct_au_loss(&u, &i, 0.0).unwrap().value, align_loss(&u, &i).unwrap().value);
        let parts = align_loss(&u, &i).unwrap().value
            + (uniform_loss(&u).unwrap().value + uniform_loss(&i).unwrap().value) / 2.0;
        let out = direct_au_loss(&u, &i, 1.0).unwrap();
        assert!((out.value - parts).abs() < EXACT);
        let terms = out.terms.unwrap();
        assert_eq!(terms.align, align_loss(&u, &i).unwrap().value);

        let same = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(direct_au_loss(&same, &same, 3.0).unwrap().value.abs() < EXACT);
    }

    #[test]
    fn bpr_values() {
        let u = m(&[&[1.0, 0.0]]);
        let tie = bpr_loss(&u, &m(&[&[0.5, 1.0]]), &m(&[&[0.5, -2.0]]), Score::Dot).unwrap();
        assert!((tie.value - std::f64::consts::LN_2).abs() < EXACT);
        let sat = bpr_loss(&u, &m(&[&[20.0, 0.0]]), &m(&[&[0.0, 0.0]]), Score::Dot).unwrap();
        assert!(sat.value < 1e-8 && sat.value > 0.0);
        let half = bpr_loss(&u, &m(&[&[1.0, 0.0]]), &m(&[&[0.5, 0.0]]), Score::Dot).unwrap();
        // −ln σ(0.5) evaluated independently
        let expect = (1.0 + (-0.5f64).exp()).ln();
        assert!((half.value - expect).abs() < EXACT);
        assert!((expect - 0.474077).abs() < 1e-6);
        let far = bpr_loss(&u, &m(&[&[-800.0, 0.0]]), &m(&[&[800.0, 0.0]]), Score::Dot).unwrap();
        assert!((far.value - 1600.0).abs() < 1e-9);
        let cos = bpr_loss(&u, &m(&[&[3.0, 0.0]]), &m(&[&[0.0, 7.0]]), Score::Cosine).unwrap();
        assert!((cos.value - softplus(-1.0)).abs() < EXACT);
    }

    /// Central differences of `f` around `x`, one coordinate at a time.
    fn finite_diff(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for k in 0..x.as_slice().len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_mut_slice()[k] += h;
            minus.as_mut_slice()[k] -= h;
            out.as_mut_slice()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(analytic: &Matrix, numeric: &Matrix) {
        for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            assert!((a - n).abs() / a.abs().max(1.0) <= 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = substream(seed, Stream::Harness, 0);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, (n, d)) in [(2, 2), (3, 4), (8, 16), (3, 2)].into_iter().enumerate() {
            let seed = seed as u64 * 3;
            let u = random_matrix(n, d, seed);
            let i = random_matrix(n, d, seed + 1);
            let q = random_matrix(n, d, seed + 2);

            let out = align_loss(&u, &i).unwrap();
            assert_close(&out.grads[0], &finite_diff(&u, &|x| align_loss(x, &i).unwrap().value));
            assert_close(&out.grads[1], &finite_diff(&i, &|x| align_loss(&u, x).unwrap().value));

            let out = uniform_loss(&u).unwrap();
            assert_close(&out.grads[0], &finite_diff(&u, &|x| uniform_loss(x).unwrap().value));

            let out = direct_au_loss(&u, &i, 0.7).unwrap();
            assert_close(&out.grads[0], &finite_diff(&u, &|x| direct_au_loss(x, &i, 0.7).unwrap().value));
            assert_close(&out.grads[1], &finite_diff(&i, &|x| direct_au_loss(&u, x, 0.7).unwrap().value));

            for score in [Score::Dot, Score::Cosine] {
                let out = bpr_loss(&u, &i, &q, score).unwrap();
                assert_close(&out.grads[0], &finite_diff(&u, &|x| bpr_loss(x, &i, &q, score).unwrap().value));
                assert_close(&out.grads[1], &finite_diff(&i, &|x| bpr_loss(&u, x, &q, score).unwrap().value));
                assert_close(&out.grads[2], &finite_diff(&q, &|x| bpr_loss(&u, &i, x, score).unwrap().value));
            }
        }
    }

    fn tiny_split(n_items: usize, seen: &[u32]) -> DatasetSplit {
        let pairs: Vec<Interaction> = seen.iter().map(|&i| Interaction::new(0, i)).collect();
        let data = InteractionSet::from_pairs(1, n_items, pairs).unwrap();
        split(&data, SplitRatios { train: 1.0, validation: 0.0, test: 0.0 }, 0).unwrap()
    }

    #[test]
    fn forced_negative() {
        let s = tiny_split(6, &[0, 1, 2, 4, 5]);
        let t = crate::encoder::init_xavier(1, 6, 2, 0);
        let mut rng = substream(1, Stream::Negatives, 0);
        for strategy in [NegativeStrategy::Uniform, NegativeStrategy::Dynamic { candidates: 4 }] {
            let neg = sample_negatives(&s, &[0; 50], strategy, &t, &mut rng).unwrap();
            assert!(neg.iter().all(|&i| i == 3));
        }
        let full = tiny_split(3, &[0, 1, 2]);
        let t = crate::encoder::init_xavier(1, 3, 2, 0);
        assert!(matches!(
            sample_negatives(&full, &[0], NegativeStrategy::Uniform, &t, &mut rng),
            Err(Error::NoNegativeAvailable { user: 0 })
        ));
    }

    #[test]
    fn uniform_negatives_avoid_positives_and_cover_complement() {
        for seen in [vec![1u32, 3], vec![0, 1, 2, 3, 5, 6, 8]] {
            let s = tiny_split(10, &seen);
            let t = crate::encoder::init_xavier(1, 10, 2, 0);
            let mut rng = substream(2, Stream::Negatives, 0);
            let neg = sample_negatives(&s, &[0; 2000], NegativeStrategy::Uniform, &t, &mut rng).unwrap();
            let mut hit = [0usize; 10];
            neg.iter().for_each(|&i| hit[i] += 1);
            for item in 0..10u32 {
                if seen.contains(&item) {
                    assert_eq!(hit[item as usize], 0);
                } else {
                    assert!(hit[item as usize] > 2000 / (10 - seen.len()) / 2, "{hit:?}");
                }
            }
            let again = sample_negatives(
                &s,
                &[0; 2000],
                NegativeStrategy::Uniform,
                &t,
                &mut substream(2, Stream::Negatives, 0),
            )
            .unwrap();
            assert_eq!(neg, again);
        }
    }

    #[test]
    fn dynamic_prefers_high_scores() {
        let s = tiny_split(5, &[0]);
        let mut t = EmbeddingTable::new(Matrix::from_rows(&[[1.0, 0.0]]), Matrix::zeros(5, 2)).unwrap();
        t.items.row_mut(4)[0] = 50.0;
        let mut rng = substream(3, Stream::Negatives, 0);
        let neg = sample_negatives(&s, &[0; 1000], NegativeStrategy::Dynamic { candidates: 32 }, &t, &mut rng).unwrap();
        let freq = neg.iter().filter(|&&i| i == 4).count() as f64 / 1000.0;
        // Softmax assigns ~1 to item 4 whenever it is in the pool; it is
        // missing from 32 uniform draws over 4 items with prob (3/4)^32 ≈ 1e-4.
        assert!(freq > 0.99, "freq {freq}");
    }

    proptest! {
        #[test]
        fn bounds_and_invariances(
            seed in 0u64..10_000,
            n in 2usize..7,
            d in 2usize..6,
            scales in prop::collection::vec(0.1f64..10.0, 7),
        ) {
            let u = random_matrix(n, d, seed);
            let i = random_matrix(n, d, seed + 1);
            let q = random_matrix(n, d, seed + 2);
            let a = align_loss(&u, &i).unwrap().value;
            let un = uniform_loss(&u).unwrap().value;
            prop_assert!((0.0..=4.0).contains(&a));
            prop_assert!((-8.0..0.0).contains(&un));
            prop_assert!(bpr_loss(&u, &i, &q, Score::Dot).unwrap().value > 0.0);

            let mut su = u.clone();
            let mut si = i.clone();
            let mut sq = q.clone();
            for r in 0..n {
                su.row_mut(r).iter_mut().for_each(|x| *x *= scales[r]);
                si.row_mut(r).iter_mut().for_each(|x| *x *= scales[(r + 1) % 7]);
                sq.row_mut(r).iter_mut().for_each(|x| *x *= scales[(r + 2) % 7]);
            }
            prop_assert!((align_loss(&su, &si).unwrap().value - a).abs() < 1e-10);
            prop_assert!((uniform_loss(&su).unwrap().value - un).abs() < 1e-10);
            let c0 = bpr_loss(&u, &i, &q, Score::Cosine).unwrap().value;
            prop_assert!((bpr_loss(&su, &si, &sq, Score::Cosine).unwrap().value - c0).abs() < 1e-10);

            // permute pairs jointly
            let perm: Vec<usize> = (0..n).rev().collect();
            let (pu, pi) = (u.gather(&perm), i.gather(&perm));
            let base = direct_au_loss(&u, &i, 1.3).unwrap();
            let permuted = direct_au_loss(&pu, &pi, 1.3).unwrap();
            prop_assert!((base.value - permuted.value).abs() < 1e-12);
            for (g, pg) in base.grads.iter().zip(&permuted.grads) {
                let expect = g.gather(&perm);
                for (x, y) in expect.as_slice().iter().zip(pg.as_slice()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
