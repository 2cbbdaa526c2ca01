//! User/item encoders: a plain embedding table and linear graph propagation
//! over the normalized user-item adjacency.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::dataset::InteractionSet;
use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};
use crate::rng::{substream, Stream};

/// Dense user and item embedding matrices sharing dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub users: Matrix,
    pub items: Matrix,
}

impl EmbeddingTable {
    pub fn new(users: Matrix, items: Matrix) -> Result<Self> {
        if users.cols() != items.cols() {
            return Err(Error::ShapeMismatch(format!(
                "user dimension {} != item dimension {}",
                users.cols(),
                items.cols()
            )));
        }
        Ok(EmbeddingTable { users, items })
    }

    pub fn n_users(&self) -> usize {
        self.users.rows()
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn all_finite(&self) -> bool {
        self.users.all_finite() && self.items.all_finite()
    }

    /// Raw embedding rows for the given IDs.
    pub fn forward_mf(&self, users: &[usize], items: &[usize]) -> Result<(Matrix, Matrix)> {
        check_ids("user", users, self.n_users())?;
        check_ids("item", items, self.n_items())?;
        Ok((self.users.gather(users), self.items.gather(items)))
    }

    /// Writes the dump format: a `n_users n_items d` header, then one
    /// space-separated row per user followed by one per item, 17 significant
    /// digits each.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {} {}", self.n_users(), self.n_items(), self.dim()).map_err(io)?;
        for row in self.users.iter_rows().chain(self.items.iter_rows()) {
            let mut first = true;
            for x in row {
                if !first {
                    w.write_all(b" ").map_err(io)?;
                }
                write!(w, "{x:.16e}").map_err(io)?;
                first = false;
            }
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let malformed = |line: usize, reason: String| Error::MalformedLine { line, reason };
        let (_, header) = lines.next().ok_or_else(|| malformed(1, "missing header".into()))?;
        let header = header.map_err(|e| Error::io(path, e))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| malformed(1, format!("header {header:?} is not `n_users n_items d`")))?;
        let [n_users, n_items, d] = dims[..] else {
            return Err(malformed(1, format!("header {header:?} is not `n_users n_items d`")));
        };
        if d == 0 {
            return Err(malformed(1, "dimension must be positive".into()));
        }
        let mut data = Vec::with_capacity((n_users + n_items) * d);
        let mut rows = 0;
        for (idx, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let before = data.len();
            for tok in line.split_whitespace() {
                let x: f64 = tok.parse().map_err(|_| malformed(idx + 1, format!("bad number {tok:?}")))?;
                data.push(x);
            }
            if data.len() - before != d {
                return Err(malformed(idx + 1, format!("expected {d} values, found {}", data.len() - before)));
            }
            rows += 1;
        }
        if rows != n_users + n_items {
            return Err(Error::ShapeMismatch(format!("header announces {} rows, found {rows}", n_users + n_items)));
        }
        let stacked = Matrix::from_vec(rows, d, data);
        let (users, items) = stacked.split_rows(n_users);
        EmbeddingTable::new(users, items)
    }
}

fn check_ids(kind: &'static str, ids: &[usize], bound: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= bound) {
        Some(&id) => Err(Error::IdOutOfRange { kind, id, bound }),
        None => Ok(()),
    }
}

/// Xavier-uniform initialization, bound `sqrt(6 / (rows + d))` per matrix.
pub fn init_xavier(n_users: usize, n_items: usize, d: usize, seed: u64) -> EmbeddingTable {
    assert!(d >= 1, "embedding dimension must be positive");
    let mut rng = substream(seed, Stream::Init, 0);
    let mut fill = |rows: usize| {
        let a = (6.0 / (rows + d) as f64).sqrt();
        let data = (0..rows * d).map(|_| rng.random_range(-a..=a)).collect();
        Matrix::from_vec(rows, d, data)
    };
    let users = fill(n_users);
    let items = fill(n_items);
    EmbeddingTable { users, items }
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows(reps: &Matrix) -> Result<Matrix> {
    Ok(normalize_with_norms(reps)?.0)
}

/// Normalized rows together with the original row norms.
pub(crate) fn normalize_with_norms(reps: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = reps.clone();
    let mut norms = Vec::with_capacity(reps.rows());
    for r in 0..reps.rows() {
        let n = norm(reps.row(r));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEmbedding { row: r });
        }
        out.row_mut(r).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Compressed sparse rows of a square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[span.clone()].binary_search(&c) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// `self · x` for a dense `n × d` matrix.
    pub fn mul_dense(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.rows(), self.n);
        let mut out = Matrix::zeros(self.n, x.cols());
        for r in 0..self.n {
            let acc = out.row_mut(r);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let w = self.vals[k];
                for (a, b) in acc.iter_mut().zip(x.row(self.cols[k])) {
                    *a += w * b;
                }
            }
        }
        out
    }
}

/// Symmetrically normalized bipartite adjacency over `n_users + n_items`
/// nodes (users first): entry `(u, i)` is `1 / sqrt(p(u)·p(i))`.
pub fn normalized_adjacency(train: &InteractionSet) -> SparseMatrix {
    let n_users = train.n_users();
    let n = n_users + train.n_items();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let (up, ip) = (train.user_pop(), train.item_pop());
    for p in train.pairs() {
        let (u, i) = (p.user as usize, p.item as usize);
        let w = 1.0 / (f64::from(up[u]) * f64::from(ip[i])).sqrt();
        adj[u].push((n_users + i, w));
        adj[n_users + i].push((u, w));
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let (mut cols, mut vals) = (Vec::new(), Vec::new());
    row_ptr.push(0);
    for mut row in adj {
        row.sort_unstable_by_key(|&(c, _)| c);
        for (c, w) in row {
            cols.push(c);
            vals.push(w);
        }
        row_ptr.push(cols.len());
    }
    SparseMatrix { n, row_ptr, cols, vals }
}

/// Layer-mean linear propagation on top of an embedding table.
#[derive(Debug, Clone)]
pub struct GraphPropagator {
    pub base: EmbeddingTable,
    pub n_layers: usize,
    adjacency: SparseMatrix,
}

impl GraphPropagator {
    /// `train` must be the training interactions only.
    pub fn new(base: EmbeddingTable, n_layers: usize, train: &InteractionSet) -> Result<Self> {
        if base.n_users() != train.n_users() || base.n_items() != train.n_items() {
            return Err(Error::ShapeMismatch(format!(
                "table is {}x{} but graph has {} users and {} items",
                base.n_users(),
                base.n_items(),
                train.n_users(),
                train.n_items()
            )));
        }
        Ok(GraphPropagator { base, n_layers, adjacency: normalized_adjacency(train) })
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    /// Propagated representations of every user and item:
    /// `mean(E0, Â·E0, ..., Â^L·E0)`.
    pub fn propagate(&self) -> EmbeddingTable {
        let e0 = self.base.users.vstack(&self.base.items);
        let out = self.layer_mean(e0);
        let (users, items) = out.split_rows(self.base.n_users());
        EmbeddingTable { users, items }
    }

    pub fn forward_lgcn(&self, users: &[usize], items: &[usize]) -> Result<(Matrix, Matrix)> {
        check_ids("user", users, self.base.n_users())?;
        check_ids("item", items, self.base.n_items())?;
        self.propagate().forward_mf(users, items)
    }

    /// Pulls a gradient w.r.t. propagated outputs (stacked users then items)
    /// back to the base embeddings. `Â` is symmetric, so the adjoint of the
    /// layer mean is the layer mean itself.
    pub fn backward(&self, grad_out: &Matrix) -> Matrix {
        self.layer_mean(grad_out.clone())
    }

    fn layer_mean(&self, x0: Matrix) -> Matrix {
        let mut acc = x0.clone();
        let mut cur = x0;
        for _ in 0..self.n_layers {
            cur = self.adjacency.mul_dense(&cur);
            acc.add_assign(&cur);
        }
        acc.scale(1.0 / (self.n_layers + 1) as f64);
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;
    use proptest::prelude::*;

    #[test]
    fn xavier_bounds_and_determinism() {
        let t = init_xavier(100, 30, 64, 9);
        let a_user = (6.0f64 / 164.0).sqrt();
        assert!((a_user - 0.1913).abs() < 1e-4);
        assert!(t.users.as_slice().iter().all(|x| x.abs() <= a_user));
        let a_item = (6.0f64 / 94.0).sqrt();
        assert!(t.items.as_slice().iter().all(|x| x.abs() <= a_item));
        assert_eq!(t, init_xavier(100, 30, 64, 9));
        assert_ne!(t, init_xavier(100, 30, 64, 10));

        let tiny = init_xavier(1, 1, 1, 0);
        let bound = 3f64.sqrt();
        assert!(tiny.users.row(0)[0].abs() <= bound && tiny.items.row(0)[0].abs() <= bound);
    }

    #[test]
    fn mf_lookup() {
        let t = init_xavier(5, 4, 3, 1);
        let (u, i) = t.forward_mf(&[2, 2, 4], &[0, 3, 3]).unwrap();
        assert_eq!(u.row(0), t.users.row(2));
        assert_eq!(u.row(0), u.row(1));
        assert_eq!(i.row(2), t.items.row(3));
        let (u, i) = t.forward_mf(&[], &[]).unwrap();
        assert_eq!((u.rows(), i.rows()), (0, 0));
        assert!(matches!(t.forward_mf(&[5], &[0]), Err(Error::IdOutOfRange { kind: "user", id: 5, .. })));
        assert!(matches!(t.forward_mf(&[0], &[4]), Err(Error::IdOutOfRange { kind: "item", .. })));
    }

    #[test]
    fn normalize_examples() {
        let m = normalize_rows(&Matrix::from_rows(&[[3.0, 4.0], [0.6, 0.8]])).unwrap();
        assert_eq!(m.row(0), &[0.6, 0.8]);
        assert_eq!(m.row(1), &[0.6, 0.8]);
        assert!(matches!(
            normalize_rows(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]])),
            Err(Error::DegenerateEmbedding { row: 1 })
        ));
    }

    fn table(users: &[[f64; 2]], items: &[[f64; 2]]) -> EmbeddingTable {
        EmbeddingTable::new(Matrix::from_rows(users), Matrix::from_rows(items)).unwrap()
    }

    #[test]
    fn lgcn_empty_graph_scales_by_layer_count() {
        let base = table(&[[1.0, 2.0], [3.0, -1.0]], &[[0.5, 0.5]]);
        let empty = InteractionSet::from_pairs(2, 1, vec![]).unwrap();
        let g = GraphPropagator::new(base.clone(), 3, &empty).unwrap();
        let out = g.propagate();
        assert_eq!(out.users.row(0), &[0.25, 0.5]);
        assert_eq!(out.items.row(0), &[0.125, 0.125]);
    }

    #[test]
    fn lgcn_single_edge() {
        let base = table(&[[1.0, 0.0]], &[[0.0, 2.0]]);
        let train = InteractionSet::from_pairs(1, 1, vec![Interaction::new(0, 0)]).unwrap();
        let g = GraphPropagator::new(base, 1, &train).unwrap();
        let (u, i) = g.forward_lgcn(&[0], &[0]).unwrap();
        assert_eq!(u.row(0), &[0.5, 1.0]);
        assert_eq!(i.row(0), &[0.5, 1.0]);
    }

    #[test]
    fn lgcn_zero_layers_is_mf_and_zero_is_fixed() {
        let base = init_xavier(4, 3, 5, 2);
        let train = InteractionSet::from_pairs(
            4,
            3,
            vec![Interaction::new(0, 0), Interaction::new(1, 0), Interaction::new(2, 1), Interaction::new(3, 2)],
        )
        .unwrap();
        let g0 = GraphPropagator::new(base.clone(), 0, &train).unwrap();
        assert_eq!(g0.forward_lgcn(&[0, 3], &[2]).unwrap(), base.forward_mf(&[0, 3], &[2]).unwrap());
        let zero = EmbeddingTable::new(Matrix::zeros(4, 5), Matrix::zeros(3, 5)).unwrap();
        let g = GraphPropagator::new(zero.clone(), 2, &train).unwrap();
        assert_eq!(g.propagate(), zero);
    }

    #[test]
    fn adjacency_weights() {
        let train = InteractionSet::from_pairs(
            2,
            2,
            vec![Interaction::new(0, 0), Interaction::new(0, 1), Interaction::new(1, 1)],
        )
        .unwrap();
        let a = normalized_adjacency(&train);
        assert_eq!(a.nnz(), 6);
        assert!((a.get(0, 2) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((a.get(0, 3) - 0.5).abs() < 1e-15);
        assert!((a.get(3, 1) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.get(1, 2), 0.0);
        assert_eq!(a.get(0, 1), 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // loss = <W, propagate(E0)> for fixed random weights W
        let base = init_xavier(3, 4, 2, 5);
        let train = InteractionSet::from_pairs(
            3,
            4,
            vec![
                Interaction::new(0, 0),
                Interaction::new(0, 1),
                Interaction::new(1, 1),
                Interaction::new(2, 2),
                Interaction::new(2, 3),
                Interaction::new(1, 3),
            ],
        )
        .unwrap();
        let weights = init_xavier(3, 4, 2, 6);
        let w = weights.users.vstack(&weights.items);
        let loss = |t: &EmbeddingTable| {
            let g = GraphPropagator::new(t.clone(), 2, &train).unwrap();
            let out = g.propagate();
            crate::matrix::dot(out.users.vstack(&out.items).as_slice(), w.as_slice())
        };
        let g = GraphPropagator::new(base.clone(), 2, &train).unwrap();
        let analytic = g.backward(&w);
        let h = 1e-6;
        for k in 0..analytic.as_slice().len() {
            let mut plus = base.users.vstack(&base.items);
            let mut minus = plus.clone();
            plus.as_mut_slice()[k] += h;
            minus.as_mut_slice()[k] -= h;
            let (pu, pi) = plus.split_rows(3);
            let (mu, mi) = minus.split_rows(3);
            let fd =
                (loss(&EmbeddingTable::new(pu, pi).unwrap()) - loss(&EmbeddingTable::new(mu, mi).unwrap())) / (2.0 * h);
            assert!((fd - analytic.as_slice()[k]).abs() < 1e-8, "coord {k}: fd {fd} vs {}", analytic.as_slice()[k]);
        }
    }

    #[test]
    fn dump_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let mut t = init_xavier(3, 2, 4, 8);
        t.users.row_mut(0)[0] = 1.0 / 3.0;
        t.items.row_mut(1)[3] = -1.234_567_890_123_456_7e-200;
        t.write_dump(&path).unwrap();
        let back = EmbeddingTable::read_dump(&path).unwrap();
        assert_eq!(back, t);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("3 2 4\n"));
    }

    #[test]
    fn dump_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "2 x 3\n").unwrap();
        assert!(matches!(EmbeddingTable::read_dump(&path), Err(Error::MalformedLine { line: 1, .. })));
        std::fs::write(&path, "1 1 2\n1 2\n3\n").unwrap();
        assert!(matches!(EmbeddingTable::read_dump(&path), Err(Error::MalformedLine { line: 3, .. })));
        std::fs::write(&path, "2 1 1\n1\n2\n").unwrap();
        assert!(matches!(EmbeddingTable::read_dump(&path), Err(Error::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent_and_scale_invariant(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..6),
            c in 0.01f64..100.0,
        ) {
            let m = Matrix::from_rows(&rows);
            prop_assume!(m.iter_rows().all(|r| norm(r) > 1e-3));
            let n1 = normalize_rows(&m).unwrap();
            for r in n1.iter_rows() {
                prop_assert!((norm(r) - 1.0).abs() < 1e-12);
            }
            let n2 = normalize_rows(&n1).unwrap();
            let mut scaled = m.clone();
            scaled.scale(c);
            let n3 = normalize_rows(&scaled).unwrap();
            for ((a, b), e) in n1.as_slice().iter().zip(n2.as_slice()).zip(n3.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((a - e).abs() < 1e-12);
            }
        }

        #[test]
        fn propagation_stays_finite(seed in 0u64..500, layers in 0usize..4) {
            let base = init_xavier(6, 5, 3, seed);
            let pairs = (0..6u32).flat_map(|u| [Interaction::new(u, u % 5), Interaction::new(u, (u + 2) % 5)]).collect();
            let train = InteractionSet::from_pairs(6, 5, pairs).unwrap();
            let g = GraphPropagator::new(base, layers, &train).unwrap();
            prop_assert!(g.propagate().all_finite());
        }
    }
}
