//! Adam with lazy, row-sparse updates for embedding matrices.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Accumulated gradient for a subset of rows. Repeated rows are summed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowGrads {
    dim: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl RowGrads {
    pub fn new(dim: usize) -> Self {
        RowGrads { dim, rows: BTreeMap::new() }
    }

    pub fn add(&mut self, row: usize, grad: &[f64]) {
        assert_eq!(grad.len(), self.dim, "gradient row width");
        let acc = self.rows.entry(row).or_insert_with(|| vec![0.0; grad.len()]);
        acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g);
    }

    /// Adds row `k` of `grads` to parameter row `ids[k]`.
    pub fn scatter(&mut self, ids: &[usize], grads: &Matrix) {
        for (k, &id) in ids.iter().enumerate() {
            self.add(id, grads.row(k));
        }
    }

    /// Rows of a dense gradient that carry any non-zero entry.
    pub fn from_dense(grads: &Matrix) -> Self {
        let mut out = RowGrads::new(grads.cols());
        for (r, row) in grads.iter_rows().enumerate() {
            if row.iter().any(|&g| g != 0.0) {
                out.rows.insert(r, row.to_vec());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.rows.iter().map(|(&r, g)| (r, g.as_slice()))
    }
}

/// Moment estimates for one parameter matrix, with a step counter per row.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub weight_decay: f64,
    m: Matrix,
    v: Matrix,
    steps: Vec<u64>,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, lr: f64, weight_decay: f64) -> Self {
        AdamState { lr, weight_decay, m: Matrix::zeros(rows, cols), v: Matrix::zeros(rows, cols), steps: vec![0; rows] }
    }

    pub fn steps(&self, row: usize) -> u64 {
        self.steps[row]
    }

    pub fn second_moment(&self) -> &Matrix {
        &self.v
    }

    /// Updates only the rows present in `grads`. Nothing is modified when
    /// any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut Matrix, grads: &RowGrads) -> Result<()> {
        if (params.rows(), params.cols()) != (self.m.rows(), self.m.cols()) {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state is {}x{}, parameters are {}x{}",
                self.m.rows(),
                self.m.cols(),
                params.rows(),
                params.cols()
            )));
        }
        for (row, g) in grads.iter() {
            if row >= params.rows() {
                return Err(Error::IdOutOfRange { kind: "row", id: row, bound: params.rows() });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::DivergedGradient { row });
            }
        }
        for (row, g) in grads.iter() {
            self.steps[row] += 1;
            let t = self.steps[row] as i32;
            let bc1 = 1.0 - BETA1.powi(t);
            let bc2 = 1.0 - BETA2.powi(t);
            let p = params.row_mut(row);
            let m = self.m.row_mut(row);
            let v = self.v.row_mut(row);
            for k in 0..g.len() {
                let gk = g[k] + self.weight_decay * p[k];
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grads(rows: &[(usize, Vec<f64>)], dim: usize) -> RowGrads {
        let mut g = RowGrads::new(dim);
        for (r, v) in rows {
            g.add(*r, v);
        }
        g
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Matrix::from_rows(&[[0.5, -1.0], [2.0, 3.0]]);
        let before = p.clone();
        let mut s = AdamState::new(2, 2, 1e-3, 0.0);
        s.step(&mut p, &grads(&[(0, vec![0.0, 0.0]), (1, vec![0.0, 0.0])], 2)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Matrix::from_rows(&[[0.0]]);
        let mut s = AdamState::new(1, 1, 1e-3, 0.0);
        s.step(&mut p, &grads(&[(0, vec![1.0])], 1)).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expect = -1e-3 / (1.0 + EPSILON);
        assert!((p.row(0)[0] - expect).abs() < 1e-18);
        assert_eq!(s.steps(0), 1);
    }

    #[test]
    fn weight_decay_enters_gradient() {
        let mut p = Matrix::from_rows(&[[2.0]]);
        let mut s = AdamState::new(1, 1, 0.1, 0.5);
        s.step(&mut p, &grads(&[(0, vec![0.0])], 1)).unwrap();
        // effective gradient 0.5·2 = 1 → first step of −lr
        assert!((p.row(0)[0] - (2.0 - 0.1 / (1.0 + EPSILON))).abs() < 1e-15);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = Matrix::from_rows(&[[0.3, 0.1], [0.2, -0.4]]);
            let mut s = AdamState::new(2, 2, 1e-2, 1e-4);
            for k in 0..5 {
                let g = grads(&[(k % 2, vec![0.1 * k as f64, -0.2])], 2);
                s.step(&mut p, &g).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_rejected_atomically() {
        let mut p = Matrix::from_rows(&[[1.0], [1.0]]);
        let before = p.clone();
        let mut s = AdamState::new(2, 1, 1e-3, 0.0);
        let g = grads(&[(0, vec![1.0]), (1, vec![f64::NAN])], 1);
        assert!(matches!(s.step(&mut p, &g), Err(Error::DivergedGradient { row: 1 })));
        assert_eq!(p, before);
        assert_eq!(s.steps(0), 0);
    }

    #[test]
    fn untouched_rows_keep_their_counters() {
        let mut p = Matrix::zeros(3, 1);
        let mut s = AdamState::new(3, 1, 1e-3, 0.0);
        s.step(&mut p, &grads(&[(1, vec![1.0])], 1)).unwrap();
        s.step(&mut p, &grads(&[(1, vec![1.0]), (2, vec![1.0])], 1)).unwrap();
        assert_eq!((s.steps(0), s.steps(1), s.steps(2)), (0, 2, 1));
        assert_eq!(p.row(0)[0], 0.0);
    }

    #[test]
    fn scatter_sums_duplicates() {
        let mut g = RowGrads::new(2);
        g.scatter(&[3, 1, 3], &Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0], [0.5, -1.0]]));
        let rows: Vec<_> = g.iter().map(|(r, v)| (r, v.to_vec())).collect();
        assert_eq!(rows, vec![(1, vec![2.0, 2.0]), (3, vec![1.5, 0.0])]);
        let dense = RowGrads::from_dense(&Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0]]));
        assert_eq!(dense.len(), 1);
    }

    proptest! {
        #[test]
        fn row_updates_are_independent(
            a in prop::collection::vec(-5.0f64..5.0, 3),
            b in prop::collection::vec(-5.0f64..5.0, 3),
            wd in prop::sample::select(vec![0.0, 1e-8, 1e-6, 1e-4]),
        ) {
            let init = Matrix::from_rows(&[[0.1, 0.2, 0.3], [-0.4, 0.5, -0.6]]);
            let mut joint = init.clone();
            let mut sj = AdamState::new(2, 3, 1e-2, wd);
            sj.step(&mut joint, &grads(&[(0, a.clone()), (1, b.clone())], 3)).unwrap();
            let mut sep = init.clone();
            let mut ss = AdamState::new(2, 3, 1e-2, wd);
            ss.step(&mut sep, &grads(&[(0, a)], 3)).unwrap();
            ss.step(&mut sep, &grads(&[(1, b)], 3)).unwrap();
            prop_assert_eq!(joint, sep);
            prop_assert_eq!(sj, ss);
        }

        #[test]
        fn zero_lr_freezes_and_steps_are_bounded(
            seq in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 4), 1..20),
        ) {
            let mut frozen = Matrix::from_rows(&[[1.0, -2.0, 3.0, 0.5]]);
            let before = frozen.clone();
            let mut s0 = AdamState::new(1, 4, 0.0, 1e-4);
            let lr = 1e-3;
            let mut p = before.clone();
            let mut s = AdamState::new(1, 4, lr, 0.0);
            for g in &seq {
                s0.step(&mut frozen, &grads(&[(0, g.clone())], 4)).unwrap();
                let prev = p.clone();
                s.step(&mut p, &grads(&[(0, g.clone())], 4)).unwrap();
                for (x, y) in p.as_slice().iter().zip(prev.as_slice()) {
                    prop_assert!((x - y).abs() <= 10.0 * lr);
                }
            }
            prop_assert_eq!(frozen, before);
            prop_assert!(s.second_moment().as_slice().iter().all(|&v| v >= 0.0));
        }
    }
}
