//! Damped Gauss-Newton normal equations `(H + ζI) Δx = −b`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sparse::{minimum_degree_order, LdlFactor, UpperCsc};
use crate::variable::VariableKey;

/// Dense `H^k`, `b^k` of one factor over its own variables, in the factor's
/// key order.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub keys: Vec<VariableKey>,
    pub dims: Vec<usize>,
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
}

/// Block-sparse symmetric `H` (upper blocks only), dense `b`, damping `ζ`.
#[derive(Debug, Clone)]
pub struct SparseBlockSystem {
    offsets: Vec<usize>,
    blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
    gradient: DVector<f64>,
    zeta: f64,
}

impl SparseBlockSystem {
    /// Empty system over variables with the given tangent dimensions.
    pub fn new(dims: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        offsets.push(0);
        for d in dims {
            offsets.push(offsets.last().unwrap() + d);
        }
        let n = *offsets.last().unwrap();
        Self {
            offsets,
            blocks: BTreeMap::new(),
            gradient: DVector::zeros(n),
            zeta: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn num_variables(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn offset(&self, var: usize) -> usize {
        self.offsets[var]
    }

    pub fn block_dim(&self, var: usize) -> usize {
        self.offsets[var + 1] - self.offsets[var]
    }

    pub fn damping(&self) -> f64 {
        self.zeta
    }

    pub fn set_damping(&mut self, zeta: f64) {
        self.zeta = zeta;
    }

    pub fn gradient(&self) -> &DVector<f64> {
        &self.gradient
    }

    /// Upper block `(row, col)` with `row <= col`.
    pub fn block(&self, row: usize, col: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(&(row.min(col), row.max(col)))
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn check_var(&self, var: usize, other: usize) -> Result<()> {
        if var >= self.num_variables() || other >= self.num_variables() {
            return Err(Error::BlockOutOfRange(var, other));
        }
        Ok(())
    }

    /// Adds `block` at `H[row, col]` (and implicitly its transpose at
    /// `H[col, row]`).
    pub fn add_block(&mut self, row: usize, col: usize, block: &DMatrix<f64>) -> Result<()> {
        self.check_var(row, col)?;
        let (r, c, b) = if row <= col {
            (row, col, block.clone())
        } else {
            (col, row, block.transpose())
        };
        if b.shape() != (self.block_dim(r), self.block_dim(c)) {
            return Err(Error::DimensionMismatch {
                expected: self.block_dim(r) * self.block_dim(c),
                actual: b.len(),
            });
        }
        match self.blocks.get_mut(&(r, c)) {
            Some(existing) => *existing += b,
            None => {
                self.blocks.insert((r, c), b);
            }
        }
        Ok(())
    }

    pub fn add_gradient(&mut self, var: usize, segment: &DVector<f64>) -> Result<()> {
        self.check_var(var, var)?;
        let d = self.block_dim(var);
        if segment.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: segment.len(),
            });
        }
        let off = self.offsets[var];
        let mut rows = self.gradient.rows_mut(off, d);
        rows += segment;
        Ok(())
    }

    /// `H += H^k`, `b += b^k`, scattering the factor's dense blocks.
    pub fn accumulate(&mut self, c: &Contribution) -> Result<()> {
        let mut local = Vec::with_capacity(c.keys.len() + 1);
        local.push(0);
        for (k, d) in c.keys.iter().zip(&c.dims) {
            self.check_var(k.0, k.0)?;
            if *d != self.block_dim(k.0) {
                return Err(Error::DimensionMismatch {
                    expected: self.block_dim(k.0),
                    actual: *d,
                });
            }
            local.push(local.last().unwrap() + d);
        }
        for (a, ka) in c.keys.iter().enumerate() {
            let da = c.dims[a];
            let seg = c.gradient.rows(local[a], da).into_owned();
            self.add_gradient(ka.0, &seg)?;
            for (b, kb) in c.keys.iter().enumerate() {
                if ka.0 > kb.0 {
                    continue;
                }
                let blk = c
                    .hessian
                    .view((local[a], local[b]), (da, c.dims[b]))
                    .into_owned();
                self.add_block(ka.0, kb.0, &blk)?;
            }
        }
        Ok(())
    }

    /// Full symmetric `H` without damping.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for (&(r, c), b) in &self.blocks {
            let (ro, co) = (self.offsets[r], self.offsets[c]);
            h.view_mut((ro, co), b.shape()).copy_from(b);
            if r != c {
                h.view_mut((co, ro), (b.ncols(), b.nrows()))
                    .copy_from(&b.transpose());
            }
        }
        h
    }

    /// Greedy minimum-degree elimination order over variable blocks.
    fn block_order(&self) -> Vec<usize> {
        let mut adjacency = vec![Vec::new(); self.num_variables()];
        for &(r, c) in self.blocks.keys() {
            if r != c {
                adjacency[r].push(c);
                adjacency[c].push(r);
            }
        }
        minimum_degree_order(&adjacency)
    }

    /// Upper triangle of `H + ζI` with variable blocks laid out in `order`,
    /// plus the scalar position of every original index.
    fn permuted_upper(&self, order: &[usize]) -> (Vec<(usize, usize, f64)>, Vec<usize>) {
        let n = self.dim();
        let mut position = vec![0; n];
        let mut next = 0;
        for &b in order {
            for i in 0..self.block_dim(b) {
                position[self.offsets[b] + i] = next + i;
            }
            next += self.block_dim(b);
        }
        let mut t = Vec::with_capacity(self.blocks.values().map(|b| b.len()).sum::<usize>() + n);
        for (&(r, c), b) in &self.blocks {
            let (ro, co) = (self.offsets[r], self.offsets[c]);
            for j in 0..b.ncols() {
                for i in 0..b.nrows() {
                    if r == c && i > j {
                        continue;
                    }
                    let v = b[(i, j)];
                    if v != 0.0 {
                        let (pi, pj) = (position[ro + i], position[co + j]);
                        t.push((pi.min(pj), pi.max(pj), v));
                    }
                }
            }
        }
        for i in 0..n {
            t.push((i, i, self.zeta));
        }
        (t, position)
    }

    /// Solves `(H + ζI) Δx = −b` with a sparse LDLᵀ factorization after a
    /// fill-reducing block reordering.
    pub fn solve_damped(&self) -> Result<DVector<f64>> {
        let (triplets, position) = self.permuted_upper(&self.block_order());
        let factor = LdlFactor::factor(&UpperCsc::from_triplets(self.dim(), triplets)).map_err(|e| match e {
            Error::NotPositiveDefinite { column, pivot } => Error::NotPositiveDefinite {
                column: position.iter().position(|&p| p == column).unwrap_or(column),
                pivot,
            },
            other => other,
        })?;
        let mut x = vec![0.0; self.dim()];
        for (i, &p) in position.iter().enumerate() {
            x[p] = -self.gradient[i];
        }
        factor.solve_in_place(&mut x);
        Ok(DVector::from_iterator(self.dim(), position.iter().map(|&p| x[p])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn single_block_accumulation() {
        let mut s = SparseBlockSystem::new(&[1]);
        s.accumulate(&Contribution {
            keys: vec![VariableKey(0)],
            dims: vec![1],
            hessian: scalar(2.0),
            gradient: DVector::from_element(1, -4.0),
        })
        .unwrap();
        assert_eq!(s.to_dense(), scalar(2.0));
        assert_eq!(s.gradient()[0], -4.0);
        assert_eq!(s.solve_damped().unwrap()[0], 2.0);
    }

    #[test]
    fn identical_contributions_double() {
        let c = Contribution {
            keys: vec![VariableKey(1), VariableKey(0)],
            dims: vec![1, 2],
            hessian: DMatrix::from_row_slice(3, 3, &[3.0, 1.0, 2.0, 1.0, 5.0, 0.5, 2.0, 0.5, 4.0]),
            gradient: DVector::from_vec(vec![1.0, 2.0, 3.0]),
        };
        let mut once = SparseBlockSystem::new(&[2, 1]);
        once.accumulate(&c).unwrap();
        let mut twice = once.clone();
        twice.accumulate(&c).unwrap();
        assert_eq!(twice.to_dense(), once.to_dense() * 2.0);
        assert_eq!(twice.gradient(), &(once.gradient() * 2.0));
        // Factor key order (1, 0) maps onto the global layout.
        assert_eq!(once.to_dense()[(2, 2)], 3.0);
        assert_eq!(once.gradient()[2], 1.0);
        assert_eq!(once.to_dense()[(0, 2)], 1.0);
    }

    #[test]
    fn chain_matches_dense_normal_equations() {
        // Two factors: e1 = x0 - 1 (2-dim), e2 = A x0 + B x1 - z (2-dim).
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[-1.0, 3.0]);
        let om1 = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        let om2 = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let e1 = DVector::from_vec(vec![0.5, -0.5]);
        let e2 = DVector::from_vec(vec![1.0, 2.0]);

        let mut sys = SparseBlockSystem::new(&[2, 1]);
        let j1 = DMatrix::identity(2, 2);
        sys.accumulate(&Contribution {
            keys: vec![VariableKey(0)],
            dims: vec![2],
            hessian: j1.transpose() * &om1 * &j1,
            gradient: j1.transpose() * &om1 * &e1,
        })
        .unwrap();
        let mut j2 = DMatrix::zeros(2, 3);
        j2.view_mut((0, 0), (2, 2)).copy_from(&a);
        j2.view_mut((0, 2), (2, 1)).copy_from(&b);
        sys.accumulate(&Contribution {
            keys: vec![VariableKey(0), VariableKey(1)],
            dims: vec![2, 1],
            hessian: j2.transpose() * &om2 * &j2,
            gradient: j2.transpose() * &om2 * &e2,
        })
        .unwrap();

        let mut jd = DMatrix::zeros(4, 3);
        jd.view_mut((0, 0), (2, 2)).copy_from(&j1);
        jd.view_mut((2, 0), (2, 3)).copy_from(&j2);
        let mut om = DMatrix::zeros(4, 4);
        om.view_mut((0, 0), (2, 2)).copy_from(&om1);
        om.view_mut((2, 2), (2, 2)).copy_from(&om2);
        let e = DVector::from_iterator(4, e1.iter().chain(e2.iter()).copied());
        assert_relative_eq!(sys.to_dense(), jd.transpose() * &om * &jd, epsilon = 1e-12);
        assert_relative_eq!(sys.gradient().clone(), jd.transpose() * &om * &e, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let mut s = SparseBlockSystem::new(&[1, 1]);
        assert_eq!(s.add_block(0, 2, &scalar(1.0)), Err(Error::BlockOutOfRange(0, 2)));
        let c = Contribution {
            keys: vec![VariableKey(5)],
            dims: vec![1],
            hessian: scalar(1.0),
            gradient: DVector::zeros(1),
        };
        assert!(s.accumulate(&c).is_err());
    }

    #[test]
    fn damped_identity() {
        let mut s = SparseBlockSystem::new(&[3]);
        s.add_block(0, 0, &DMatrix::identity(3, 3)).unwrap();
        s.add_gradient(0, &DVector::from_element(3, 1.0)).unwrap();
        s.set_damping(1.0);
        let dx = s.solve_damped().unwrap();
        assert_eq!(dx.as_slice(), &[-0.5, -0.5, -0.5]);
    }

    #[test]
    fn singular_undamped_fails() {
        let mut s = SparseBlockSystem::new(&[2]);
        s.add_block(0, 0, &DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]))
            .unwrap();
        assert!(matches!(s.solve_damped(), Err(Error::NotPositiveDefinite { .. })));
        s.set_damping(0.1);
        assert!(s.solve_damped().is_ok());
    }

    #[test]
    fn arrow_system_matches_dense() {
        // Block 0 couples to every other block; eliminating it first would fill everything.
        let mut sys = SparseBlockSystem::new(&[2; 6]);
        for k in 0..6 {
            let d = DMatrix::from_row_slice(2, 2, &[4.0 + k as f64, 0.5, 0.5, 3.0]);
            sys.add_block(k, k, &d).unwrap();
            if k > 0 {
                sys.add_block(0, k, &DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.4])).unwrap();
            }
            sys.add_gradient(k, &DVector::from_vec(vec![k as f64 - 2.0, 1.0])).unwrap();
        }
        let x = sys.solve_damped().unwrap();
        let expected = sys.to_dense().lu().solve(&(-sys.gradient())).unwrap();
        assert!((x - expected).amax() < 1e-12);
    }

    fn random_spd_system(seed: u64, blocks: usize, dim: usize) -> SparseBlockSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = SparseBlockSystem::new(&vec![dim; blocks]);
        for i in 0..blocks {
            // Random chain plus a few long-range couplings, each term PSD.
            let j = if i + 1 < blocks { i + 1 } else { 0 };
            let partner = rng.random_range(0..blocks);
            for other in [j, partner] {
                if other == i {
                    continue;
                }
                let jac = DMatrix::from_fn(dim, 2 * dim, |_, _| rng.random::<f64>() - 0.5);
                s.accumulate(&Contribution {
                    keys: vec![VariableKey(i), VariableKey(other)],
                    dims: vec![dim, dim],
                    hessian: jac.transpose() * &jac,
                    gradient: DVector::from_fn(2 * dim, |_, _| rng.random::<f64>() - 0.5),
                })
                .unwrap();
            }
            s.add_block(i, i, &(DMatrix::identity(dim, dim) * 0.1)).unwrap();
        }
        s
    }

    #[test]
    fn random_spd_residual() {
        let s = random_spd_system(3, 10, 2);
        assert_eq!(s.dim(), 20);
        let dx = s.solve_damped().unwrap();
        let r = s.to_dense() * &dx + s.gradient();
        assert!(r.amax() < 1e-10, "residual {}", r.amax());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn solution_residual_is_small(seed in 0u64..10_000, zeta in 0.0..5.0f64) {
            let mut s = random_spd_system(seed, 8, 3);
            s.set_damping(zeta);
            let dx = s.solve_damped().unwrap();
            let h = s.to_dense() + DMatrix::identity(s.dim(), s.dim()) * zeta;
            let r = h * &dx + s.gradient();
            prop_assert!(r.amax() < 1e-9 * (1.0 + s.gradient().amax()));
        }

        #[test]
        fn damping_shrinks_step(seed in 0u64..10_000, z1 in 0.0..2.0f64, extra in 0.0..10.0f64) {
            let mut s = random_spd_system(seed, 6, 2);
            s.set_damping(z1);
            let n1 = s.solve_damped().unwrap().norm();
            s.set_damping(z1 + extra);
            let n2 = s.solve_damped().unwrap().norm();
            prop_assert!(n2 <= n1 * (1.0 + 1e-12));
        }

        #[test]
        fn accumulation_order_is_irrelevant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let contribs: Vec<Contribution> = (0..4).map(|_| {
                let a = rng.random_range(0..3);
                let b = (a + 1 + rng.random_range(0..2)) % 3;
                Contribution {
                    keys: vec![VariableKey(a), VariableKey(b)],
                    dims: vec![1, 1],
                    // Small integers keep the sums exact.
                    hessian: DMatrix::from_fn(2, 2, |i, j| ((i + j) as f64) + rng.random_range(0..4) as f64 * (if i == j { 1.0 } else { 0.0 })),
                    gradient: DVector::from_fn(2, |_, _| rng.random_range(-3..3) as f64),
                }
            }).collect();
            let mut fwd = SparseBlockSystem::new(&[1, 1, 1]);
            let mut rev = SparseBlockSystem::new(&[1, 1, 1]);
            for c in &contribs { fwd.accumulate(c).unwrap(); }
            for c in contribs.iter().rev() { rev.accumulate(c).unwrap(); }
            prop_assert_eq!(fwd.to_dense(), rev.to_dense());
            prop_assert_eq!(fwd.gradient(), rev.gradient());
        }
    }
}
