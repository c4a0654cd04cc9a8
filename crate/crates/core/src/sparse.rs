//! Up-looking sparse LDLᵀ factorization in compressed-column form.
//!
//! Rows follow the order they are given in; the row pattern of each column of `L` comes from the
//! elimination tree of the upper triangle.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Upper triangle of a symmetric matrix in compressed-column storage.
#[derive(Debug, Clone)]
pub(crate) struct UpperCsc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl UpperCsc {
    /// Builds the matrix from `(row, col, value)` triplets with `row <= col`.
    /// Duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut col_ptr = vec![0; n + 1];
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            debug_assert!(r <= c && c < n);
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        Self {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }
}

/// `A = L D Lᵀ` with unit lower-triangular `L` (diagonal not stored) and
/// diagonal `D`.
#[derive(Debug, Clone)]
pub(crate) struct LdlFactor {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
    diag: Vec<f64>,
}

const NONE: usize = usize::MAX;

/// Elimination order of a graph by repeatedly removing a vertex of minimum
/// current degree (lowest index on ties) and joining its neighbours into a
/// clique. Returns `order[k]` = vertex eliminated at step `k`.
pub(crate) fn minimum_degree_order(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut adj: Vec<BTreeSet<usize>> = adjacency
        .iter()
        .enumerate()
        .map(|(v, nb)| nb.iter().copied().filter(|&w| w != v).collect())
        .collect();
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| alive[v])
            .min_by_key(|&v| (adj[v].len(), v))
            .expect("a vertex remains");
        alive[v] = false;
        order.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &a in &nbrs {
            adj[a].remove(&v);
            for &b in &nbrs {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
    }
    order
}

fn elimination_tree(a: &UpperCsc) -> Vec<usize> {
    let n = a.n;
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for p in a.col_ptr[k]..a.col_ptr[k + 1] {
            let mut i = a.row_idx[p];
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Pattern of row `k` of `L` (excluding the diagonal) in topological order,
/// written to `stack[top..]`; returns `top`.
fn row_pattern(
    a: &UpperCsc,
    k: usize,
    parent: &[usize],
    mark: &mut [usize],
    stack: &mut [usize],
) -> usize {
    let n = a.n;
    let mut top = n;
    mark[k] = k;
    for p in a.col_ptr[k]..a.col_ptr[k + 1] {
        let mut i = a.row_idx[p];
        if i > k {
            continue;
        }
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

impl LdlFactor {
    pub fn factor(a: &UpperCsc) -> Result<Self> {
        let n = a.n;
        let parent = elimination_tree(a);
        let mut mark = vec![NONE; n];
        let mut stack = vec![0; n];

        // Symbolic pass: column counts of L.
        let mut counts = vec![0usize; n];
        for k in 0..n {
            let top = row_pattern(a, k, &parent, &mut mark, &mut stack);
            for &i in &stack[top..n] {
                counts[i] += 1;
            }
        }
        let mut col_ptr = vec![0; n + 1];
        for k in 0..n {
            col_ptr[k + 1] = col_ptr[k] + counts[k];
        }
        let nnz = col_ptr[n];
        let mut row_idx = vec![0; nnz];
        let mut values = vec![0.0; nnz];
        let mut diag = vec![0.0; n];
        let mut next: Vec<usize> = col_ptr[..n].to_vec();

        mark.iter_mut().for_each(|m| *m = NONE);
        let mut x = vec![0.0; n];
        for k in 0..n {
            let top = row_pattern(a, k, &parent, &mut mark, &mut stack);
            x[k] = 0.0;
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let i = a.row_idx[p];
                if i <= k {
                    x[i] += a.values[p];
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let yi = x[i];
                x[i] = 0.0;
                for p in col_ptr[i]..next[i] {
                    x[row_idx[p]] -= values[p] * yi;
                }
                let lki = yi / diag[i];
                d -= lki * yi;
                row_idx[next[i]] = k;
                values[next[i]] = lki;
                next[i] += 1;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    column: k,
                    pivot: d,
                });
            }
            diag[k] = d;
        }
        Ok(Self {
            n,
            col_ptr,
            row_idx,
            values,
            diag,
        })
    }

    /// Solves `L D Lᵀ x = rhs` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for j in 0..self.n {
            let xj = x[j];
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                x[self.row_idx[p]] -= self.values[p] * xj;
            }
        }
        for (xj, d) in x.iter_mut().zip(&self.diag) {
            *xj /= d;
        }
        for j in (0..self.n).rev() {
            let mut s = x[j];
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                s -= self.values[p] * x[self.row_idx[p]];
            }
            x[j] = s;
        }
    }

    #[cfg(test)]
    fn nnz(&self) -> usize {
        self.col_ptr[self.n] + self.n
    }
}
