//! Sparse symmetric matrices, fill-reducing ordering, and LDL' factorization.
//!
//! The auxiliary precision H is assembled as triplets, compressed to CSC
//! (both triangles stored), permuted with a minimum-degree ordering, and
//! factored up-looking with a precomputed elimination tree. Everything here
//! assumes symmetric positive definite input; a non-positive pivot is a hard
//! error surfaced to the caller.

use crate::error::{Error, Result};

/// Compressed sparse column matrix. For symmetric use both triangles are
/// stored; rows are sorted ascending within each column and duplicates are
/// summed at construction.
#[derive(Debug, Clone)]
pub struct CscMatrix {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    /// Build an n-by-n matrix from triplets, summing duplicates. Entries that
    /// are exactly zero after summation are dropped from the pattern.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            debug_assert!(r < n && c < n);
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx: Vec<usize> = Vec::with_capacity(merged.len());
        let mut values: Vec<f64> = Vec::with_capacity(merged.len());
        for &(r, c, v) in &merged {
            if v != 0.0 {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
            }
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        Self { n, col_ptr, row_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Symmetric permutation: returns B = P A P' where new index k corresponds
    /// to old index perm[k].
    pub fn permute_sym(&self, perm: &[usize]) -> CscMatrix {
        let n = self.n;
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let mut entries = Vec::with_capacity(self.nnz());
        for c in 0..n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                entries.push((iperm[self.row_idx[p]], iperm[c], self.values[p]));
            }
        }
        CscMatrix::from_triplets(n, entries)
    }
}

/// Minimum-degree fill-reducing ordering on a symmetric sparsity pattern.
///
/// Quotient-graph implementation with element absorption, exact external
/// degrees, and indistinguishable-node (supervariable) merging. Returns `perm`
/// with `perm[k]` = original index eliminated k-th.
pub fn amd_order(a: &CscMatrix) -> Vec<usize> {
    let n = a.n;
    if n == 0 {
        return Vec::new();
    }

    // Adjacency lists without the diagonal.
    let mut adj_vars: Vec<Vec<usize>> = vec![Vec::new(); n];
    for c in 0..n {
        for p in a.col_ptr[c]..a.col_ptr[c + 1] {
            let r = a.row_idx[p];
            if r != c {
                adj_vars[c].push(r);
            }
        }
    }

    let mut adj_elems: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut elem_vars: Vec<Vec<usize>> = Vec::new();
    let mut elem_alive: Vec<bool> = Vec::new();

    let mut nv = vec![1usize; n]; // supervariable multiplicities
    let mut alive = vec![true; n];
    let mut absorbed_chain: Vec<Vec<usize>> = vec![Vec::new(); n];

    // Degree buckets: head[d] -> first var, linked by next/prev.
    let nil = usize::MAX;
    let mut head = vec![nil; n + 1];
    let mut next = vec![nil; n];
    let mut prev = vec![nil; n];
    let mut degree = vec![0usize; n];

    let mut bucket_insert = |head: &mut [usize], next: &mut [usize], prev: &mut [usize], d: usize, i: usize| {
        next[i] = head[d];
        prev[i] = nil;
        if head[d] != nil {
            prev[head[d]] = i;
        }
        head[d] = i;
    };
    let bucket_remove = |head: &mut [usize], next: &mut [usize], prev: &mut [usize], d: usize, i: usize| {
        if prev[i] != nil {
            next[prev[i]] = next[i];
        } else {
            head[d] = next[i];
        }
        if next[i] != nil {
            prev[next[i]] = prev[i];
        }
    };

    for i in 0..n {
        degree[i] = adj_vars[i].len();
        bucket_insert(&mut head, &mut next, &mut prev, degree[i], i);
    }

    let mut stamp = vec![0u64; n];
    let mut mark = 0u64;
    let mut perm = Vec::with_capacity(n);
    let mut mindeg = 0usize;
    let mut remaining = n;

    while remaining > 0 {
        while mindeg <= n && head[mindeg] == nil {
            mindeg += 1;
        }
        let pivot = head[mindeg];
        bucket_remove(&mut head, &mut next, &mut prev, mindeg, pivot);
        alive[pivot] = false;
        remaining -= nv[pivot];
        perm.push(pivot);
        perm.extend(absorbed_chain[pivot].drain(..));

        // Form the pivot element: union of the pivot's variable neighbors and
        // the variables of all its adjacent elements, excluding dead vars.
        mark += 1;
        stamp[pivot] = mark;
        let mut lp: Vec<usize> = Vec::new();
        for &v in &adj_vars[pivot] {
            if alive[v] && stamp[v] != mark {
                stamp[v] = mark;
                lp.push(v);
            }
        }
        for &e in &adj_elems[pivot] {
            if !elem_alive[e] {
                continue;
            }
            for &v in &elem_vars[e] {
                if alive[v] && stamp[v] != mark {
                    stamp[v] = mark;
                    lp.push(v);
                }
            }
            elem_alive[e] = false; // absorbed into the new element
            elem_vars[e] = Vec::new();
        }
        adj_vars[pivot] = Vec::new();
        adj_elems[pivot] = Vec::new();

        if lp.is_empty() {
            continue;
        }

        let e_new = elem_vars.len();
        elem_vars.push(lp.clone());
        elem_alive.push(true);

        // Prune adjacency of every variable touched by the new element: edges
        // inside Lp are now covered by the element.
        for &i in &lp {
            adj_vars[i].retain(|&v| alive[v] && stamp[v] != mark);
            adj_elems[i].retain(|&e| elem_alive[e]);
            adj_elems[i].push(e_new);
        }

        // Supervariable detection among members of the new element: merge
        // variables with identical quotient-graph adjacency before degrees
        // are recomputed.
        let mut hashes: Vec<(u64, usize)> = lp
            .iter()
            .map(|&i| {
                let mut h = 0u64;
                for &v in &adj_vars[i] {
                    if alive[v] {
                        h = h.wrapping_add((v as u64).wrapping_mul(0x9e3779b97f4a7c15));
                    }
                }
                for &e in &adj_elems[i] {
                    if elem_alive[e] {
                        h = h.wrapping_add((e as u64 ^ 0xabcdef).wrapping_mul(0xc2b2ae3d27d4eb4f));
                    }
                }
                (h, i)
            })
            .collect();
        hashes.sort_unstable();
        let mut g = 0;
        while g < hashes.len() {
            let mut g_end = g + 1;
            while g_end < hashes.len() && hashes[g_end].0 == hashes[g].0 {
                g_end += 1;
            }
            for a_idx in g..g_end {
                let i = hashes[a_idx].1;
                if !alive[i] {
                    continue;
                }
                for b_idx in (a_idx + 1)..g_end {
                    let j = hashes[b_idx].1;
                    if !alive[j] || !same_adjacency(i, j, &adj_vars, &adj_elems, &alive, &elem_alive) {
                        continue;
                    }
                    // absorb j into i; j is eliminated together with i later
                    alive[j] = false;
                    nv[i] += nv[j];
                    let chain: Vec<usize> = absorbed_chain[j].drain(..).collect();
                    absorbed_chain[i].push(j);
                    absorbed_chain[i].extend(chain);
                    bucket_remove(&mut head, &mut next, &mut prev, degree[j], j);
                    adj_vars[j] = Vec::new();
                    adj_elems[j] = Vec::new();
                }
            }
            g = g_end;
        }

        // Exact external degrees for the surviving touched variables.
        for &i in &lp {
            if !alive[i] {
                continue;
            }
            mark += 1;
            stamp[i] = mark;
            let mut d = 0usize;
            for &v in &adj_vars[i] {
                if alive[v] && stamp[v] != mark {
                    stamp[v] = mark;
                    d += nv[v];
                }
            }
            for &e in &adj_elems[i] {
                for &v in &elem_vars[e] {
                    if alive[v] && stamp[v] != mark {
                        stamp[v] = mark;
                        d += nv[v];
                    }
                }
            }
            bucket_remove(&mut head, &mut next, &mut prev, degree[i], i);
            degree[i] = d;
            bucket_insert(&mut head, &mut next, &mut prev, d, i);
            if d < mindeg {
                mindeg = d;
            }
        }
    }

    debug_assert_eq!(perm.len(), n);
    perm
}

fn same_adjacency(
    i: usize,
    j: usize,
    adj_vars: &[Vec<usize>],
    adj_elems: &[Vec<usize>],
    alive: &[bool],
    elem_alive: &[bool],
) -> bool {
    let vs =
        |k: usize, other: usize| -> Vec<usize> {
            let mut v: Vec<usize> = adj_vars[k]
                .iter()
                .copied()
                .filter(|&x| alive[x] && x != other && x != k)
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
    let es = |k: usize| -> Vec<usize> {
        let mut v: Vec<usize> = adj_elems[k].iter().copied().filter(|&e| elem_alive[e]).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    vs(i, j) == vs(j, i) && es(i) == es(j)
}

/// Sparse LDL' factorization of a symmetric positive definite matrix under a
/// given elimination order, with up-looking numeric phase over a precomputed
/// elimination tree.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    pub n: usize,
    /// perm[k] = original index eliminated k-th.
    pub perm: Vec<usize>,
    iperm: Vec<usize>,
    /// Strict lower triangle of L in CSC (unit diagonal implicit).
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

impl LdlFactor {
    /// Factor P A P' = L D L'. `a` must hold both triangles.
    pub fn new(a: &CscMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.n;
        assert_eq!(perm.len(), n);
        let ap = a.permute_sym(&perm);
        let mut iperm = vec![0usize; n];
        for (k, &old) in perm.iter().enumerate() {
            iperm[old] = k;
        }

        // Symbolic: elimination tree and column counts from the upper triangle.
        let mut parent = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        for k in 0..n {
            flag[k] = k;
            for p in ap.col_ptr[k]..ap.col_ptr[k + 1] {
                let mut i = ap.row_idx[p];
                if i >= k {
                    continue;
                }
                while flag[i] != k {
                    if parent[i] == usize::MAX {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }

        // Numeric up-looking phase.
        let nnz_l = lp[n];
        let mut li = vec![0usize; nnz_l];
        let mut lx = vec![0f64; nnz_l];
        let mut d = vec![0f64; n];
        let mut y = vec![0f64; n];
        let mut pattern = vec![0usize; n];
        let mut fill_count = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];

        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            for p in ap.col_ptr[k]..ap.col_ptr[k + 1] {
                let i0 = ap.row_idx[p];
                if i0 > k {
                    continue;
                }
                y[i0] += ap.values[p];
                // walk up the etree, stacking the path in the low end of
                // `pattern`, then reverse it into the high end so the final
                // pattern[top..n] is in topological order
                let mut i = i0;
                let mut len = 0usize;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            // pattern[top..n] holds the row pattern of L[k, :] in topological
            // order so each column update sees finished columns only.
            let mut idx = top;
            while idx < n {
                let i = pattern[idx];
                let yi = y[i];
                y[i] = 0.0;
                let p_end = lp[i] + fill_count[i];
                for p in lp[i]..p_end {
                    y[li[p]] -= lx[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                li[p_end] = k;
                lx[p_end] = l_ki;
                fill_count[i] += 1;
                idx += 1;
            }
            if !(d[k] > 0.0) || !d[k].is_finite() {
                return Err(Error::CholeskyFailure { index: k });
            }
        }

        Ok(Self { n, perm, iperm, lp, li, lx, d })
    }

    /// Solve A x = b for one right-hand side.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        let mut x = vec![0f64; n];
        for k in 0..n {
            x[k] = b[self.perm[k]];
        }
        // forward: L y = Pb
        for k in 0..n {
            let xk = x[k];
            if xk != 0.0 {
                for p in self.lp[k]..self.lp[k + 1] {
                    x[self.li[p]] -= self.lx[p] * xk;
                }
            }
        }
        for k in 0..n {
            x[k] /= self.d[k];
        }
        // backward: L' z = y
        for k in (0..n).rev() {
            let mut xk = x[k];
            for p in self.lp[k]..self.lp[k + 1] {
                xk -= self.lx[p] * x[self.li[p]];
            }
            x[k] = xk;
        }
        let mut out = vec![0f64; n];
        for k in 0..n {
            out[self.perm[k]] = x[k];
        }
        out
    }

    /// log|A| = sum of log pivots.
    pub fn logdet(&self) -> f64 {
        self.d.iter().map(|&v| v.ln()).sum()
    }

    /// Nonzeros of the triangular factor R (with PHP' = R'R), diagonal included.
    pub fn nnz_factor(&self) -> usize {
        self.li.len() + self.n
    }

    pub fn iperm(&self) -> &[usize] {
        &self.iperm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_spd_sparse(n: usize, extra: usize, rng: &mut StdRng) -> (CscMatrix, DMatrix<f64>) {
        // band + random off-diagonal couplings, diagonally dominant
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            dense[(i, i)] = 4.0 + rng.gen::<f64>();
            if i + 1 < n {
                let v = -0.5 - rng.gen::<f64>() * 0.5;
                dense[(i, i + 1)] = v;
                dense[(i + 1, i)] = v;
            }
        }
        for _ in 0..extra {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i != j {
                let v = -0.3 * rng.gen::<f64>();
                dense[(i, j)] += v;
                dense[(j, i)] += v;
            }
        }
        let mut trips = Vec::new();
        for c in 0..n {
            for r in 0..n {
                if dense[(r, c)] != 0.0 {
                    trips.push((r, c, dense[(r, c)]));
                }
            }
        }
        (CscMatrix::from_triplets(n, trips), dense)
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let a = CscMatrix::from_triplets(
            3,
            vec![(0, 0, 1.0), (2, 1, 3.0), (0, 0, 2.0), (1, 1, 1.0), (2, 1, 0.0)],
        );
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.col_ptr, vec![0, 1, 3, 3]);
        assert_eq!(a.row_idx, vec![0, 1, 2]);
        assert_eq!(a.values, vec![3.0, 1.0, 3.0]);
    }

    #[test]
    fn ldl_matches_dense_solve_and_logdet() {
        let mut rng = StdRng::seed_from_u64(1);
        for trial in 0..5 {
            let n = 40 + trial * 23;
            let (a, dense) = random_spd_sparse(n, 3 * n, &mut rng);
            let perm = amd_order(&a);
            let f = LdlFactor::new(&a, perm).unwrap();
            let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let x = f.solve(&b);
            let chol = dense.clone().cholesky().expect("dense SPD");
            let xd = chol.solve(&nalgebra::DVector::from_column_slice(&b));
            for i in 0..n {
                assert!((x[i] - xd[i]).abs() < 1e-9, "solve mismatch at {i}");
            }
            let ld_dense: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            assert!((f.logdet() - ld_dense).abs() < 1e-8 * ld_dense.abs().max(1.0));
        }
    }

    #[test]
    fn amd_is_a_permutation_and_reduces_grid_fill() {
        // 2D 5-point Laplacian pattern on a g x g grid
        let g = 20usize;
        let n = g * g;
        let idx = |r: usize, c: usize| r * g + c;
        let mut trips = Vec::new();
        for r in 0..g {
            for c in 0..g {
                let i = idx(r, c);
                trips.push((i, i, 4.0));
                if r + 1 < g {
                    trips.push((i, idx(r + 1, c), -1.0));
                    trips.push((idx(r + 1, c), i, -1.0));
                }
                if c + 1 < g {
                    trips.push((i, idx(r, c + 1), -1.0));
                    trips.push((idx(r, c + 1), i, -1.0));
                }
            }
        }
        let a = CscMatrix::from_triplets(n, trips);
        let perm = amd_order(&a);
        let mut seen = vec![false; n];
        for &p in &perm {
            assert!(!seen[p], "duplicate index in permutation");
            seen[p] = true;
        }
        let f_amd = LdlFactor::new(&a, perm).unwrap();
        let f_nat = LdlFactor::new(&a, (0..n).collect()).unwrap();
        assert!(
            f_amd.nnz_factor() < f_nat.nnz_factor(),
            "AMD fill {} should beat natural-order fill {}",
            f_amd.nnz_factor(),
            f_nat.nnz_factor()
        );
    }

    #[test]
    fn non_positive_definite_is_an_error() {
        let a = CscMatrix::from_triplets(2, vec![(0, 0, 1.0), (1, 1, -1.0)]);
        let r = LdlFactor::new(&a, vec![0, 1]);
        assert!(matches!(r, Err(Error::CholeskyFailure { .. })));
    }
}
