//! Sparse LDL^T factorization of symmetric quasi-definite matrices.
//!
//! Up-looking factorization over the elimination tree, with a reverse
//! Cuthill-McKee fill-reducing permutation. The symbolic analysis is done
//! once per sparsity pattern; numeric refactorization reuses it.

use std::collections::VecDeque;

use super::csc::CscMatrix;
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Reverse Cuthill-McKee ordering of the graph of a symmetric matrix given
/// by its upper triangle. Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(upper: &CscMatrix) -> Vec<usize> {
    let n = upper.ncols;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..n {
        for (i, _) in upper.col(j) {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree[v], v));

    for &root in &by_degree {
        if visited[root] {
            continue;
        }
        let start = pseudo_peripheral(root, &adj, &degree);
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Node of (approximately) maximal eccentricity in `root`'s component.
fn pseudo_peripheral(root: usize, adj: &[Vec<usize>], degree: &[usize]) -> usize {
    let mut current = root;
    let mut best_depth = 0;
    for _ in 0..8 {
        let levels = bfs_levels(current, adj);
        let depth = *levels.iter().filter(|&&l| l != NONE).max().unwrap_or(&0);
        if depth <= best_depth && current != root {
            break;
        }
        best_depth = depth;
        let candidate = levels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == depth)
            .min_by_key(|&(v, _)| (degree[v], v))
            .map(|(v, _)| v)
            .unwrap_or(current);
        if candidate == current {
            break;
        }
        current = candidate;
    }
    current
}

fn bfs_levels(start: usize, adj: &[Vec<usize>]) -> Vec<usize> {
    let mut level = vec![NONE; adj.len()];
    level[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if level[w] == NONE {
                level[w] = level[v] + 1;
                queue.push_back(w);
            }
        }
    }
    level
}

/// Symmetric permutation `P M P^T` of an upper-triangular matrix, returned
/// as an upper triangle, plus the map from input entries to output entries.
fn permute_upper(upper: &CscMatrix, iperm: &[usize]) -> (CscMatrix, Vec<usize>) {
    let n = upper.ncols;
    let mut counts = vec![0usize; n + 1];
    for j in 0..n {
        for (i, _) in upper.col(j) {
            counts[iperm[i].max(iperm[j]) + 1] += 1;
        }
    }
    for c in 0..n {
        counts[c + 1] += counts[c];
    }
    let mut next = counts.clone();
    let nnz = upper.nnz();
    let mut rowind = vec![0; nnz];
    let mut values = vec![0.0; nnz];
    let mut slot = vec![0; nnz];
    for j in 0..n {
        for k in upper.colptr[j]..upper.colptr[j + 1] {
            let i = upper.rowind[k];
            let (r, c) = {
                let (a, b) = (iperm[i], iperm[j]);
                (a.min(b), a.max(b))
            };
            rowind[next[c]] = r;
            values[next[c]] = upper.values[k];
            slot[k] = next[c];
            next[c] += 1;
        }
    }
    (
        CscMatrix {
            nrows: n,
            ncols: n,
            colptr: counts,
            rowind,
            values,
        },
        slot,
    )
}

/// Reusable LDL^T factorization.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    perm: Vec<usize>,
    /// Permuted upper triangle and the map from input entry to its slot.
    permuted: CscMatrix,
    slot: Vec<usize>,
    etree: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
}

impl LdlFactor {
    /// Analyse and factor a symmetric matrix given by its upper triangle.
    pub fn new(upper: &CscMatrix) -> Result<Self> {
        let perm = reverse_cuthill_mckee(upper);
        Self::with_permutation(upper, perm)
    }

    pub fn with_permutation(upper: &CscMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = upper.ncols;
        if upper.nrows != n || perm.len() != n {
            return Err(Error::InvalidProblem("LDL input must be square".into()));
        }
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let (permuted, slot) = permute_upper(upper, &iperm);

        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for (i, _) in permuted.col(j) {
                if i > j {
                    return Err(Error::InvalidProblem("LDL input is not upper triangular".into()));
                }
                let mut i = i;
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let total = lp[n];
        let mut f = Self {
            n,
            perm,
            permuted,
            slot,
            etree,
            lp,
            li: vec![0; total],
            lx: vec![0.0; total],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
        };
        f.factor_numeric()?;
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.lp[self.n]
    }

    /// Refactor with new values on the same pattern as the analysed input.
    pub fn refactor(&mut self, upper: &CscMatrix) -> Result<()> {
        if upper.nnz() != self.slot.len() {
            return Err(Error::InvalidProblem(
                "refactor requires the analysed sparsity pattern".into(),
            ));
        }
        for (k, &s) in self.slot.iter().enumerate() {
            self.permuted.values[s] = upper.values[k];
        }
        self.factor_numeric()
    }

    fn factor_numeric(&mut self) -> Result<()> {
        let n = self.n;
        let a = &self.permuted;
        let mut next_in_col: Vec<usize> = self.lp[..n].to_vec();
        let mut y_vals = vec![0.0; n];
        let mut y_used = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];

        for k in 0..n {
            let mut nnz_y = 0;
            self.d[k] = 0.0;
            for (b, v) in a.col(k) {
                if b == k {
                    self.d[k] = v;
                    continue;
                }
                y_vals[b] = v;
                if !y_used[b] {
                    y_used[b] = true;
                    elim[0] = b;
                    let mut nnz_e = 1;
                    let mut next = self.etree[b];
                    while next != NONE && next < k {
                        if y_used[next] {
                            break;
                        }
                        y_used[next] = true;
                        elim[nnz_e] = next;
                        nnz_e += 1;
                        next = self.etree[next];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        y_idx[nnz_y] = elim[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = y_idx[i];
                let tmp = next_in_col[c];
                let yc = y_vals[c];
                for j in self.lp[c]..tmp {
                    y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[tmp] = k;
                self.lx[tmp] = yc * self.dinv[c];
                self.d[k] -= yc * self.lx[tmp];
                next_in_col[c] += 1;
                y_vals[c] = 0.0;
                y_used[c] = false;
            }
            if self.d[k] == 0.0 || !self.d[k].is_finite() {
                return Err(Error::ZeroPivot(self.perm[k]));
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        Ok(())
    }

    /// Number of negative pivots (inertia check).
    pub fn negative_pivots(&self) -> usize {
        self.d.iter().filter(|&&d| d < 0.0).count()
    }

    /// Solve `M x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                x[self.li[j]] -= self.lx[j] * xi;
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                xi -= self.lx[j] * x[self.li[j]];
            }
            x[i] = xi;
        }
        for (k, &p) in self.perm.iter().enumerate() {
            b[p] = x[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, density: f64, rng: &mut ChaCha8Rng) -> CscMatrix {
        let mut t = Vec::new();
        for j in 0..n {
            t.push((j, j, n as f64));
            for i in 0..j {
                if rng.random::<f64>() < density {
                    t.push((i, j, rng.random_range(-1.0..1.0)));
                }
            }
        }
        CscMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn solves_random_spd_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 5, 30, 80] {
            let upper = random_spd(n, 0.1, &mut rng);
            let f = LdlFactor::new(&upper).unwrap();
            let full = upper.symmetric_from_upper();
            let want: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut b = full.mul_vec(&want);
            f.solve_in_place(&mut b);
            for (a, w) in b.iter().zip(&want) {
                assert!((a - w).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quasi_definite_inertia() {
        // [[2, 1], [1, -3]] has one negative pivot in any order.
        let m = CscMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 1, -3.0)]).unwrap();
        let f = LdlFactor::new(&m).unwrap();
        assert_eq!(f.negative_pivots(), 1);
        let mut b = vec![3.0, -2.0];
        f.solve_in_place(&mut b);
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refactor_matches_fresh_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let upper = random_spd(40, 0.15, &mut rng);
        let mut f = LdlFactor::new(&upper).unwrap();
        let mut scaled = upper.clone();
        for j in 0..scaled.ncols {
            for k in scaled.colptr[j]..scaled.colptr[j + 1] {
                if scaled.rowind[k] == j {
                    scaled.values[k] *= 3.0;
                }
            }
        }
        f.refactor(&scaled).unwrap();
        let g = LdlFactor::new(&scaled).unwrap();
        let mut a = vec![1.0; 40];
        let mut b = a.clone();
        f.solve_in_place(&mut a);
        g.solve_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pivot_reported() {
        let m = CscMatrix::from_triplets(2, 2, &[(0, 0, 0.0), (1, 1, 1.0)]).unwrap();
        assert!(matches!(LdlFactor::new(&m), Err(Error::ZeroPivot(0))));
    }

    #[test]
    fn rcm_reduces_bandwidth_of_shuffled_path() {
        // A path graph relabelled pseudo-randomly has large bandwidth;
        // RCM recovers bandwidth 1.
        let n = 50;
        let label: Vec<usize> = (0..n).map(|k| (k * 17) % n).collect();
        let mut t = Vec::new();
        for k in 0..n {
            t.push((label[k], label[k], 4.0));
            if k + 1 < n {
                let (a, b) = (label[k], label[k + 1]);
                t.push((a.min(b), a.max(b), -1.0));
            }
        }
        let m = CscMatrix::from_triplets(n, n, &t).unwrap();
        let perm = reverse_cuthill_mckee(&m);
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let mut band = 0;
        for j in 0..n {
            for (i, _) in m.col(j) {
                band = band.max(iperm[i].abs_diff(iperm[j]));
            }
        }
        assert_eq!(band, 1);
        let f = LdlFactor::new(&m).unwrap();
        assert_eq!(f.factor_nnz(), n - 1);
    }
}
