//! Compressed sparse column matrices.

use std::io::Write;

use crate::error::{Error, Result};

/// Column-compressed sparse matrix with sorted, duplicate-free row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowind: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowind: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            colptr: (0..=n).collect(),
            rowind: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Build from `(row, col, value)` triplets; duplicates are summed.
    /// Explicit zeros are kept so the pattern depends only on the input
    /// positions.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::InvalidProblem(format!(
                    "triplet ({r}, {c}) outside a {nrows}x{ncols} matrix"
                )));
            }
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            rows[next[c]] = r;
            vals[next[c]] = v;
            next[c] += 1;
        }
        let mut colptr = Vec::with_capacity(ncols + 1);
        let mut rowind = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        colptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for c in 0..ncols {
            order.clear();
            order.extend(counts[c]..counts[c + 1]);
            order.sort_by_key(|&k| rows[k]);
            for &k in &order {
                if rowind.len() > colptr[c] && *rowind.last().unwrap() == rows[k] {
                    *values.last_mut().unwrap() += vals[k];
                } else {
                    rowind.push(rows[k]);
                    values.push(vals[k]);
                }
            }
            colptr.push(rowind.len());
        }
        Ok(Self {
            nrows,
            ncols,
            colptr,
            rowind,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.colptr[j]..self.colptr[j + 1];
        self.rowind[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.colptr[j]..self.colptr[j + 1];
        match self.rowind[range.clone()].binary_search(&i) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.nrows + 1];
        for &r in &self.rowind {
            counts[r + 1] += 1;
        }
        for r in 0..self.nrows {
            counts[r + 1] += counts[r];
        }
        let mut next = counts.clone();
        let mut rowind = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                rowind[next[i]] = j;
                values[next[i]] = v;
                next[i] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            colptr: counts,
            rowind,
            values,
        }
    }

    /// `y = M x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for (j, &xj) in x.iter().enumerate().take(self.ncols) {
            if xj != 0.0 {
                for (i, v) in self.col(j) {
                    y[i] += v * xj;
                }
            }
        }
        y
    }

    /// `y = M^T x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.ncols)
            .map(|j| self.col(j).map(|(i, v)| v * x[i]).sum())
            .collect()
    }

    /// `y = M x` for a symmetric matrix stored as its upper triangle.
    pub fn sym_upper_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    /// Upper triangle (including the diagonal).
    pub fn upper_triangle(&self) -> Self {
        let mut colptr = vec![0];
        let mut rowind = Vec::new();
        let mut values = Vec::new();
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                if i <= j {
                    rowind.push(i);
                    values.push(v);
                }
            }
            colptr.push(rowind.len());
        }
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            colptr,
            rowind,
            values,
        }
    }

    /// Full symmetric matrix from its upper triangle.
    pub fn symmetric_from_upper(&self) -> Self {
        let mut t = Vec::with_capacity(2 * self.nnz());
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                t.push((i, j, v));
                if i != j {
                    t.push((j, i, v));
                }
            }
        }
        Self::from_triplets(self.nrows, self.ncols, &t).expect("indices in range")
    }

    /// Largest `|M_ij - M_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Scale to `diag(left) M diag(right)` in place.
    pub fn scale(&mut self, left: &[f64], right: &[f64]) {
        for j in 0..self.ncols {
            for k in self.colptr[j]..self.colptr[j + 1] {
                self.values[k] *= left[self.rowind[k]] * right[j];
            }
        }
    }

    pub fn scale_values(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    /// Infinity norm of every column.
    pub fn col_inf_norms(&self) -> Vec<f64> {
        (0..self.ncols)
            .map(|j| self.col(j).fold(0.0, |m: f64, (_, v)| m.max(v.abs())))
            .collect()
    }

    /// Infinity norm of every row.
    pub fn row_inf_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.nrows];
        for (&i, &v) in self.rowind.iter().zip(&self.values) {
            out[i] = out[i].max(v.abs());
        }
        out
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// Matrix-Market coordinate format. With `symmetric`, `self` must hold
    /// an upper triangle and is written as the lower triangle the format
    /// expects.
    pub fn write_matrix_market<W: Write>(&self, mut out: W, symmetric: bool) -> Result<()> {
        let kind = if symmetric { "symmetric" } else { "general" };
        writeln!(out, "%%MatrixMarket matrix coordinate real {kind}")?;
        writeln!(out, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                let (r, c) = if symmetric { (j, i) } else { (i, j) };
                writeln!(out, "{} {} {:e}", r + 1, c + 1, v)?;
            }
        }
        Ok(())
    }
}

/// Write a dense vector in Matrix-Market array format.
pub fn write_vector_market<W: Write>(mut out: W, v: &[f64]) -> Result<()> {
    writeln!(out, "%%MatrixMarket matrix array real general")?;
    writeln!(out, "{} 1", v.len())?;
    for x in v {
        writeln!(out, "{x:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CscMatrix {
        CscMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 4.0), (1, 0, 1.0), (0, 1, 1.0), (2, 2, 2.0), (2, 2, 1.0), (1, 1, 3.0)],
        )
        .unwrap()
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = sample();
        assert_eq!(m.colptr, vec![0, 2, 4, 5]);
        assert_eq!(m.rowind, vec![0, 1, 0, 1, 2]);
        assert_eq!(m.get(2, 2), 3.0);
        assert_eq!(m.get(2, 0), 0.0);
    }

    #[test]
    fn products_match_dense() {
        let m = CscMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (1, 2, -2.0), (0, 1, 3.0)]).unwrap();
        let x = [1.0, 2.0, 3.0];
        assert_eq!(m.mul_vec(&x), vec![7.0, -6.0]);
        assert_eq!(m.tr_mul_vec(&[1.0, 1.0]), vec![1.0, 3.0, -2.0]);
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
    }

    #[test]
    fn symmetric_upper_product() {
        let full = sample();
        let upper = full.upper_triangle();
        let x = [1.0, -1.0, 2.0];
        assert_eq!(upper.sym_upper_mul_vec(&x), full.mul_vec(&x));
        assert_eq!(upper.symmetric_from_upper(), full);
        assert_eq!(full.asymmetry(), 0.0);
    }

    #[test]
    fn out_of_range_triplet_rejected() {
        assert!(CscMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn matrix_market_header() {
        let mut buf = Vec::new();
        sample().upper_triangle().write_matrix_market(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "%%MatrixMarket matrix coordinate real symmetric");
        assert_eq!(lines.next().unwrap(), "3 3 4");
    }
}
