//! Compressed sparse row storage for kernels on finite site sets.

/// Square sparse matrix in CSR layout with sorted column indices.
///
/// Only strictly nonzero entries are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n × n` matrix, summing duplicate `(row, col)` entries and
    /// dropping entries whose sum is exactly zero.
    ///
    /// Panics if an index is out of range.
    pub fn from_triplets<I>(n: usize, triplets: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, j, v) in triplets {
            assert!(i < n && j < n, "triplet ({i}, {j}) outside {n}x{n}");
            rows[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            let mut iter = row.into_iter().peekable();
            while let Some((j, mut v)) = iter.next() {
                while let Some(&(j2, v2)) = iter.peek() {
                    if j2 != j {
                        break;
                    }
                    v += v2;
                    iter.next();
                }
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_cols(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_values(&self, i: usize) -> &[f64] {
        &self.values[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.row_cols(i)
            .iter()
            .copied()
            .zip(self.row_values(i).iter().copied())
    }

    /// Entry `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let cols = self.row_cols(i);
        match cols.binary_search(&j) {
            Ok(pos) => self.row_values(i)[pos],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// `Σ_j a(i, j) w(j)` for every row.
    pub fn weighted_row_sums(&self, weights: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * weights[j]).sum())
            .collect()
    }

    /// `Σ_i a(i, j) w(i)` for every column.
    pub fn weighted_col_sums(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, j, v) in self.triplets() {
            out[j] += v * weights[i];
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(self.n, self.triplets().map(|(i, j, v)| (j, i, v)))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Multiplies every stored entry `(i, j)` by `w(j)`.
    pub fn with_column_weights(&self, weights: &[f64]) -> Self {
        let mut out = self.clone();
        for (v, &j) in out.values.iter_mut().zip(&self.col_idx) {
            *v *= weights[j];
        }
        out
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `out(i) = Σ_j a(i, j) x(j)`.
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.n) {
            *o = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.triplets()
            .all(|(i, j, v)| (self.get(j, i) - v).abs() <= tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_merge_and_zeros_drop() {
        let m = CsrMatrix::from_triplets(2, [(0, 1, 0.5), (0, 1, 0.5), (1, 0, 1.0), (1, 1, 0.0)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn sums_and_transpose() {
        let m = CsrMatrix::from_triplets(3, [(0, 1, 1.0), (0, 2, 2.0), (2, 1, 4.0)]);
        assert_eq!(m.weighted_row_sums(&[1.0; 3]), vec![3.0, 0.0, 4.0]);
        assert_eq!(m.weighted_col_sums(&[1.0; 3]), vec![0.0, 5.0, 2.0]);
        let t = m.transpose();
        assert_eq!(t.get(1, 2), 4.0);
        assert_eq!(t.transpose(), m);
        let mut out = vec![0.0; 3];
        m.mul_vec_into(&[1.0, 1.0, 1.0], &mut out);
        assert_eq!(out, vec![3.0, 0.0, 4.0]);
    }
}
