//! Sparse storage and the banded/bordered direct solvers behind the static
//! solve and the implicit midpoint stepper.
//!
//! The closed loop couples a banded plant block to a handful of controller
//! states through dense border rows and columns (an arrowhead matrix). The
//! [`BorderedSolver`] factors the banded block once with partial pivoting and
//! eliminates the border through a small dense Schur complement.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));

        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &t)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    /// Entry lookup (linear scan of the row).
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    /// `A x + Σ s_k v_k` with every row accumulated in double-word
    /// arithmetic, so the result is as accurate as if computed in twice the
    /// working precision and then rounded.
    pub fn affine_apply(&self, x: &[f64], extra: &[(&[f64], f64)]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| {
                let mut acc = CompensatedSum::default();
                for (c, v) in self.row(r) {
                    acc.add_product(v, x[c]);
                }
                for &(v, s) in extra {
                    acc.add_product(s, v[r]);
                }
                acc.value()
            })
            .collect()
    }

    /// `alpha * self + beta * I` (square matrices only).
    pub fn scaled_plus_identity(&self, alpha: f64, beta: f64) -> Self {
        assert_eq!(self.nrows, self.ncols);
        let mut t: Vec<_> = self.triplets().map(|(r, c, v)| (r, c, alpha * v)).collect();
        t.extend((0..self.nrows).map(|i| (i, i, beta)));
        Self::from_triplets(self.nrows, self.ncols, &t)
    }

    /// Symmetric permutation `P A Pᵀ` where `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.nrows);
        let mut inv = vec![0usize; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let t: Vec<_> = self
            .triplets()
            .map(|(r, c, v)| (inv[r], inv[c], v))
            .collect();
        Self::from_triplets(self.nrows, self.ncols, &t)
    }

    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows)
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }
}

/// Running sum kept as an unevaluated pair `hi + lo` using error-free
/// transformations (TwoSum, FMA-based TwoProduct).
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    hi: f64,
    lo: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.hi + x;
        let z = t - self.hi;
        self.lo += (self.hi - (t - z)) + (x - z);
        self.hi = t;
    }

    #[inline]
    pub fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        self.lo += a.mul_add(b, -p);
        self.add(p);
    }

    pub fn value(&self) -> f64 {
        self.hi + self.lo
    }

    /// The sum as a rounded value and its rounding error.
    pub fn split(&self) -> (f64, f64) {
        let v = self.hi + self.lo;
        (v, (self.hi - v) + self.lo)
    }
}

/// LU factorization of a banded matrix with partial pivoting.
///
/// Row `i` stores columns `i - kl ..= i + ku + kl`; the extra `kl`
/// super-diagonals absorb fill-in from row interchanges.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    band: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedLu {
    pub fn factor(n: usize, kl: usize, ku: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let width = 2 * kl + ku + 1;
        let mut band = vec![0.0; n * width];
        for (r, c, v) in entries {
            if r >= n || c >= n || c + kl < r || c > r + ku {
                return Err(Error::Dimension(format!(
                    "entry ({r}, {c}) outside band kl={kl}, ku={ku}"
                )));
            }
            band[r * width + c + kl - r] += v;
        }
        let mut lu = Self {
            n,
            kl,
            ku,
            width,
            band,
            pivots: vec![0; n],
        };
        lu.eliminate()?;
        Ok(lu)
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> usize {
        r * self.width + c + self.kl - r
    }

    fn eliminate(&mut self) -> Result<()> {
        let n = self.n;
        let scale = self.band.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            let last_row = (i + self.kl).min(n - 1);
            let last_col = (i + self.kl + self.ku).min(n - 1);
            let mut p = i;
            let mut best = self.band[self.at(i, i)].abs();
            for r in i + 1..=last_row {
                let v = self.band[self.at(r, i)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || best <= f64::EPSILON * scale {
                return Err(Error::Singular(format!("zero pivot in column {i}")));
            }
            self.pivots[i] = p;
            if p != i {
                for c in i..=last_col {
                    let a = self.at(i, c);
                    let b = self.at(p, c);
                    self.band.swap(a, b);
                }
            }
            let pivot = self.band[self.at(i, i)];
            for r in i + 1..=last_row {
                let ri = self.at(r, i);
                let l = self.band[ri] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.band[ri] = l;
                for c in i + 1..=last_col {
                    let ic = self.at(i, c);
                    let rc = self.at(r, c);
                    self.band[rc] -= l * self.band[ic];
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        for i in 0..n {
            let p = self.pivots[i];
            if p != i {
                b.swap(i, p);
            }
            let bi = b[i];
            if bi != 0.0 {
                for r in i + 1..=(i + self.kl).min(n - 1) {
                    b[r] -= self.band[self.at(r, i)] * bi;
                }
            }
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for c in i + 1..=(i + self.kl + self.ku).min(n - 1) {
                s -= self.band[self.at(i, c)] * b[c];
            }
            b[i] = s / self.band[self.at(i, i)];
        }
    }

    /// Ratio of the largest to the smallest pivot magnitude.
    pub fn pivot_ratio(&self) -> f64 {
        let (lo, hi) = (0..self.n)
            .map(|i| self.band[self.at(i, i)].abs())
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi / lo
    }
}

/// Direct solver for a matrix whose leading block is banded and whose last
/// `border` rows and columns are dense.
#[derive(Debug, Clone)]
pub struct BorderedSolver {
    /// `perm[new] = old`.
    perm: Vec<usize>,
    block: BandedLu,
    border: usize,
    /// `B⁻¹ C`, one column per border unknown.
    block_inv_c: Vec<Vec<f64>>,
    /// Border rows restricted to the banded unknowns.
    r_rows: Vec<Vec<(usize, f64)>>,
    schur: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl BorderedSolver {
    /// Factors `matrix` after the symmetric permutation `perm` (`perm[new] =
    /// old`), treating the last `border` permuted unknowns as dense.
    pub fn factor(matrix: &CsrMatrix, perm: &[usize], border: usize) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n || perm.len() != n || border > n {
            return Err(Error::Dimension("bordered solver needs a square matrix and a full permutation".into()));
        }
        let pm = matrix.permuted(perm);
        let nb = n - border;

        let mut kl = 0usize;
        let mut ku = 0usize;
        let mut block_entries = Vec::new();
        let mut c_cols = vec![vec![0.0; nb]; border];
        let mut r_rows = vec![Vec::new(); border];
        let mut d = DMatrix::<f64>::zeros(border, border);
        for (r, c, v) in pm.triplets() {
            match (r < nb, c < nb) {
                (true, true) => {
                    kl = kl.max(r.saturating_sub(c));
                    ku = ku.max(c.saturating_sub(r));
                    block_entries.push((r, c, v));
                }
                (true, false) => c_cols[c - nb][r] += v,
                (false, true) => r_rows[r - nb].push((c, v)),
                (false, false) => d[(r - nb, c - nb)] += v,
            }
        }
        let block = if nb > 0 {
            BandedLu::factor(nb, kl, ku, block_entries)?
        } else {
            BandedLu::factor(0, 0, 0, std::iter::empty())?
        };

        let mut block_inv_c = c_cols;
        for col in &mut block_inv_c {
            if nb > 0 {
                block.solve_in_place(col);
            }
        }

        let schur = if border > 0 {
            let mut s = d;
            for (i, row) in r_rows.iter().enumerate() {
                for (j, col) in block_inv_c.iter().enumerate() {
                    let rz: f64 = row.iter().map(|&(c, v)| v * col[c]).sum();
                    s[(i, j)] -= rz;
                }
            }
            let lu = s.lu();
            if !lu.is_invertible() {
                return Err(Error::Singular("border Schur complement".into()));
            }
            Some(lu)
        } else {
            None
        };

        Ok(Self {
            perm: perm.to_vec(),
            block,
            border,
            block_inv_c,
            r_rows,
            schur,
        })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn block(&self) -> &BandedLu {
        &self.block
    }

    /// Solves `M x = b` (both in the original ordering).
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let nb = n - self.border;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        let (top, bottom) = y.split_at_mut(nb);
        if nb > 0 {
            self.block.solve_in_place(top);
        }
        if let Some(lu) = &self.schur {
            let rhs = DVector::from_iterator(
                self.border,
                self.r_rows
                    .iter()
                    .zip(bottom.iter())
                    .map(|(row, &bi)| bi - row.iter().map(|&(c, v)| v * top[c]).sum::<f64>()),
            );
            let xb = lu.solve(&rhs).expect("Schur complement checked invertible");
            for (j, col) in self.block_inv_c.iter().enumerate() {
                let s = xb[j];
                for (t, &cv) in top.iter_mut().zip(col) {
                    *t -= cv * s;
                }
            }
            bottom.copy_from_slice(xb.as_slice());
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

pub(crate) fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_banded(n: usize, kl: usize, ku: usize, rng: &mut ChaCha8Rng) -> CsrMatrix {
        let mut t = Vec::new();
        for r in 0..n {
            for c in r.saturating_sub(kl)..=(r + ku).min(n - 1) {
                t.push((r, c, rng.random_range(-1.0..1.0)));
            }
        }
        CsrMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn compensated_sum_cancels_exactly() {
        let mut acc = CompensatedSum::default();
        for v in [1e16, 1.0, -1e16, 1e-3] {
            acc.add(v);
        }
        assert_eq!(acc.value(), 1.001);
        let naive: f64 = [1e16, 1.0, -1e16, 1e-3].iter().sum();
        assert_ne!(naive, 1.001);

        let a = CsrMatrix::from_triplets(1, 2, &[(0, 0, 1.0 + 2f64.powi(-30)), (0, 1, -1.0)]);
        let x = [1.0 - 2f64.powi(-30), 1.0];
        assert_eq!(a.mul_vec(&x)[0], 0.0);
        let y = a.affine_apply(&x, &[(&[0.5], 2.0)]);
        assert_eq!(y[0], 1.0);
        let y = a.affine_apply(&x, &[]);
        assert_eq!(y[0], -(2f64.powi(-60)));
    }

    #[test]
    fn csr_duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, -1.0)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.mul_vec(&[1.0, 2.0]), vec![6.0, -1.0]);
    }

    #[test]
    fn banded_lu_solves_with_pivoting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let m = random_banded(n, 2, 3, &mut rng);
        let lu = BandedLu::factor(n, 2, 3, m.triplets()).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let mut b = m.mul_vec(&x);
        lu.solve_in_place(&mut b);
        for (a, e) in b.iter().zip(&x) {
            assert!((a - e).abs() < 1e-8, "{a} vs {e}");
        }
    }

    #[test]
    fn banded_lu_detects_singular() {
        let m = CsrMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 0.0), (2, 2, 1.0)]);
        assert!(BandedLu::factor(3, 0, 0, m.triplets()).is_err());
    }

    #[test]
    fn bordered_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 30;
        let border = 3;
        let mut t: Vec<_> = random_banded(n, 1, 1, &mut rng).triplets().collect();
        for i in 0..n {
            t.push((i, i, 4.0));
        }
        for k in n - border..n {
            for j in 0..n {
                t.push((k, j, rng.random_range(-0.5..0.5)));
                t.push((j, k, rng.random_range(-0.5..0.5)));
            }
        }
        let m = CsrMatrix::from_triplets(n, n, &t);
        // Scrambled ordering whose inverse lists the banded part first.
        let perm: Vec<usize> = (0..n).collect();
        let solver = BorderedSolver::factor(&m, &perm, border).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (0.3 * i as f64).sin()).collect();
        let x = solver.solve(&b);
        let r = m.mul_vec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-10);
        }
        let dense = m.to_dense().lu().solve(&DVector::from_vec(b.clone())).unwrap();
        for (a, e) in x.iter().zip(dense.iter()) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn permutation_round_trip() {
        let m = CsrMatrix::from_triplets(3, 3, &[(0, 1, 2.0), (2, 0, 5.0), (1, 1, 1.0)]);
        let perm = [2, 0, 1];
        let p = m.permuted(&perm);
        // new index of old 0 is 1, of old 1 is 2, of old 2 is 0.
        assert_eq!(p.get(1, 2), 2.0);
        assert_eq!(p.get(0, 1), 5.0);
        assert_eq!(p.get(2, 2), 1.0);
    }
}
