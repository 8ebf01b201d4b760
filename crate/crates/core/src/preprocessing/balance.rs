//! Symmetric matrix balancing.
//!
//! Finds a positive scaling vector `s` such that every unmasked row of
//! `diag(s)·A·diag(s)` sums to the mean row sum of `A`. The update is the
//! square-root (symmetric) Sinkhorn step `s_i <- s_i * sqrt(target / r_i)`,
//! which keeps the scaled matrix symmetric at every iteration.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::genomic_io::SparseContactRecord;

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERATIONS: usize = 3000;

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        ensure!(rows.iter().all(|r| r.len() == n), "matrix is not square");
        Ok(Self {
            n,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    /// Symmetric matrix from upper-triangular records.
    pub fn from_records(records: &[SparseContactRecord], n: usize) -> Result<Self> {
        let mut m = Self::zeros(n);
        for r in records {
            let (i, j) = (r.bin_i as usize, r.bin_j as usize);
            ensure!(i < n && j < n, "record ({i},{j}) outside a {n}-bin matrix");
            m.set(i, j, r.count);
            m.set(j, i, r.count);
        }
        Ok(m)
    }

    /// Non-zero upper-triangular entries.
    pub fn to_records(&self) -> Vec<SparseContactRecord> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i..self.n {
                let v = self.get(i, j);
                if v != 0.0 {
                    out.push(SparseContactRecord {
                        bin_i: i as u32,
                        bin_j: j as u32,
                        count: v,
                    });
                }
            }
        }
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (i + 1..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Balanced {
    pub matrix: DenseMatrix,
    /// Zero for masked (all-zero) rows.
    pub scaling: Vec<f64>,
    pub iterations: usize,
    /// Final `(max - min) / mean` of the unmasked row sums.
    pub residual: f64,
}

fn dispersion(sums: &[f64], mask: &[bool]) -> f64 {
    let (mut lo, mut hi, mut total, mut k) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for (s, &keep) in sums.iter().zip(mask) {
        if keep {
            lo = lo.min(*s);
            hi = hi.max(*s);
            total += s;
            k += 1;
        }
    }
    if k == 0 {
        return 0.0;
    }
    (hi - lo) / (total / k as f64)
}

pub fn kr_balance(matrix: &DenseMatrix, tolerance: f64, max_iterations: usize) -> Result<Balanced> {
    let n = matrix.n();
    ensure!(tolerance > 0.0, "tolerance must be positive");
    for (idx, v) in matrix.as_slice().iter().enumerate() {
        ensure!(
            v.is_finite() && *v >= 0.0,
            "matrix entry ({}, {}) = {v} is negative or non-finite",
            idx / n.max(1),
            idx % n.max(1)
        );
    }
    ensure!(matrix.is_symmetric(), "matrix is not symmetric");

    let raw_sums = matrix.row_sums();
    let mask: Vec<bool> = raw_sums.iter().map(|s| *s > 0.0).collect();
    let active = mask.iter().filter(|m| **m).count();
    if active == 0 {
        return Ok(Balanced {
            matrix: matrix.clone(),
            scaling: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let target = raw_sums.iter().sum::<f64>() / active as f64;

    let mut scaling: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mut sums = vec![0.0; n];
    let mut residual;
    let mut iterations = 0;
    loop {
        // r_i = s_i * (A s)_i
        for i in 0..n {
            sums[i] = if mask[i] {
                let row = matrix.row(i);
                scaling[i] * row.iter().zip(&scaling).map(|(a, s)| a * s).sum::<f64>()
            } else {
                0.0
            };
        }
        residual = dispersion(&sums, &mask);
        if residual <= tolerance || iterations >= max_iterations {
            break;
        }
        for i in 0..n {
            if mask[i] {
                scaling[i] *= (target / sums[i]).sqrt();
            }
        }
        iterations += 1;
    }
    if residual > tolerance || !residual.is_finite() {
        return Err(Error::Convergence {
            iterations,
            residual,
        });
    }

    let mut balanced = DenseMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let v = scaling[i] * matrix.get(i, j) * scaling[j];
            balanced.set(i, j, v);
            balanced.set(j, i, v);
        }
    }
    Ok(Balanced {
        matrix: balanced,
        scaling,
        iterations,
        residual,
    })
}

/// Scaling found by [`kr_balance_sparse`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBalance {
    pub records: Vec<SparseContactRecord>,
    pub scaling: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// The same balancing as [`kr_balance`] on upper-triangular records of an
/// `n`-bin symmetric matrix, without materialising it.
pub fn kr_balance_sparse(
    records: &[SparseContactRecord],
    n: usize,
    tolerance: f64,
    max_iterations: usize,
) -> Result<SparseBalance> {
    ensure!(tolerance > 0.0, "tolerance must be positive");
    for r in records {
        ensure!(
            r.count.is_finite() && r.count >= 0.0,
            "entry ({}, {}) = {} is negative or non-finite",
            r.bin_i,
            r.bin_j,
            r.count
        );
        ensure!(
            r.bin_i <= r.bin_j && (r.bin_j as usize) < n,
            "record ({}, {}) is not upper-triangular inside {n} bins",
            r.bin_i,
            r.bin_j
        );
    }
    let row_sums = |s: &[f64]| -> Vec<f64> {
        let mut sums = vec![0.0; n];
        for r in records {
            let (i, j) = (r.bin_i as usize, r.bin_j as usize);
            sums[i] += s[i] * r.count * s[j];
            if i != j {
                sums[j] += s[j] * r.count * s[i];
            }
        }
        sums
    };
    let raw = row_sums(&vec![1.0; n]);
    let mask: Vec<bool> = raw.iter().map(|s| *s > 0.0).collect();
    let active = mask.iter().filter(|m| **m).count();
    let mut scaling: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    if active == 0 {
        return Ok(SparseBalance {
            records: records.to_vec(),
            scaling,
            iterations: 0,
            residual: 0.0,
        });
    }
    let target = raw.iter().sum::<f64>() / active as f64;
    let mut iterations = 0;
    let mut residual;
    loop {
        let sums = row_sums(&scaling);
        residual = dispersion(&sums, &mask);
        if residual <= tolerance || iterations >= max_iterations {
            break;
        }
        for i in 0..n {
            if mask[i] {
                scaling[i] *= (target / sums[i]).sqrt();
            }
        }
        iterations += 1;
    }
    if residual > tolerance || !residual.is_finite() {
        return Err(Error::Convergence {
            iterations,
            residual,
        });
    }
    let balanced = records
        .iter()
        .map(|r| SparseContactRecord {
            count: scaling[r.bin_i as usize] * r.count * scaling[r.bin_j as usize],
            ..*r
        })
        .collect();
    Ok(SparseBalance {
        records: balanced,
        scaling,
        iterations,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn already_balanced_has_equal_scales() {
        let b = kr_balance(&m(&[&[2.0, 1.0], &[1.0, 2.0]]), 1e-8, 3000).unwrap();
        assert_eq!(b.scaling[0], b.scaling[1]);
        let sums = b.matrix.row_sums();
        assert_eq!(sums[0], sums[1]);
    }

    #[test]
    fn identity_unchanged_up_to_scale() {
        let mut id = DenseMatrix::zeros(4);
        (0..4).for_each(|i| id.set(i, i, 1.0));
        let b = kr_balance(&id, 1e-8, 3000).unwrap();
        let c = b.matrix.get(0, 0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(b.matrix.get(i, j), if i == j { c } else { 0.0 });
            }
        }
    }

    #[test]
    fn two_by_two_against_fixed_point_oracle() {
        let a = m(&[&[4.0, 1.0], &[1.0, 1.0]]);
        let b = kr_balance(&a, 1e-12, 3000).unwrap();
        let sums = b.matrix.row_sums();
        assert!((sums[0] - sums[1]).abs() <= 1e-8 * sums[0]);
        // balanced = diag(s) A diag(s) by direct multiplication
        for i in 0..2 {
            for j in 0..2 {
                let direct = b.scaling[i] * a.get(i, j) * b.scaling[j];
                assert!((direct - b.matrix.get(i, j)).abs() < 1e-15);
            }
        }
        // Closed form: with s = (x, y), need 4x^2 + xy = xy + y^2 = 3.5,
        // so y = 2x and 6x^2 = 3.5.
        let x = (3.5f64 / 6.0).sqrt();
        assert!((b.scaling[0] - x).abs() < 1e-9);
        assert!((b.scaling[1] - 2.0 * x).abs() < 1e-9);
    }

    #[test]
    fn zero_rows_masked_and_restored() {
        let a = m(&[&[1.0, 0.0, 2.0], &[0.0, 0.0, 0.0], &[2.0, 0.0, 5.0]]);
        let b = kr_balance(&a, 1e-10, 3000).unwrap();
        assert_eq!(b.scaling[1], 0.0);
        assert!(b.matrix.row(1).iter().all(|v| *v == 0.0));
        let sums = b.matrix.row_sums();
        assert!((sums[0] - sums[2]).abs() < 1e-9 * sums[0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            kr_balance(&m(&[&[1.0, 2.0], &[3.0, 1.0]]), 1e-8, 10),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            kr_balance(&m(&[&[1.0, -2.0], &[-2.0, 1.0]]), 1e-8, 10),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn reports_non_convergence() {
        let a = m(&[&[10.0, 1.0, 0.5], &[1.0, 1.0, 0.1], &[0.5, 0.1, 3.0]]);
        match kr_balance(&a, 1e-12, 2) {
            Err(Error::Convergence { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sparse_matches_dense() {
        let rows = vec![
            vec![4.0, 1.0, 0.0, 2.0],
            vec![1.0, 3.0, 5.0, 0.0],
            vec![0.0, 5.0, 1.0, 1.0],
            vec![2.0, 0.0, 1.0, 0.0],
        ];
        let m = DenseMatrix::from_rows(&rows).unwrap();
        let dense = kr_balance(&m, 1e-12, 10_000).unwrap();
        let sparse = kr_balance_sparse(&m.to_records(), 4, 1e-12, 10_000).unwrap();
        for (a, b) in dense.scaling.iter().zip(&sparse.scaling) {
            assert!((a - b).abs() < 1e-12);
        }
        for r in &sparse.records {
            assert!((r.count - dense.matrix.get(r.bin_i as usize, r.bin_j as usize)).abs() < 1e-12);
        }
    }
}
