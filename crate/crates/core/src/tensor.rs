//! Dense row-major matrices and the few kernels the models need.
//!
//! Reductions over the node axis go through [`canonical_order`] so that the
//! result does not depend on how nodes happen to be numbered: relabeling the
//! nodes of a graph permutes the terms of each sum, and summing them in a
//! content-defined order makes the floating point result bit-identical.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self { rows, cols, data }
    }

    /// Glorot/Xavier uniform initialization.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Self::uniform(rows, cols, bound, rng)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · rhs`. Sums run over the column index of `self` in natural order.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, rhs.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            for j in 0..rhs.rows {
                out[(i, j)] = dot(self.row(i), rhs.row(j));
            }
        }
        Ok(out)
    }

    /// `adj · h` where the sum runs over nodes (the rows of `h`). For each
    /// output row the terms are added in an order fixed by their content.
    pub fn node_mix(adj: &Matrix, h: &Matrix) -> Result<Matrix> {
        if adj.cols != h.rows || adj.rows != adj.cols {
            return Err(Error::Shape(format!(
                "adjacency {}x{} against {} node rows",
                adj.rows, adj.cols, h.rows
            )));
        }
        let n = adj.rows;
        let mut out = Matrix::zeros(n, h.cols);
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..n {
            order.sort_by(|&a, &b| {
                adj[(i, a)]
                    .total_cmp(&adj[(i, b)])
                    .then_with(|| cmp_rows(h.row(a), h.row(b)))
            });
            let out_row = &mut out.data[i * h.cols..(i + 1) * h.cols];
            for &k in &order {
                let a = adj[(i, k)];
                if a != 0.0 {
                    axpy(a, h.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// `adjᵀ · g`, summing over nodes in content order.
    pub fn node_mix_transposed(adj: &Matrix, g: &Matrix) -> Result<Matrix> {
        if adj.rows != g.rows || adj.rows != adj.cols {
            return Err(Error::Shape(format!(
                "adjacency {}x{} against {} node rows",
                adj.rows, adj.cols, g.rows
            )));
        }
        let n = adj.rows;
        let mut out = Matrix::zeros(n, g.cols);
        let mut order: Vec<usize> = (0..n).collect();
        for k in 0..n {
            order.sort_by(|&a, &b| {
                adj[(a, k)]
                    .total_cmp(&adj[(b, k)])
                    .then_with(|| cmp_rows(g.row(a), g.row(b)))
            });
            let out_row = &mut out.data[k * g.cols..(k + 1) * g.cols];
            for &i in &order {
                let a = adj[(i, k)];
                if a != 0.0 {
                    axpy(a, g.row(i), out_row);
                }
            }
        }
        Ok(out)
    }

    /// `aᵀ · b` where both share the node axis; accumulates `out += aᵀ b`.
    pub fn accumulate_node_outer(out: &mut Matrix, a: &Matrix, b: &Matrix) {
        assert_eq!(a.rows, b.rows);
        assert_eq!(out.shape(), (a.cols, b.cols));
        let mut order: Vec<usize> = (0..a.rows).collect();
        order.sort_by(|&x, &y| cmp_rows(a.row(x), a.row(y)).then_with(|| cmp_rows(b.row(x), b.row(y))));
        for &i in &order {
            let b_row = b.row(i);
            for (k, &av) in a.row(i).iter().enumerate() {
                if av != 0.0 {
                    axpy(av, b_row, out.row_mut(k));
                }
            }
        }
    }

    /// Column-wise mean over rows, summed in content order.
    pub fn column_mean(&self) -> Result<Vec<f64>> {
        if self.rows == 0 {
            return Err(Error::Empty("mean over zero rows"));
        }
        let order = canonical_order(self);
        let mut acc = vec![0.0; self.cols];
        for &r in &order {
            for (a, v) in acc.iter_mut().zip(self.row(r)) {
                *a += v;
            }
        }
        let n = self.rows as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Row indices sorted by row content. Rows that compare equal are bitwise
/// identical, so their relative order cannot affect a sum.
pub fn canonical_order(m: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m.rows()).collect();
    order.sort_by(|&a, &b| cmp_rows(m.row(a), m.row(b)));
    order
}

/// Sum of values independent of their order.
pub fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln Σ exp(z)`, stabilized.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(a.matmul_t(&b).unwrap().as_slice(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn shape_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(a.matmul(&Matrix::zeros(2, 3)).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn node_mix_matches_matmul() {
        let adj = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let h = Matrix::from_rows(&[vec![2.0], vec![0.0]]).unwrap();
        let out = Matrix::node_mix(&adj, &h).unwrap();
        assert_eq!(out, adj.matmul(&h).unwrap());
        let out_t = Matrix::node_mix_transposed(&adj, &h).unwrap();
        assert_eq!(out_t, adj.transpose().matmul(&h).unwrap());
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 6]), 0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
