//! Small dense matrices and the matrix exponential.
//!
//! Site spaces here are tiny (a handful of sites), so a plain row-major
//! `Vec<f64>` with scaling-and-squaring for `exp` covers everything the mild
//! solver needs at machine precision.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            assert_eq!(row.len(), n, "matrix must be square");
            data.extend_from_slice(row);
        }
        Self { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.n, rhs.n);
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * rhs.data[k * n + j];
                }
            }
        }
        out
    }

    /// `out = self * v`.
    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(v.len(), n);
        debug_assert_eq!(out.len(), n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.data[i * n + j] * v[j];
            }
            out[i] = acc;
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.matvec_into(v, &mut out);
        out
    }

    pub fn add_assign(&mut self, rhs: &Self) {
        for (a, b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a += *b;
        }
    }

    /// Max absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        let n = self.n;
        let mut best = 0.0f64;
        for i in 0..n {
            let s: f64 = self.data[i * n..(i + 1) * n].iter().map(|x| x.abs()).sum();
            best = best.max(s);
        }
        best
    }
}

/// Matrix exponential by scaling and squaring with a Taylor core.
///
/// The argument is scaled down until its norm is below 1/2, the series is
/// summed to machine precision, and the result squared back up. For the
/// generator-times-step matrices this crate feeds in, the scaling count is
/// tiny and the result is accurate to a few ulps.
pub fn expm(a: &DenseMatrix) -> DenseMatrix {
    let norm = a.inf_norm();
    let squarings = if norm > 0.5 {
        ((norm / 0.5).ln() / core::f64::consts::LN_2).ceil() as u32
    } else {
        0
    };
    let scaled = a.scaled(0.5f64.powi(squarings as i32));

    let mut sum = DenseMatrix::identity(a.dim());
    let mut term = DenseMatrix::identity(a.dim());
    for i in 1..=30 {
        term = term.matmul(&scaled).scaled(1.0 / i as f64);
        sum.add_assign(&term);
        if term.inf_norm() <= 1e-18 * sum.inf_norm() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum.matmul(&sum);
    }
    sum
}
