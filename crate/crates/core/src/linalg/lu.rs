use super::{CMat, C64};
use crate::error::{Error, Result};

/// LU factorization with partial pivoting, `P M = L U`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<C64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factors `m`; a pivot smaller than `1e-14 * ||M||_F` is reported as
    /// [`Error::Singular`].
    pub fn new(m: &CMat) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Shape(format!("LU of {}x{} matrix", m.rows(), m.cols())));
        }
        let n = m.rows();
        let tol = 1e-14 * m.fro_norm();
        let mut lu = m.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].norm()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmax <= tol || pmax == 0.0 {
                return Err(Error::Singular { pivot: pmax, col: k });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let inv = C64::new(1.0, 0.0) / lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] * inv;
                lu[i * n + k] = f;
                if f == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in k + 1..n {
                    let u = lu[k * n + j];
                    lu[i * n + j] -= f * u;
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    pub fn solve_vec(&self, b: &[C64]) -> Vec<C64> {
        let n = self.n;
        let mut x: Vec<C64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }

    pub fn solve(&self, rhs: &CMat) -> CMat {
        let mut out = CMat::zeros(self.n, rhs.cols());
        for j in 0..rhs.cols() {
            let x = self.solve_vec(&rhs.col(j));
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }
}

/// Solves `M X = rhs`.
pub fn solve(m: &CMat, rhs: &CMat) -> Result<CMat> {
    if rhs.rows() != m.rows() {
        return Err(Error::Shape(format!("rhs has {} rows, matrix {}", rhs.rows(), m.rows())));
    }
    Ok(Lu::new(m)?.solve(rhs))
}

pub fn inverse(m: &CMat) -> Result<CMat> {
    Ok(Lu::new(m)?.solve(&CMat::identity(m.rows())))
}
