//! Small dense least-squares helpers.
//!
//! Designs here have at most a couple of dozen columns, so normal equations
//! are accumulated row by row into a flat Gram matrix and solved with a
//! Cholesky factorization of the column-scaled system. Scaling makes the
//! rank test independent of column units.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Relative pivot below which a scaled Gram matrix is treated as singular.
pub const RANK_TOL: f64 = 1e-9;

/// Accumulated weighted normal equations `X'WX`, `X'Wy`, `y'Wy`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    pub p: usize,
    pub xtx: Vec<f64>,
    pub xty: Vec<f64>,
    pub yty: f64,
    pub sum_w: f64,
    pub rows: usize,
}

impl Gram {
    pub fn new(p: usize) -> Self {
        Gram {
            p,
            xtx: vec![0.0; p * p],
            xty: vec![0.0; p],
            yty: 0.0,
            sum_w: 0.0,
            rows: 0,
        }
    }

    pub fn add(&mut self, x: &[f64], y: f64, w: f64) {
        let p = self.p;
        debug_assert_eq!(x.len(), p);
        for ((i, row), (xi, ty)) in self.xtx.chunks_exact_mut(p).enumerate().zip(x.iter().zip(self.xty.iter_mut())) {
            let wi = w * xi;
            *ty += wi * y;
            for (r, xj) in row[..=i].iter_mut().zip(x) {
                *r += wi * xj;
            }
        }
        self.yty += w * y * y;
        self.sum_w += w;
        self.rows += 1;
    }

    /// Fills the upper triangle from the accumulated lower triangle.
    fn symmetric(&self) -> DMatrix<f64> {
        let p = self.p;
        DMatrix::from_fn(p, p, |i, j| {
            if j <= i {
                self.xtx[i * p + j]
            } else {
                self.xtx[j * p + i]
            }
        })
    }

    /// `self - other`, used to form training-fold systems from a total.
    pub fn minus(&self, other: &Gram) -> Gram {
        Gram {
            p: self.p,
            xtx: self.xtx.iter().zip(&other.xtx).map(|(a, b)| a - b).collect(),
            xty: self.xty.iter().zip(&other.xty).map(|(a, b)| a - b).collect(),
            yty: self.yty - other.yty,
            sum_w: self.sum_w - other.sum_w,
            rows: self.rows - other.rows,
        }
    }

    pub fn plus(&self, other: &Gram) -> Gram {
        Gram {
            p: self.p,
            xtx: self.xtx.iter().zip(&other.xtx).map(|(a, b)| a + b).collect(),
            xty: self.xty.iter().zip(&other.xty).map(|(a, b)| a + b).collect(),
            yty: self.yty + other.yty,
            sum_w: self.sum_w + other.sum_w,
            rows: self.rows + other.rows,
        }
    }

    /// Every accumulated term multiplied by `w` (re-weighting all rows).
    pub fn scaled(&self, w: f64) -> Gram {
        Gram {
            p: self.p,
            xtx: self.xtx.iter().map(|v| v * w).collect(),
            xty: self.xty.iter().map(|v| v * w).collect(),
            yty: self.yty * w,
            sum_w: self.sum_w * w,
            rows: self.rows,
        }
    }

    /// Factorizes `X'WX`; `None` when the design is numerically rank deficient.
    pub fn factor(&self) -> Option<SpdFactor> {
        SpdFactor::new(self.symmetric())
    }

    /// Weighted least-squares coefficients.
    pub fn solve(&self) -> Option<Vec<f64>> {
        let f = self.factor()?;
        Some(f.solve(&self.xty))
    }

    /// Weighted residual sum of squares at `beta`.
    pub fn rss(&self, beta: &[f64]) -> f64 {
        // y'Wy - 2 b'X'Wy + b'X'WX b
        let p = self.p;
        let mut quad = 0.0;
        for i in 0..p {
            for j in 0..p {
                let g = if j <= i { self.xtx[i * p + j] } else { self.xtx[j * p + i] };
                quad += beta[i] * g * beta[j];
            }
        }
        let lin: f64 = beta.iter().zip(&self.xty).map(|(b, v)| b * v).sum();
        (self.yty - 2.0 * lin + quad).max(0.0)
    }
}

/// Cholesky factor of a column-scaled symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    scale: DVector<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl SpdFactor {
    pub fn new(m: DMatrix<f64>) -> Option<Self> {
        let p = m.nrows();
        let mut scale = DVector::zeros(p);
        for i in 0..p {
            let d = m[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            scale[i] = 1.0 / d.sqrt();
        }
        let scaled = DMatrix::from_fn(p, p, |i, j| m[(i, j)] * scale[i] * scale[j]);
        let chol = Cholesky::new(scaled)?;
        let l = chol.l_dirty();
        for i in 0..p {
            let piv = l[(i, i)];
            if !(piv * piv > RANK_TOL) {
                return None;
            }
        }
        Some(SpdFactor { scale, chol })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// Solves `M x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = DVector::from_iterator(b.len(), b.iter().zip(self.scale.iter()).map(|(v, s)| v * s));
        let z = self.chol.solve(&rhs);
        z.iter().zip(self.scale.iter()).map(|(v, s)| v * s).collect()
    }

    /// Dense inverse of `M`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        let p = self.dim();
        DMatrix::from_fn(p, p, |i, j| inv[(i, j)] * self.scale[i] * self.scale[j])
    }

    /// Lower-triangular `L` with `M = L L'` (unscaled).
    pub fn lower(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        let p = self.dim();
        DMatrix::from_fn(p, p, |i, j| l[(i, j)] / self.scale[i])
    }

    /// `x' M^{-1} x`.
    pub fn inv_quad(&self, x: &[f64]) -> f64 {
        let s = self.solve(x);
        s.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

/// Ordinary least squares of `y` on the rows of `design` (row-major, `p` columns).
pub fn ols(design: &[f64], y: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut g = Gram::new(p);
    for (row, &yi) in design.chunks_exact(p).zip(y) {
        g.add(row, yi, 1.0);
    }
    g.solve()
}

/// Inner product, accumulated in four lanes so it vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_exact_line() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.37 - 2.0).collect();
        let design: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x]).collect();
        let y: Vec<f64> = xs.iter().map(|x| 1.5 - 2.0 * x).collect();
        let b = ols(&design, &y, 2).unwrap();
        assert!((b[0] - 1.5).abs() < 1e-10);
        assert!((b[1] + 2.0).abs() < 1e-10);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let design: Vec<f64> = (0..10).flat_map(|i| [1.0, i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(ols(&design, &y, 3).is_none());
    }

    #[test]
    fn gram_minus_plus_round_trip() {
        let mut a = Gram::new(2);
        let mut b = Gram::new(2);
        a.add(&[1.0, 2.0], 3.0, 1.0);
        b.add(&[1.0, -1.0], 0.5, 2.0);
        let total = a.plus(&b);
        let back = total.minus(&b);
        for (u, v) in back.xtx.iter().zip(&a.xtx) {
            assert!((u - v).abs() < 1e-12);
        }
        assert_eq!(back.rows, 1);
    }

    #[test]
    fn inverse_and_lower_agree() {
        let mut g = Gram::new(2);
        g.add(&[1.0, 0.5], 0.0, 1.0);
        g.add(&[1.0, -0.3], 0.0, 1.0);
        g.add(&[1.0, 2.0], 0.0, 1.0);
        let f = g.factor().unwrap();
        let m = g.symmetric();
        let inv = f.inverse();
        let id = &m * &inv;
        assert!((id[(0, 0)] - 1.0).abs() < 1e-10 && id[(0, 1)].abs() < 1e-10);
        let l = f.lower();
        let back = &l * l.transpose();
        assert!((back - m).abs().max() < 1e-10);
    }
}
