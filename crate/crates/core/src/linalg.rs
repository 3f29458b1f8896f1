//! Small dense complex linear algebra.
//!
//! Matrices are square, stored row-major in flat slices. The sizes involved
//! here are at most a few dozen, so plain triangular factorizations are used
//! directly instead of a general-purpose linear algebra backend.

use num_complex::Complex64 as c64;

/// Relative diagonal loading applied before every Hermitian solve.
pub const DIAGONAL_LOADING: f64 = 1e-10;

/// Adds `delta * tr(A) / n` to the diagonal of a Hermitian matrix.
pub fn load_diagonal(a: &mut [c64], n: usize, delta: f64) {
    let trace: f64 = (0..n).map(|i| a[i * n + i].re).sum();
    let load = delta * trace / n as f64;
    for i in 0..n {
        a[i * n + i].re += load;
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᴴ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Vec<c64>,
    n: usize,
}

impl Cholesky {
    /// Factors a Hermitian positive definite matrix. Only the lower triangle
    /// of `a` is read. Returns `None` when a pivot is not strictly positive.
    pub fn new(a: &[c64], n: usize) -> Option<Self> {
        assert_eq!(a.len(), n * n);
        let mut l = vec![c64::new(0.0, 0.0); n * n];
        for j in 0..n {
            let mut d = a[j * n + j].re;
            for k in 0..j {
                d -= l[j * n + k].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[j * n + j] = c64::new(djj, 0.0);
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = s / djj;
            }
        }
        Some(Cholesky { l, n })
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [c64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i].re;
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i].conj() * b[k];
            }
            b[i] = s / self.l[i * n + i].re;
        }
    }
}

/// Solves `A x = b` for a Hermitian positive semidefinite `A`. Relative
/// diagonal loading is applied only when the plain factorization fails.
/// `a` is consumed as scratch.
pub fn solve_hermitian_loaded(a: &mut [c64], n: usize, b: &mut [c64]) -> Option<()> {
    let finite = |b: &[c64]| b.iter().all(|v| v.re.is_finite() && v.im.is_finite());
    if let Some(chol) = Cholesky::new(a, n) {
        let mut x = b.to_vec();
        chol.solve_in_place(&mut x);
        if finite(&x) {
            b.copy_from_slice(&x);
            return Some(());
        }
    }
    load_diagonal(a, n, DIAGONAL_LOADING);
    let chol = Cholesky::new(a, n)?;
    chol.solve_in_place(b);
    if finite(b) {
        Some(())
    } else {
        None
    }
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Vec<c64>,
    perm: Vec<usize>,
    n: usize,
    odd_swaps: bool,
}

impl Lu {
    /// Returns `None` for an exactly singular (or non-finite) matrix.
    pub fn new(a: &[c64], n: usize) -> Option<Self> {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut odd_swaps = false;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].norm()))
                .fold((k, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            if !(pmax > 0.0) || !pmax.is_finite() {
                return None;
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                odd_swaps = !odd_swaps;
            }
            let pivot = lu[k * n + k];
            for i in (k + 1)..n {
                let factor = lu[i * n + k] / pivot;
                lu[i * n + k] = factor;
                for j in (k + 1)..n {
                    let u = lu[k * n + j];
                    lu[i * n + j] -= factor * u;
                }
            }
        }
        Some(Lu {
            lu,
            perm,
            n,
            odd_swaps,
        })
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i].norm().ln()).sum()
    }

    pub fn det(&self) -> c64 {
        let d = (0..self.n).fold(c64::new(1.0, 0.0), |acc, i| acc * self.lu[i * self.n + i]);
        if self.odd_swaps {
            -d
        } else {
            d
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[c64]) -> Vec<c64> {
        let n = self.n;
        let mut x: Vec<c64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                let xk = x[k];
                x[i] -= l * xk;
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let u = self.lu[i * n + k];
                let xk = x[k];
                x[i] -= u * xk;
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transposed(&self, b: &[c64]) -> Vec<c64> {
        let n = self.n;
        let mut w = b.to_vec();
        // Uᵀ w = b
        for i in 0..n {
            for k in 0..i {
                let u = self.lu[k * n + i];
                let wk = w[k];
                w[i] -= u * wk;
            }
            w[i] /= self.lu[i * n + i];
        }
        // Lᵀ v = w
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let l = self.lu[k * n + i];
                let wk = w[k];
                w[i] -= l * wk;
            }
        }
        let mut x = vec![c64::new(0.0, 0.0); n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = w[i];
        }
        x
    }
}
