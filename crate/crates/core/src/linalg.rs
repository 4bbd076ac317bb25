//! Thin wrappers over faer's dense factorizations.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::{Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::algebra::{C64, ZERO};
use crate::error::{Error, Result};

/// Hermitian eigendecomposition, eigenvalues ascending, eigenvectors in columns.
pub fn hermitian_eigen(m: MatRef<'_, C64>) -> Result<(Vec<f64>, Mat<C64>)> {
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Validation(format!("Hermitian eigensolver failed: {e:?}")))?;
    let vals = (0..m.nrows()).map(|k| evd.S()[k].re).collect();
    Ok((vals, evd.U().to_owned()))
}

/// Hermitian eigenvalues, ascending.
pub fn hermitian_eigenvalues(m: MatRef<'_, C64>) -> Result<Vec<f64>> {
    m.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Validation(format!("Hermitian eigensolver failed: {e:?}")))
}

/// Singular values, descending.
pub fn singular_values(m: MatRef<'_, C64>) -> Result<Vec<f64>> {
    m.singular_values().map_err(|e| Error::Validation(format!("SVD failed: {e:?}")))
}

/// Counts of negative, zero and positive eigenvalues of a Hermitian matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inertia {
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
}

/// Inertia of a Hermitian matrix from its Bunch–Kaufman LBLᴴ factorization.
pub fn inertia(m: MatRef<'_, C64>) -> Inertia {
    let f = m.lblt(Side::Lower);
    let d = f.B_diag();
    let s = f.B_subdiag();
    let n = m.nrows();
    let mut out = Inertia { negative: 0, zero: 0, positive: 0 };
    let mut count = |x: f64| match x.partial_cmp(&0.0) {
        Some(std::cmp::Ordering::Less) => out.negative += 1,
        Some(std::cmp::Ordering::Greater) => out.positive += 1,
        _ => out.zero += 1,
    };
    let mut k = 0;
    while k < n {
        if k + 1 < n && s[k] != ZERO {
            // 2×2 Hermitian block [[a, c̄], [c, b]].
            let (a, b, c) = (d[k].re, d[k + 1].re, s[k].norm());
            let det = a * b - c * c;
            if det < 0.0 {
                count(-1.0);
                count(1.0);
            } else {
                count(a + b);
                count(a + b);
            }
            k += 2;
        } else {
            count(d[k].re);
            k += 1;
        }
    }
    out
}

/// LU factorization with partial pivoting.
pub struct Lu {
    factor: PartialPivLu<C64>,
    n: usize,
}

impl Lu {
    pub fn new(m: MatRef<'_, C64>) -> Self {
        Self { factor: m.partial_piv_lu(), n: m.nrows() }
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, rhs: MatRef<'_, C64>) -> Mat<C64> {
        self.factor.solve(rhs)
    }

    /// `A⁻ᴴ B`.
    pub fn solve_adjoint(&self, rhs: MatRef<'_, C64>) -> Mat<C64> {
        self.factor.solve_adjoint(rhs)
    }

    /// `A⁻¹ b` for a single vector.
    pub fn solve_vec(&self, rhs: &[C64]) -> Vec<C64> {
        let x = self.solve(column(rhs).as_ref());
        (0..self.n).map(|k| x[(k, 0)]).collect()
    }

    /// `A⁻ᴴ b` for a single vector.
    pub fn solve_adjoint_vec(&self, rhs: &[C64]) -> Vec<C64> {
        let x = self.solve_adjoint(column(rhs).as_ref());
        (0..self.n).map(|k| x[(k, 0)]).collect()
    }

    /// Explicit inverse.
    pub fn inverse(&self) -> Mat<C64> {
        self.solve(Mat::<C64>::identity(self.n, self.n).as_ref())
    }
}

/// A vector as an `n × 1` matrix.
pub fn column(v: &[C64]) -> Mat<C64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

/// Euclidean norm of a complex vector.
pub fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `⟨a, b⟩ = Σ āᵢ bᵢ`.
pub fn vec_dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// `‖A - Aᴴ‖_max`.
pub fn hermiticity_defect(m: MatRef<'_, C64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in 0..=j {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Relative Frobenius distance `‖A - B‖ / ‖B‖`.
pub fn rel_diff(a: MatRef<'_, C64>, b: MatRef<'_, C64>) -> f64 {
    (a - b).norm_l2() / b.norm_l2()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_matrix(n: usize) -> Mat<C64> {
        Mat::from_fn(n, n, |i, j| {
            let x = ((i * 37 + j * 11) % 17) as f64 - 8.0;
            let y = ((i * 5 + j * 23) % 13) as f64 - 6.0;
            C64::new(x, y)
        })
    }

    fn random_matrix(n: usize, seed: u64) -> Mat<C64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn inertia_matches_eigenvalue_signs() {
        for n in [5, 16, 33, 80] {
            let a = random_matrix(n, n as u64);
            let h = Mat::from_fn(n, n, |i, j| (a[(i, j)] + a[(j, i)].conj()) * 0.5);
            let vals = hermitian_eigenvalues(h.as_ref()).unwrap();
            let neg = vals.iter().filter(|v| **v < 0.0).count();
            let got = inertia(h.as_ref());
            assert_eq!(got.negative, neg);
            assert_eq!(got.positive, n - neg);
        }
    }

    #[test]
    fn lu_solves_and_adjoint_solves() {
        let n = 12;
        let a = Mat::from_fn(n, n, |i, j| test_matrix(n)[(i, j)] + if i == j { C64::new(40.0, 0.0) } else { ZERO });
        let lu = Lu::new(a.as_ref());
        let b: Vec<C64> = (0..n).map(|k| C64::new(k as f64, 1.0)).collect();
        let x = lu.solve_vec(&b);
        let r = &a * column(&x);
        let y = lu.solve_adjoint_vec(&b);
        let r2 = a.adjoint() * column(&y);
        for k in 0..n {
            assert!((r[(k, 0)] - b[k]).norm() < 1e-10);
            assert!((r2[(k, 0)] - b[k]).norm() < 1e-10);
        }
        let inv = lu.inverse();
        assert!(rel_diff((&a * &inv).as_ref(), Mat::<C64>::identity(n, n).as_ref()) < 1e-12);
    }
}
