//! Dirac and Pauli matrix algebra for the massless Dirac operator in three dimensions.
//!
//! The representation is the one used throughout the crate:
//!
//! ```text
//! β  = diag(1, 1, -1, -1)
//! αⱼ = [[0, σⱼ], [σⱼ, 0]]
//! σ₁ = [[0, -i], [i, 0]],  σ₂ = [[0, 1], [1, 0]],  σ₃ = diag(1, -1)
//! ```
//!
//! Note that σ₁ and σ₂ are swapped relative to the textbook Pauli labelling. All
//! kernels are written in terms of `α·e`, so only the anticommutation relations matter
//! for the analysis, but the explicit entries are part of the public contract.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use faer::{Mat, Side};
use num_complex::Complex64;

/// Complex scalar used across the crate.
pub type C64 = Complex64;

/// A four-component spinor value.
pub type Spinor = [C64; 4];

/// Imaginary unit.
pub const I: C64 = C64::new(0.0, 1.0);
/// Complex zero.
pub const ZERO: C64 = C64::new(0.0, 0.0);
/// Complex one.
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Dense 4×4 complex matrix stored row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat4(pub [[C64; 4]; 4]);

impl Default for Mat4 {
    fn default() -> Self {
        Self::zero()
    }
}

impl Mat4 {
    /// The zero matrix.
    pub const fn zero() -> Self {
        Mat4([[ZERO; 4]; 4])
    }

    /// The identity matrix.
    pub fn identity() -> Self {
        Self::from_diag([ONE; 4])
    }

    /// Diagonal matrix with the given entries.
    pub fn from_diag(d: [C64; 4]) -> Self {
        let mut m = Self::zero();
        for (k, dk) in d.into_iter().enumerate() {
            m.0[k][k] = dk;
        }
        m
    }

    /// Real diagonal matrix.
    pub fn from_real_diag(d: [f64; 4]) -> Self {
        Self::from_diag(d.map(|x| C64::new(x, 0.0)))
    }

    /// Builds a matrix from an entry function `f(row, col)`.
    pub fn from_fn(mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zero();
        for r in 0..4 {
            for c in 0..4 {
                m.0[r][c] = f(r, c);
            }
        }
        m
    }

    /// Assembles `[[a, b], [c, d]]` from 2×2 blocks.
    pub fn from_blocks(a: [[C64; 2]; 2], b: [[C64; 2]; 2], c: [[C64; 2]; 2], d: [[C64; 2]; 2]) -> Self {
        Self::from_fn(|r, col| match (r < 2, col < 2) {
            (true, true) => a[r][col],
            (true, false) => b[r][col - 2],
            (false, true) => c[r - 2][col],
            (false, false) => d[r - 2][col - 2],
        })
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(|r, c| self.0[c][r].conj())
    }

    /// Plain transpose.
    pub fn transpose(&self) -> Self {
        Self::from_fn(|r, c| self.0[c][r])
    }

    /// Trace.
    pub fn trace(&self) -> C64 {
        (0..4).map(|k| self.0[k][k]).sum()
    }

    /// Scales every entry by a complex factor.
    pub fn scale(&self, s: C64) -> Self {
        Self::from_fn(|r, c| self.0[r][c] * s)
    }

    /// Scales every entry by a real factor.
    pub fn scale_re(&self, s: f64) -> Self {
        Self::from_fn(|r, c| self.0[r][c] * s)
    }

    /// Frobenius norm.
    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Spectral norm (largest singular value).
    pub fn spectral_norm(&self) -> f64 {
        let gram = self.adjoint() * *self;
        let (vals, _) = hermitian_eigen(&gram);
        vals[0].max(0.0).sqrt()
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: &Spinor) -> Spinor {
        let mut out = [ZERO; 4];
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..4).map(|c| self.0[r][c] * v[c]).sum();
        }
        out
    }

    /// Maximal deviation from Hermitian symmetry, `max |A - Aᴴ|`.
    pub fn hermiticity_defect(&self) -> f64 {
        (*self - self.adjoint()).max_abs()
    }

    /// Flattens into 32 floats `(re, im)` in row-major order.
    pub fn to_floats(&self) -> [f64; 32] {
        let mut out = [0.0; 32];
        for (k, z) in self.0.iter().flatten().enumerate() {
            out[2 * k] = z.re;
            out[2 * k + 1] = z.im;
        }
        out
    }

    /// Inverse of [`Mat4::to_floats`].
    pub fn from_floats(f: &[f64]) -> Self {
        Self::from_fn(|r, c| C64::new(f[2 * (4 * r + c)], f[2 * (4 * r + c) + 1]))
    }
}

impl Index<(usize, usize)> for Mat4 {
    type Output = C64;
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.0[r][c]
    }
}

impl IndexMut<(usize, usize)> for Mat4 {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.0[r][c]
    }
}

impl Add for Mat4 {
    type Output = Mat4;
    fn add(self, rhs: Mat4) -> Mat4 {
        Mat4::from_fn(|r, c| self.0[r][c] + rhs.0[r][c])
    }
}

impl AddAssign for Mat4 {
    fn add_assign(&mut self, rhs: Mat4) {
        for r in 0..4 {
            for c in 0..4 {
                self.0[r][c] += rhs.0[r][c];
            }
        }
    }
}

impl Sub for Mat4 {
    type Output = Mat4;
    fn sub(self, rhs: Mat4) -> Mat4 {
        Mat4::from_fn(|r, c| self.0[r][c] - rhs.0[r][c])
    }
}

impl SubAssign for Mat4 {
    fn sub_assign(&mut self, rhs: Mat4) {
        for r in 0..4 {
            for c in 0..4 {
                self.0[r][c] -= rhs.0[r][c];
            }
        }
    }
}

impl Neg for Mat4 {
    type Output = Mat4;
    fn neg(self) -> Mat4 {
        self.scale_re(-1.0)
    }
}

impl Mul for Mat4 {
    type Output = Mat4;
    fn mul(self, rhs: Mat4) -> Mat4 {
        let mut out = Mat4::zero();
        for r in 0..4 {
            for k in 0..4 {
                let a = self.0[r][k];
                if a == ZERO {
                    continue;
                }
                for c in 0..4 {
                    out.0[r][c] += a * rhs.0[k][c];
                }
            }
        }
        out
    }
}

impl Mul<C64> for Mat4 {
    type Output = Mat4;
    fn mul(self, rhs: C64) -> Mat4 {
        self.scale(rhs)
    }
}

impl Mul<f64> for Mat4 {
    type Output = Mat4;
    fn mul(self, rhs: f64) -> Mat4 {
        self.scale_re(rhs)
    }
}

/// The three Pauli-type 2×2 blocks in the crate's convention.
pub fn pauli(k: usize) -> [[C64; 2]; 2] {
    match k {
        0 => [[ZERO, -I], [I, ZERO]],
        1 => [[ZERO, ONE], [ONE, ZERO]],
        2 => [[ONE, ZERO], [ZERO, -ONE]],
        _ => panic!("Pauli index {k} out of range 0..3"),
    }
}

/// The full set of Dirac matrices: `alpha[j]` and `beta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiracMatrices {
    pub alpha: [Mat4; 3],
    pub beta: Mat4,
}

impl DiracMatrices {
    /// All four generators with β first, matching the index set {0, 1, 2, 3}.
    pub fn generators(&self) -> [Mat4; 4] {
        [self.beta, self.alpha[0], self.alpha[1], self.alpha[2]]
    }
}

/// Builds β and the three α matrices.
pub fn build_dirac_matrices() -> DiracMatrices {
    DiracMatrices {
        alpha: [alpha(0), alpha(1), alpha(2)],
        beta: beta(),
    }
}

/// β = diag(1, 1, -1, -1).
pub fn beta() -> Mat4 {
    Mat4::from_real_diag([1.0, 1.0, -1.0, -1.0])
}

/// αⱼ for j = 0, 1, 2 (spatial directions x, y, z).
pub fn alpha(j: usize) -> Mat4 {
    let z = [[ZERO; 2]; 2];
    let s = pauli(j);
    Mat4::from_blocks(z, s, s, z)
}

/// Σⱼ vⱼ αⱼ, written out entrywise.
pub fn alpha_dot(v: [f64; 3]) -> Mat4 {
    let [a, b, c] = v;
    // σ·v in the crate's convention: [[c, -i a + b], [i a + b, -c]].
    let s11 = C64::new(c, 0.0);
    let s12 = C64::new(b, -a);
    let s21 = C64::new(b, a);
    let s22 = C64::new(-c, 0.0);
    let z = ZERO;
    Mat4([
        [z, z, s11, s12],
        [z, z, s21, s22],
        [s11, s12, z, z],
        [s21, s22, z, z],
    ])
}

/// The massless symbol A(ξ) = α·ξ.
pub fn dirac_symbol(xi: [f64; 3]) -> Mat4 {
    alpha_dot(xi)
}

/// exp(-i t A(ξ)) = cos(t|ξ|) I - i sin(t|ξ|) A(ξ)/|ξ|, with the value I at ξ = 0.
pub fn symbol_propagator(xi: [f64; 3], t: f64) -> Mat4 {
    let k = norm3(xi);
    if k == 0.0 {
        return Mat4::identity();
    }
    let a = alpha_dot(xi).scale_re(1.0 / k);
    Mat4::identity().scale_re((t * k).cos()) - a.scale(I * (t * k).sin())
}

/// AB + BA.
pub fn anticommutator(a: &Mat4, b: &Mat4) -> Mat4 {
    *a * *b + *b * *a
}

/// Largest deviation of {Γⱼ, Γₖ} from 2δⱼₖI over all 16 ordered pairs of generators.
pub fn clifford_defect(m: &DiracMatrices) -> f64 {
    let g = m.generators();
    let mut worst = 0.0_f64;
    for (j, gj) in g.iter().enumerate() {
        for (k, gk) in g.iter().enumerate() {
            let target = if j == k { Mat4::identity().scale_re(2.0) } else { Mat4::zero() };
            worst = worst.max((anticommutator(gj, gk) - target).max_abs());
        }
    }
    worst
}

/// Euclidean norm of a 3-vector.
pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Componentwise difference `a - b`.
pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Japanese bracket ⟨x⟩ = (1 + |x|²)^{1/2}.
pub fn bracket(x: [f64; 3]) -> f64 {
    (1.0 + x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Eigendecomposition of a Hermitian 4×4 matrix.
///
/// Returns eigenvalues in descending order and the matrix whose columns are the
/// corresponding orthonormal eigenvectors.
pub fn hermitian_eigen(m: &Mat4) -> ([f64; 4], Mat4) {
    let a = Mat::<C64>::from_fn(4, 4, |r, c| 0.5 * (m.0[r][c] + m.0[c][r].conj()));
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .expect("4x4 Hermitian eigendecomposition cannot fail to converge");
    let s = evd.S();
    let u = evd.U();
    let mut vals = [0.0; 4];
    let mut vecs = Mat4::zero();
    for k in 0..4 {
        // faer sorts ascending; flip to descending.
        let src = 3 - k;
        vals[k] = s[src].re;
        for r in 0..4 {
            vecs.0[r][k] = u[(r, src)];
        }
    }
    (vals, vecs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn beta_is_diag_one_one_minus_minus() {
        assert_eq!(beta(), Mat4::from_real_diag([1.0, 1.0, -1.0, -1.0]));
    }

    #[test]
    fn alpha_three_entries_follow_sigma_three() {
        let a3 = alpha(2);
        assert_eq!(a3[(0, 2)], ONE);
        assert_eq!(a3[(1, 3)], -ONE);
        assert_eq!(a3[(2, 0)], ONE);
        assert_eq!(a3[(3, 1)], -ONE);
    }

    #[test]
    fn alpha_entries_lie_in_unit_set() {
        let allowed = [ZERO, ONE, -ONE, I, -I];
        for m in build_dirac_matrices().generators() {
            assert_eq!(m.hermiticity_defect(), 0.0);
            for z in m.0.iter().flatten() {
                assert!(allowed.contains(z));
            }
        }
    }

    #[test]
    fn clifford_relations_are_exact() {
        assert_eq!(clifford_defect(&build_dirac_matrices()), 0.0);
    }

    #[test]
    fn alpha_dot_matches_sum_of_generators() {
        let v = [0.3, -1.7, 2.25];
        let sum = alpha(0).scale_re(v[0]) + alpha(1).scale_re(v[1]) + alpha(2).scale_re(v[2]);
        assert!((alpha_dot(v) - sum).max_abs() < 1e-15);
    }

    #[test]
    fn symbol_row_one_matches_explicit_form() {
        let a = dirac_symbol([1.0, 2.0, 3.0]);
        assert_eq!(a[(0, 0)], ZERO);
        assert_eq!(a[(0, 1)], ZERO);
        assert_eq!(a[(0, 2)], c(3.0, 0.0));
        assert_eq!(a[(0, 3)], c(2.0, -1.0));
    }

    #[test]
    fn zero_vector_gives_zero_matrix() {
        assert_eq!(alpha_dot([0.0; 3]), Mat4::zero());
    }

    #[test]
    fn symbol_three_four_zero_has_eigenvalues_plus_minus_five() {
        let (vals, _) = hermitian_eigen(&dirac_symbol([3.0, 4.0, 0.0]));
        let expected = [5.0, 5.0, -5.0, -5.0];
        for (v, e) in vals.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12, "{vals:?}");
        }
    }

    #[test]
    fn propagator_at_zero_symbol_is_identity() {
        assert_eq!(symbol_propagator([0.0; 3], 3.0), Mat4::identity());
    }

    #[test]
    fn hermitian_eigen_reconstructs() {
        let m = Mat4::from_fn(|r, col| c((r + 2 * col) as f64, (r as f64) - (col as f64)));
        let h = (m + m.adjoint()).scale_re(0.5);
        let (vals, vecs) = hermitian_eigen(&h);
        let recon = vecs * Mat4::from_real_diag(vals) * vecs.adjoint();
        assert!((recon - h).max_abs() < 1e-12);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn spectral_norm_of_unitary_is_one() {
        let n = alpha_dot([0.6, 0.0, 0.8]).spectral_norm();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn float_round_trip() {
        let m = Mat4::from_fn(|r, col| c(r as f64, col as f64 * 0.5));
        assert_eq!(Mat4::from_floats(&m.to_floats()), m);
    }
}
