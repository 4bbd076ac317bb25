//! Matrix potentials, their pointwise factorization `V = v*Uv`, and decay checks.
//!
//! At each point the Hermitian matrix `V(x) = BᴴΛB` is diagonalized with `B`
//! unitary. Then `v = |Λ|^{1/2}B` and `U = diag(sign Λ)` with `sign(0) = +1`.
//! Rows of `B` are ordered by descending eigenvalue. Within a degenerate cluster the
//! basis is canonical: the cluster projector is applied to the standard basis vectors
//! in order and Gram–Schmidt orthonormalized. Each row is then rotated so its first
//! nonzero entry is real and positive.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{alpha, beta, bracket, hermitian_eigen, Mat4, C64, ZERO};
use crate::error::{Error, Result};
use crate::grid::{GridDescriptor, SpatialGrid};
use crate::io::{read_dataset, write_dataset};

/// Hermiticity tolerance for factorization inputs.
const HERMITIAN_TOL: f64 = 1e-12;

/// Built-in potential families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    /// `V ≡ 0`.
    Zero,
    /// `g⟨x⟩^{-δ} I`.
    IsotropicScalar,
    /// `g⟨x⟩^{-δ} diag(1, -1, ½, -½)`.
    DiagonalSignature,
    /// `g⟨x⟩^{-δ} (β + ½α₃)`.
    OffDiagonalCoupling,
    /// `g⟨x⟩^{-δ} H_seed` with a seeded Hermitian `H_seed` of unit spectral norm.
    RandomHermitian,
    /// Attractive well `-g e^{-|x|²} I` with `g ≥ 0`.
    GaussianWell,
}

/// A potential family with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialFamily {
    pub kind: FamilyKind,
    /// Coupling `g` multiplying the base profile.
    pub coupling: f64,
    /// Envelope decay exponent `δ` (the asserted exponent for the Gaussian well).
    pub delta: f64,
    /// Seed for the random family.
    #[serde(default)]
    pub seed: u64,
}

impl PotentialFamily {
    pub fn new(kind: FamilyKind, coupling: f64, delta: f64, seed: u64) -> Result<Self> {
        if !coupling.is_finite() || !delta.is_finite() || delta <= 0.0 {
            return Err(Error::Validation(format!("invalid family parameters g = {coupling}, delta = {delta}")));
        }
        if kind == FamilyKind::GaussianWell && coupling < 0.0 {
            return Err(Error::Validation("the attractive well takes a depth g >= 0".into()));
        }
        Ok(Self { kind, coupling, delta, seed })
    }

    pub fn zero() -> Self {
        Self { kind: FamilyKind::Zero, coupling: 0.0, delta: 6.0, seed: 0 }
    }

    pub fn gaussian_well(depth: f64) -> Self {
        Self { kind: FamilyKind::GaussianWell, coupling: depth, delta: 6.0, seed: 0 }
    }

    pub fn isotropic(coupling: f64, delta: f64) -> Self {
        Self { kind: FamilyKind::IsotropicScalar, coupling, delta, seed: 0 }
    }

    /// Same family at a different coupling.
    pub fn with_coupling(&self, coupling: f64) -> Self {
        Self { coupling, ..*self }
    }

    /// The fixed matrix shape of the family, before envelope and coupling.
    fn shape(&self) -> Mat4 {
        match self.kind {
            FamilyKind::Zero => Mat4::zero(),
            FamilyKind::IsotropicScalar | FamilyKind::GaussianWell => Mat4::identity(),
            FamilyKind::DiagonalSignature => Mat4::from_real_diag([1.0, -1.0, 0.5, -0.5]),
            FamilyKind::OffDiagonalCoupling => beta() + alpha(2).scale_re(0.5),
            FamilyKind::RandomHermitian => random_hermitian(self.seed),
        }
    }

    /// Radial profile times coupling.
    fn profile(&self, x: [f64; 3]) -> f64 {
        match self.kind {
            FamilyKind::Zero => 0.0,
            FamilyKind::GaussianWell => -self.coupling * (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2])).exp(),
            _ => self.coupling * bracket(x).powf(-self.delta),
        }
    }

    /// `V(x)`.
    pub fn value(&self, x: [f64; 3]) -> Mat4 {
        let p = self.profile(x);
        if p == 0.0 {
            return Mat4::zero();
        }
        self.shape().scale_re(p)
    }
}

/// Seeded Hermitian 4×4 matrix with unit spectral norm.
fn random_hermitian(seed: u64) -> Mat4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mat4::zero();
    for r in 0..4 {
        m[(r, r)] = C64::new(rng.random_range(-1.0..1.0), 0.0);
        for c in r + 1..4 {
            let z = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            m[(r, c)] = z;
            m[(c, r)] = z.conj();
        }
    }
    m.scale_re(1.0 / m.spectral_norm())
}

/// Pointwise factorization `V = vᴴ U v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointFactor {
    pub v: Mat4,
    /// Diagonal of the signature matrix `U`.
    pub u: [f64; 4],
}

impl PointFactor {
    pub fn u_matrix(&self) -> Mat4 {
        Mat4::from_real_diag(self.u)
    }

    /// `vᴴ U v`.
    pub fn reconstruct(&self) -> Mat4 {
        self.v.adjoint() * self.u_matrix() * self.v
    }
}

/// Factorizes a Hermitian matrix as `vᴴUv` with the canonical basis convention.
pub fn factorize_pointwise(vx: &Mat4) -> Result<PointFactor> {
    let defect = vx.hermiticity_defect();
    if defect > HERMITIAN_TOL * (1.0 + vx.max_abs()) {
        return Err(Error::NonHermitian { defect });
    }
    if vx.max_abs() == 0.0 {
        return Ok(PointFactor { v: Mat4::zero(), u: [1.0; 4] });
    }
    let (vals, vecs) = hermitian_eigen(vx);
    let scale = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-10 * scale;
    let mut rows: Vec<[C64; 4]> = Vec::with_capacity(4);
    let mut k = 0;
    while k < 4 {
        let mut end = k + 1;
        while end < 4 && (vals[end] - vals[k]).abs() <= tol {
            end += 1;
        }
        rows.extend(canonical_cluster_basis(&vecs, k, end));
        k = end;
    }
    let mut v = Mat4::zero();
    let mut u = [1.0; 4];
    for (r, row) in rows.iter().enumerate() {
        let lam = if vals[r].abs() <= tol { 0.0 } else { vals[r] };
        u[r] = if lam < 0.0 { -1.0 } else { 1.0 };
        let s = lam.abs().sqrt();
        for c in 0..4 {
            v[(r, c)] = row[c].conj() * s;
        }
    }
    Ok(PointFactor { v, u })
}

/// Orthonormal basis of the span of columns `start..end` of `vecs`, canonicalized.
fn canonical_cluster_basis(vecs: &Mat4, start: usize, end: usize) -> Vec<[C64; 4]> {
    let dim = end - start;
    let proj = Mat4::from_fn(|r, c| (start..end).map(|k| vecs[(r, k)] * vecs[(c, k)].conj()).sum());
    let mut basis: Vec<[C64; 4]> = Vec::with_capacity(dim);
    for e in 0..4 {
        if basis.len() == dim {
            break;
        }
        let mut w: [C64; 4] = [0, 1, 2, 3].map(|r| proj[(r, e)]);
        for b in &basis {
            let dot: C64 = (0..4).map(|k| b[k].conj() * w[k]).sum();
            for k in 0..4 {
                w[k] -= dot * b[k];
            }
        }
        let n = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if n > 1e-6 {
            let first = w.iter().copied().find(|z| z.norm() > 1e-12).unwrap_or(ZERO);
            let phase = if first == ZERO { C64::new(1.0, 0.0) } else { first.conj() / first.norm() };
            basis.push(w.map(|z| z * phase / n));
        }
    }
    basis
}

/// A potential realized on a grid together with its factorization.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPotential {
    pub family: PotentialFamily,
    pub grid: GridDescriptor,
    pub values: Vec<Mat4>,
    pub factors: Vec<PointFactor>,
}

impl FactorizedPotential {
    pub fn delta(&self) -> f64 {
        self.family.delta
    }

    pub fn coupling(&self) -> f64 {
        self.family.coupling
    }

    /// `v(xᵢ)` for every grid point.
    pub fn v(&self) -> Vec<Mat4> {
        self.factors.iter().map(|f| f.v).collect()
    }

    /// `U(xᵢ)` for every grid point.
    pub fn u(&self) -> Vec<Mat4> {
        self.factors.iter().map(PointFactor::u_matrix).collect()
    }

    /// Whether `V` vanishes identically on the grid.
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|m| m.max_abs() == 0.0)
    }

    /// Largest pointwise reconstruction error `max |vᴴUv - V|`.
    pub fn reconstruction_error(&self) -> f64 {
        self.factors
            .iter()
            .zip(&self.values)
            .map(|(f, v)| (f.reconstruct() - *v).max_abs())
            .fold(0.0, f64::max)
    }

    /// Content hash of the family and grid.
    pub fn content_hash(&self) -> String {
        crate::io::hash_json(&(&self.family, &self.grid))
    }

    /// Saves as a JSON header plus `V` samples in grid-major, row-major 4×4 order.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = PotentialHeader { family: self.family, grid: self.grid };
        let data: Vec<C64> = self.values.iter().flat_map(|m| m.0.into_iter().flatten()).collect();
        write_dataset(stem, &header, &data)
    }

    /// Loads a potential and refactorizes it.
    pub fn load(stem: &Path) -> Result<Self> {
        let (header, data): (PotentialHeader, Vec<C64>) = read_dataset(stem)?;
        if data.len() % 16 != 0 {
            return Err(Error::Validation("potential payload is not a whole number of 4x4 blocks".into()));
        }
        let values: Vec<Mat4> = data.chunks_exact(16).map(|c| Mat4::from_fn(|r, col| c[4 * r + col])).collect();
        let factors = values.iter().map(factorize_pointwise).collect::<Result<_>>()?;
        Ok(Self { family: header.family, grid: header.grid, values, factors })
    }
}

#[derive(Serialize, Deserialize)]
struct PotentialHeader {
    family: PotentialFamily,
    grid: GridDescriptor,
}

/// Realizes a family on every grid point and factorizes it.
pub fn sample_potential(family: &PotentialFamily, grid: &SpatialGrid) -> Result<FactorizedPotential> {
    if grid.is_empty() {
        return Err(Error::Validation("cannot sample a potential on an empty grid".into()));
    }
    let values: Vec<Mat4> = grid.points.par_iter().map(|x| family.value(*x)).collect();
    let factors = values.par_iter().map(factorize_pointwise).collect::<Result<_>>()?;
    Ok(FactorizedPotential { family: *family, grid: grid.descriptor, values, factors })
}

/// Outcome of a decay-envelope check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayCheck {
    /// `max |V(x)|⟨x⟩^δ` over the grid, entrywise.
    pub constant: f64,
    /// `max |v(x)|⟨x⟩^{δ/2}` over the grid, entrywise.
    pub factor_constant: f64,
    pub passes: bool,
}

/// Fits the envelope constants of `|V| ≤ C⟨x⟩^{-δ}` and `|v| ≤ C'⟨x⟩^{-δ/2}`.
pub fn verify_decay(pot: &FactorizedPotential, grid: &SpatialGrid) -> DecayCheck {
    let delta = pot.delta();
    let mut constant = 0.0_f64;
    let mut factor_constant = 0.0_f64;
    for ((x, v), f) in grid.points.iter().zip(&pot.values).zip(&pot.factors) {
        let b = bracket(*x);
        constant = constant.max(v.max_abs() * b.powf(delta));
        factor_constant = factor_constant.max(f.v.max_abs() * b.powf(0.5 * delta));
    }
    DecayCheck { constant, factor_constant, passes: constant.is_finite() && factor_constant.is_finite() }
}
