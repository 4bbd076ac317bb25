//! Zero-energy analysis: the operator `T₀ = U + v G0 v*`, its kernel, the projection
//! and inverses built from it, reconstruction of threshold eigenfunctions, and the
//! coupling scan that tunes a family onto a zero-energy eigenvalue.
//!
//! All operators are in symmetrized coordinates `√wᵢ ψ(xᵢ)`, so Euclidean
//! orthonormality of a coefficient vector is L²-orthonormality of the field.

use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::path::Path;

use faer::Mat;
use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::algebra::{sub3, Mat4, Spinor, C64, ZERO};
use crate::error::{Error, Result};
use crate::grid::{
    assemble_sandwiched, dirac_fd, extended_lattice, kernel_sum, DiagonalRule, GridOperator, GridScheme,
    SpatialGrid, SpinorField,
};
use crate::io::write_dataset;
use crate::kernels::{g0_disp, g1_disp, resolvent_free_disp, Branch};
use crate::linalg::{hermitian_eigen, hermitian_eigenvalues, hermiticity_defect, inertia, singular_values, Lu};
use crate::potential::{sample_potential, FactorizedPotential, PotentialFamily};

/// Default kernel detection tolerance, relative to `σ_max(T₀)`.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Relative bracket width at which the coupling bisection stops.
pub const BISECTION_REL_WIDTH: f64 = 1e-6;
/// The identity check sums `G0 v*φ` over a lattice `2e + 1` times wider than the box.
pub const IDENTITY_EXTENSION: usize = 2;
/// Number of trailing singular values kept in a report.
const REPORTED_SINGULAR_VALUES: usize = 8;
/// `D₂` is declared singular below this relative smallest singular value.
const D2_CONDITION_FLOOR: f64 = 1e-12;

fn g0_kernel(x: [f64; 3], y: [f64; 3]) -> Result<Mat4> {
    g0_disp(sub3(x, y)).ok_or(Error::CoincidentPoints { x })
}

fn g1_kernel(x: [f64; 3], y: [f64; 3]) -> Result<Mat4> {
    g1_disp(sub3(x, y)).ok_or(Error::CoincidentPoints { x })
}

fn check_grid(pot: &FactorizedPotential, grid: &SpatialGrid) -> Result<()> {
    if pot.grid != grid.descriptor {
        return Err(Error::Validation("potential was sampled on a different grid".into()));
    }
    Ok(())
}

fn check_uniform(grid: &SpatialGrid) -> Result<()> {
    if grid.descriptor.scheme != GridScheme::UniformTensor {
        return Err(Error::Validation("threshold analysis needs a uniform tensor grid".into()));
    }
    Ok(())
}

/// Assembles `T₀ = U + v G0 v*` with a zero diagonal for `G0`.
pub fn build_t0(pot: &FactorizedPotential, grid: &SpatialGrid) -> Result<GridOperator> {
    check_grid(pot, grid)?;
    let probe = [0.3, -0.2, 0.7];
    assert_eq!(
        resolvent_free_disp(0.0, Branch::Plus, probe, 0),
        resolvent_free_disp(0.0, Branch::Minus, probe, 0),
        "both limiting resolvents must reduce to G0 at zero energy"
    );
    let v = pot.v();
    let mut t0 = assemble_sandwiched(g0_kernel, grid, &v, &v, DiagonalRule::Zero)?;
    for (i, f) in pot.factors.iter().enumerate() {
        let b = t0.block(i, i) + f.u_matrix();
        t0.set_block(i, i, &b);
    }
    Ok(t0)
}

/// Whether zero energy is regular.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    Regular,
    Eigenvalue,
}

/// Diagnostics for one reconstructed threshold eigenfunction `ψ = -G0 v*φ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenfunctionCheck {
    /// `‖ψ‖` on the computational grid.
    pub norm: f64,
    /// `‖(D₀ + V)ψ‖ / ‖ψ‖` with the finite-difference `D₀`.
    pub residual: f64,
    /// `‖T₀φ'‖ / ‖φ'‖` for `φ' = Uvψ`.
    pub round_trip: f64,
    /// Fraction of `‖ψ‖²` carried by the outermost cell layer of the grid.
    pub shell_fraction: f64,
}

/// Both sides of `⟨G0 f, G0 f⟩ = ⟨f, G1 f⟩` for `f = v*φ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    /// `‖G0 v*φ‖²`, lattice sum plus far field.
    pub lhs: f64,
    /// `⟨v*φ, G1 v*φ⟩`.
    pub rhs: f64,
    /// Far-field part of `lhs` from outside the extended lattice.
    pub far_field: f64,
    /// `|lhs - rhs| / |lhs|`.
    pub relative_error: f64,
    /// `|lhs + rhs| / |lhs|`, the residual of the identity with the opposite sign.
    pub relative_error_negated: f64,
}

/// Quantities derived from a set of kernel vectors by direct kernel sums.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// `ψₐ = -G0 v*φₐ` on the computational grid.
    pub eigenfunctions: Vec<SpinorField>,
    /// `Aₐᵦ = ⟨v*φₐ, G1 v*φᵦ⟩`.
    pub g1_form: Mat<C64>,
    /// `⟨ψₐ, ψᵦ⟩` on the extended lattice, far field included.
    pub gram: Mat<C64>,
    /// Far-field part of `gram`.
    pub far_field: Mat<C64>,
    /// `⟨ψₐ, ψᵦ⟩` on the computational grid only.
    pub grid_gram: Mat<C64>,
}

/// `∫_{S²} max_k |ωₖ| dΩ`, which equals the integral of `|x|⁻⁴` outside the unit cube.
pub fn cube_far_field_constant() -> f64 {
    let gl = GaussLegendre::new(NonZeroUsize::new(64).expect("nonzero"));
    let nodes: Vec<(f64, f64)> = gl.nodes().zip(gl.weights()).map(|(x, w)| (*x, *w)).collect();
    let mut face = 0.0;
    for (a, wa) in &nodes {
        for (b, wb) in &nodes {
            face += wa * wb / (1.0 + a * a + b * b).powi(2);
        }
    }
    6.0 * face
}

/// Reconstructs `ψ = -G0 v*φ` for each column of `phi` (symmetrized coordinates) and
/// evaluates the quadratic forms of `G1` and of `G0*G0` on `v*φ`.
///
/// The `G0*G0` form is `‖G0 v*φ‖²` summed on an extended lattice of the same spacing
/// plus the monopole far field `|m|² C_cube / (16π² L)`, where `m = ∫ v*φ` and `L` is
/// the half-width of that lattice.
pub fn reconstruct(pot: &FactorizedPotential, grid: &SpatialGrid, phi: &Mat<C64>) -> Result<Reconstruction> {
    check_grid(pot, grid)?;
    check_uniform(grid)?;
    let r = phi.ncols();
    let sqrt_w: Vec<f64> = grid.weights.iter().map(|w| w.sqrt()).collect();
    let v = pot.v();
    // qₐ[j] = wⱼ v(xⱼ)ᴴ φₐ(xⱼ), the quadrature charges of v*φₐ.
    let charges: Vec<Vec<Spinor>> = (0..r)
        .map(|a| {
            (0..grid.len())
                .map(|j| {
                    let s = [0, 1, 2, 3].map(|c| phi[(4 * j + c, a)]);
                    v[j].adjoint().mul_vec(&s).map(|z| z * sqrt_w[j])
                })
                .collect()
        })
        .collect();

    let g0_sums = kernel_sum(g0_disp, Mat4::zero(), &grid.points, &grid.points, &charges);
    let eigenfunctions: Vec<SpinorField> = g0_sums
        .into_iter()
        .map(|vals| SpinorField { descriptor: grid.descriptor, values: vals.into_iter().map(|s| s.map(|z| -z)).collect() })
        .collect();

    let g1_diag = DiagonalRule::default().block(&g1_kernel, grid.points[0], grid.local_width(0))?;
    let g1_sums = kernel_sum(g1_disp, g1_diag, &grid.points, &grid.points, &charges);
    let g1_form = Mat::from_fn(r, r, |a, b| {
        charges[a].iter().zip(&g1_sums[b]).map(|(q, s)| (0..4).map(|c| q[c].conj() * s[c]).sum::<C64>()).sum()
    });

    let ext = extended_lattice(grid, IDENTITY_EXTENSION)?;
    let ext_sums = kernel_sum(g0_disp, Mat4::zero(), &ext.points, &grid.points, &charges);
    let half_width = ext.descriptor.box_radius;
    let scale = cube_far_field_constant() / (16.0 * PI * PI * half_width);
    let monopoles: Vec<Spinor> = charges
        .iter()
        .map(|q| q.iter().fold([ZERO; 4], |acc, s| [0, 1, 2, 3].map(|c| acc[c] + s[c])))
        .collect();
    let dot = |a: &Spinor, b: &Spinor| (0..4).map(|c| a[c].conj() * b[c]).sum::<C64>();
    let far_field = Mat::from_fn(r, r, |a, b| dot(&monopoles[a], &monopoles[b]) * scale);
    let gram = Mat::from_fn(r, r, |a, b| {
        let lattice: C64 = ext_sums[a].iter().zip(&ext_sums[b]).zip(&ext.weights).map(|((x, y), w)| dot(x, y) * *w).sum();
        lattice + far_field[(a, b)]
    });
    let grid_gram = Mat::from_fn(r, r, |a, b| eigenfunctions[a].inner(&eigenfunctions[b], grid));
    Ok(Reconstruction { eigenfunctions, g1_form, gram, far_field, grid_gram })
}

/// Result of threshold classification.
#[derive(Clone, Debug)]
pub struct ThresholdReport {
    pub classification: Classification,
    /// Kernel detection tolerance relative to `σ_max`.
    pub tol: f64,
    pub sigma_max: f64,
    /// Smallest singular values of `T₀`, ascending.
    pub smallest_singular_values: Vec<f64>,
    /// Orthonormal kernel vectors of `T₀` as columns (symmetrized coordinates).
    pub kernel: Mat<C64>,
    /// The kernel vectors as fields.
    pub kernel_basis: Vec<SpinorField>,
    /// `T₀` itself.
    pub t0: GridOperator,
    /// `(T₀ + S₁)⁻¹`.
    pub d1: GridOperator,
    /// `⟨v*φₐ, G1 v*φᵦ⟩` in the kernel basis.
    pub g1_form: Option<Mat<C64>>,
    /// Inverse of `g1_form`, the coordinates of `D₂` in the kernel basis.
    pub d2_coords: Option<Mat<C64>>,
    pub eigenfunctions: Vec<SpinorField>,
    pub checks: Vec<EigenfunctionCheck>,
    pub identity: Vec<IdentityCheck>,
    /// Gram matrix of the eigenfunctions on the extended lattice, far field included.
    pub gram: Option<Mat<C64>>,
    /// Gram matrix of the eigenfunctions on the computational grid.
    pub grid_gram: Option<Mat<C64>>,
    /// Set when `S₁ v G1 v* S₁` is not invertible on the kernel.
    pub inconsistency: Option<String>,
}

impl ThresholdReport {
    pub fn rank(&self) -> usize {
        self.kernel.ncols()
    }

    pub fn is_regular(&self) -> bool {
        self.classification == Classification::Regular
    }

    pub fn sigma_min(&self) -> f64 {
        self.smallest_singular_values[0]
    }

    /// Orthogonal projection `S₁ = ΦΦᴴ` onto the kernel.
    pub fn s1(&self) -> GridOperator {
        GridOperator { n_points: self.t0.n_points, matrix: outer(&self.kernel) }
    }

    /// `D₂ = Φ A⁻¹ Φᴴ`, the inverse of `S₁ v G1 v* S₁` on the kernel.
    pub fn d2(&self) -> Option<GridOperator> {
        self.d2_coords
            .as_ref()
            .map(|x| GridOperator { n_points: self.t0.n_points, matrix: &self.kernel * x * self.kernel.adjoint() })
    }

    /// Serializable digest of the report.
    pub fn summary(&self) -> ThresholdSummary {
        ThresholdSummary {
            classification: self.classification,
            tol: self.tol,
            sigma_max: self.sigma_max,
            smallest_singular_values: self.smallest_singular_values.clone(),
            kernel_dimension: self.rank(),
            eigenfunctions: self.checks.clone(),
            identity: self.identity.clone(),
            d2_hermiticity_defect: self.d2_coords.as_ref().map(|m| hermiticity_defect(m.as_ref())),
            inconsistency: self.inconsistency.clone(),
        }
    }

    /// Writes `kernel_<k>` and `eigenfunction_<k>` field datasets into `dir`,
    /// tagging each header with `config_hash`.
    pub fn save_fields(&self, dir: &Path, config_hash: &str) -> Result<()> {
        #[derive(Serialize)]
        struct FieldHeader<'a> {
            kind: &'a str,
            index: usize,
            grid: crate::grid::GridDescriptor,
            config_hash: &'a str,
        }
        let sets = [("kernel", &self.kernel_basis), ("eigenfunction", &self.eigenfunctions)];
        for (kind, fields) in sets {
            for (index, f) in fields.iter().enumerate() {
                let data: Vec<C64> = f.values.iter().flatten().copied().collect();
                let header = FieldHeader { kind, index, grid: f.descriptor, config_hash };
                write_dataset(&dir.join(format!("{kind}_{index}")), &header, &data)?;
            }
        }
        Ok(())
    }
}

/// JSON-facing digest of a [`ThresholdReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub classification: Classification,
    pub tol: f64,
    pub sigma_max: f64,
    pub smallest_singular_values: Vec<f64>,
    pub kernel_dimension: usize,
    pub eigenfunctions: Vec<EigenfunctionCheck>,
    pub identity: Vec<IdentityCheck>,
    pub d2_hermiticity_defect: Option<f64>,
    pub inconsistency: Option<String>,
}

/// `M Mᴴ`, the projection onto the span of orthonormal columns.
fn outer(m: &Mat<C64>) -> Mat<C64> {
    m * m.adjoint()
}

fn relative_gap(lhs: f64, rhs: f64) -> f64 {
    if lhs == 0.0 && rhs == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / lhs.abs()
    }
}

/// Classifies zero energy for `pot` and builds the threshold operators.
///
/// Eigenvalues of the Hermitian `T₀` with `|μ| < tol·σ_max` span the kernel.
pub fn classify_threshold(pot: &FactorizedPotential, grid: &SpatialGrid, tol: f64) -> Result<ThresholdReport> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Validation(format!("kernel tolerance must lie in (0, 1), got {tol}")));
    }
    check_uniform(grid)?;
    let t0 = build_t0(pot, grid)?;
    let scale = t0.frobenius().max(1.0);
    let defect = t0.hermiticity_defect();
    if defect > 1e-12 * scale {
        return Err(Error::NonHermitian { defect });
    }
    let order = t0.order();
    let (vals, vecs) = hermitian_eigen(t0.matrix.as_ref())?;
    let mut sv: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
    sv.sort_by(f64::total_cmp);
    let sigma_max = *sv.last().expect("nonempty operator");
    let kernel_idx: Vec<usize> = (0..order).filter(|&k| vals[k].abs() < tol * sigma_max).collect();
    let r = kernel_idx.len();
    let kernel = Mat::from_fn(order, r, |i, a| vecs[(i, kernel_idx[a])]);
    // T₀ restricted to the complement of its declared kernel, so that S₁D₁ = D₁S₁ = S₁.
    let mut shifted = &t0.matrix + outer(&kernel);
    for (a, &k) in kernel_idx.iter().enumerate() {
        let col = kernel.col(a);
        shifted -= (col * col.adjoint()) * faer::Scale(C64::new(vals[k], 0.0));
    }
    let d1 = GridOperator { n_points: grid.len(), matrix: Lu::new(shifted.as_ref()).inverse() };
    let kernel_basis: Vec<SpinorField> = (0..r)
        .map(|a| SpinorField::from_symmetrized(grid, &(0..order).map(|i| kernel[(i, a)]).collect::<Vec<_>>()))
        .collect();
    let mut report = ThresholdReport {
        classification: if r == 0 { Classification::Regular } else { Classification::Eigenvalue },
        tol,
        sigma_max,
        smallest_singular_values: sv.into_iter().take(REPORTED_SINGULAR_VALUES).collect(),
        kernel,
        kernel_basis,
        t0,
        d1,
        g1_form: None,
        d2_coords: None,
        eigenfunctions: Vec::new(),
        checks: Vec::new(),
        identity: Vec::new(),
        gram: None,
        grid_gram: None,
        inconsistency: None,
    };
    if r == 0 {
        return Ok(report);
    }

    let rec = reconstruct(pot, grid, &report.kernel)?;
    let u = pot.u();
    let v = pot.v();
    let uv: Vec<Mat4> = u.iter().zip(&v).map(|(u, v)| *u * *v).collect();
    for psi in &rec.eigenfunctions {
        let norm = psi.l2_norm(grid);
        let h_psi = dirac_fd(psi, grid)?.combine(C64::new(1.0, 0.0), &psi.apply_pointwise(&pot.values), C64::new(1.0, 0.0));
        let residual = h_psi.l2_norm(grid) / norm;
        let phi_back = psi.apply_pointwise(&uv).to_symmetrized(grid);
        let t_phi = report.t0.apply(&phi_back);
        let round_trip = crate::linalg::vec_norm(&t_phi) / crate::linalg::vec_norm(&phi_back);
        let shell: f64 = psi
            .values
            .iter()
            .zip(&grid.weights)
            .enumerate()
            .filter(|(i, _)| grid.in_boundary_shell(*i, 1))
            .map(|(_, (s, w))| w * s.iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum();
        report.checks.push(EigenfunctionCheck { norm, residual, round_trip, shell_fraction: shell / (norm * norm) });
    }
    report.identity = (0..r)
        .map(|a| {
            let lhs = rec.gram[(a, a)].re;
            let rhs = rec.g1_form[(a, a)].re;
            IdentityCheck {
                lhs,
                rhs,
                far_field: rec.far_field[(a, a)].re,
                relative_error: relative_gap(lhs, rhs),
                relative_error_negated: relative_gap(lhs, -rhs),
            }
        })
        .collect();

    let sv_a = singular_values(rec.g1_form.as_ref())?;
    let (a_max, a_min) = (sv_a[0], sv_a[r - 1]);
    if !(a_min.is_finite() && a_min > D2_CONDITION_FLOOR * a_max) {
        report.inconsistency = Some(format!(
            "S1 v G1 v* S1 is numerically singular on the kernel (sigma_min = {a_min:.3e}, sigma_max = {a_max:.3e})"
        ));
    } else {
        report.d2_coords = Some(Lu::new(rec.g1_form.as_ref()).inverse());
    }
    report.g1_form = Some(rec.g1_form);
    report.gram = Some(rec.gram);
    report.grid_gram = Some(rec.grid_gram);
    report.eigenfunctions = rec.eigenfunctions;
    Ok(report)
}

/// Relative residuals of the `G0`/`G1` identity, one per kernel vector.
///
/// Empty for a regular report.
pub fn verify_g0g1_identity(report: &ThresholdReport) -> Vec<f64> {
    report.identity.iter().map(|c| c.relative_error).collect()
}

/// The projection `P₀ = G0 v D₂ v* G0` onto the threshold eigenspace.
#[derive(Clone, Debug)]
pub struct ProjectionP0 {
    /// `P₀` on the computational grid (symmetrized coordinates).
    pub operator: GridOperator,
    /// Numerical rank.
    pub rank: usize,
    /// Eigenvalues of `P₀` in L²(ℝ³), ascending.
    pub spectrum: Vec<f64>,
    /// `‖P₀² - P₀‖_F / ‖P₀‖_F` in L²(ℝ³) (extended lattice plus far field).
    pub idempotency_defect: f64,
    /// The same defect with inner products truncated to the computational grid.
    pub grid_idempotency_defect: f64,
}

/// `G^{1/2} X G^{1/2}` for Hermitian positive `G`.
fn congruence_sqrt(g: &Mat<C64>, x: &Mat<C64>) -> Result<Mat<C64>> {
    let (vals, vecs) = hermitian_eigen(g.as_ref())?;
    let r = g.nrows();
    let root = Mat::from_fn(r, r, |i, j| {
        (0..r).map(|k| vecs[(i, k)] * vals[k].max(0.0).sqrt() * vecs[(j, k)].conj()).sum::<C64>()
    });
    Ok(&root * x * &root)
}

fn idempotency(h: &Mat<C64>) -> f64 {
    let h2 = h * h;
    (&h2 - h).norm_l2() / h.norm_l2()
}

/// Builds `P₀ = Ψ A⁻¹ Ψᴴ`, where `Ψ` holds the reconstructed eigenfunctions.
///
/// Its range lies in the span of the eigenfunctions by construction. In an
/// orthonormal basis of that span `P₀` is `G^{1/2} A⁻¹ G^{1/2}` with `G` the
/// Gram matrix, which is how rank and idempotency are measured.
pub fn project_p0(report: &ThresholdReport, grid: &SpatialGrid) -> Result<ProjectionP0> {
    if report.is_regular() {
        return Err(Error::RegularThreshold);
    }
    let (Some(x), Some(gram), Some(grid_gram)) = (&report.d2_coords, &report.gram, &report.grid_gram) else {
        return Err(Error::Validation(
            report.inconsistency.clone().unwrap_or_else(|| "report carries no D2".into()),
        ));
    };
    let order = 4 * grid.len();
    let r = report.rank();
    let psi: Vec<Vec<C64>> = report.eigenfunctions.iter().map(|f| f.to_symmetrized(grid)).collect();
    let psi_mat = Mat::from_fn(order, r, |i, a| psi[a][i]);
    let operator = GridOperator { n_points: grid.len(), matrix: &psi_mat * x * psi_mat.adjoint() };
    let h = congruence_sqrt(gram, x)?;
    let h = Mat::from_fn(r, r, |i, j| (h[(i, j)] + h[(j, i)].conj()) * 0.5);
    let spectrum = hermitian_eigenvalues(h.as_ref())?;
    let top = spectrum.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    let rank = spectrum.iter().filter(|s| s.abs() > 1e-6 * top).count();
    let h_grid = congruence_sqrt(grid_gram, x)?;
    Ok(ProjectionP0 {
        operator,
        rank,
        spectrum,
        idempotency_defect: idempotency(&h),
        grid_idempotency_defect: idempotency(&h_grid),
    })
}

/// Outcome of a coupling scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingScanResult {
    pub family: PotentialFamily,
    pub tol: f64,
    pub couplings: Vec<f64>,
    /// `σ_min(T₀(g))` at each sampled coupling.
    pub min_singular: Vec<f64>,
    /// Number of negative eigenvalues of `T₀(g)`.
    pub negative_eigenvalues: Vec<usize>,
    /// Number of negative entries of `U` over the grid.
    pub u_negative: Vec<usize>,
    /// Bracket `[g_lo, g_hi]` of the first zero crossing.
    pub critical_g: Option<[f64; 2]>,
    pub bisection_steps: usize,
}

impl CouplingScanResult {
    /// Midpoint of the critical bracket.
    pub fn critical_coupling(&self) -> Option<f64> {
        self.critical_g.map(|[a, b]| 0.5 * (a + b))
    }

    /// The scanned family at the critical coupling.
    pub fn critical_family(&self) -> Option<PotentialFamily> {
        self.critical_coupling().map(|g| self.family.with_coupling(g))
    }
}

fn t0_at(family: &PotentialFamily, grid: &SpatialGrid, g: f64) -> Result<(GridOperator, usize)> {
    let fam = PotentialFamily::new(family.kind, g, family.delta, family.seed)?;
    let pot = sample_potential(&fam, grid)?;
    let u_neg = pot.factors.iter().map(|f| f.u.iter().filter(|s| **s < 0.0).count()).sum();
    Ok((build_t0(&pot, grid)?, u_neg))
}

/// [`coupling_scan_with`] at the default tolerance and bisection width.
pub fn coupling_scan(
    family: &PotentialFamily,
    grid: &SpatialGrid,
    g_range: (f64, f64),
    steps: usize,
) -> Result<CouplingScanResult> {
    coupling_scan_with(family, grid, g_range, steps, DEFAULT_TOL, BISECTION_REL_WIDTH)
}

/// Samples `σ_min(T₀(g))` on `steps` equispaced couplings and brackets the first
/// coupling where an eigenvalue of `T₀` crosses zero.
///
/// Crossings are located by the inertia of `T₀(g)`, which changes by the full
/// multiplicity of a degenerate crossing where `σ_min` alone may not change sign.
/// Inertia jumps caused by a change in the signature of `U` are not crossings.
/// The bracket is bisected with LBLᴴ inertia counts to relative width `rel_width`.
pub fn coupling_scan_with(
    family: &PotentialFamily,
    grid: &SpatialGrid,
    g_range: (f64, f64),
    steps: usize,
    tol: f64,
    rel_width: f64,
) -> Result<CouplingScanResult> {
    let (lo, hi) = g_range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Validation(format!("coupling range [{lo}, {hi}] is degenerate")));
    }
    if steps < 2 {
        return Err(Error::Validation("a coupling scan needs at least two samples".into()));
    }
    check_uniform(grid)?;
    let couplings: Vec<f64> = (0..steps).map(|k| lo + (hi - lo) * k as f64 / (steps - 1) as f64).collect();
    let mut min_singular = Vec::with_capacity(steps);
    let mut negative_eigenvalues = Vec::with_capacity(steps);
    let mut u_negative = Vec::with_capacity(steps);
    let mut hit = None;
    for &g in &couplings {
        let (t0, u_neg) = t0_at(family, grid, g)?;
        let vals = hermitian_eigenvalues(t0.matrix.as_ref())?;
        let smax = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let smin = vals.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        log::debug!("scan g = {g}: sigma_min = {smin:.3e}");
        if hit.is_none() && smin < tol * smax {
            hit = Some(g);
        }
        min_singular.push(smin);
        negative_eigenvalues.push(vals.iter().filter(|v| **v < 0.0).count());
        u_negative.push(u_neg);
    }
    let mut result = CouplingScanResult {
        family: *family,
        tol,
        couplings,
        min_singular,
        negative_eigenvalues,
        u_negative,
        critical_g: None,
        bisection_steps: 0,
    };
    let jump = (0..steps - 1).find(|&k| {
        result.u_negative[k] == result.u_negative[k + 1]
            && result.negative_eigenvalues[k] != result.negative_eigenvalues[k + 1]
    });
    let first_jump_g = jump.map(|k| result.couplings[k]);
    match (hit, jump) {
        (Some(g), _) if first_jump_g.is_none_or(|jg| g <= jg) => {
            result.critical_g = Some([g, g]);
        }
        (_, Some(k)) => {
            let (mut a, mut b) = (result.couplings[k], result.couplings[k + 1]);
            let neg_a = result.negative_eigenvalues[k];
            while b - a > rel_width * a.abs().max(b.abs()) {
                let mid = 0.5 * (a + b);
                let (t0, u_neg) = t0_at(family, grid, mid)?;
                if u_neg != result.u_negative[k] {
                    return Err(Error::Validation(format!("signature of U changes inside the bracket at g = {mid}")));
                }
                if inertia(t0.matrix.as_ref()).negative == neg_a {
                    a = mid;
                } else {
                    b = mid;
                }
                result.bisection_steps += 1;
            }
            result.critical_g = Some([a, b]);
        }
        _ => log::info!("no zero crossing of T0 in [{lo}, {hi}]"),
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::potential::FamilyKind;

    fn small_grid() -> SpatialGrid {
        build_grid(GridScheme::UniformTensor, 5, 2.0).unwrap()
    }

    #[test]
    fn free_t0_is_u_and_regular() {
        let g = small_grid();
        let pot = sample_potential(&PotentialFamily::zero(), &g).unwrap();
        let t0 = build_t0(&pot, &g).unwrap();
        let id = GridOperator::identity(g.len());
        assert_eq!(t0.matrix, id.matrix);
        let rep = classify_threshold(&pot, &g, DEFAULT_TOL).unwrap();
        assert!(rep.is_regular());
        assert_eq!(rep.sigma_min(), 1.0);
        assert_eq!(rep.rank(), 0);
        assert!(rep.d2().is_none());
        assert!(matches!(project_p0(&rep, &g), Err(Error::RegularThreshold)));
        assert!(verify_g0g1_identity(&rep).is_empty());
    }

    #[test]
    fn weak_well_is_regular_with_hermitian_t0() {
        let g = small_grid();
        let pot = sample_potential(&PotentialFamily::gaussian_well(1.0), &g).unwrap();
        let t0 = build_t0(&pot, &g).unwrap();
        assert!(t0.hermiticity_defect() < 1e-14);
        let rep = classify_threshold(&pot, &g, DEFAULT_TOL).unwrap();
        assert!(rep.is_regular());
        assert!(rep.sigma_min() > 1e-3);
        let sv = singular_values(t0.matrix.as_ref()).unwrap();
        assert!((sv.last().unwrap() - rep.sigma_min()).abs() < 1e-10);
    }

    #[test]
    fn d1_inverts_t0_in_regular_case() {
        let g = small_grid();
        let fam = PotentialFamily::new(FamilyKind::OffDiagonalCoupling, 0.7, 4.0, 0).unwrap();
        let pot = sample_potential(&fam, &g).unwrap();
        let t0 = build_t0(&pot, &g).unwrap();
        let rep = classify_threshold(&pot, &g, DEFAULT_TOL).unwrap();
        let prod = &t0.matrix * &rep.d1.matrix;
        let err = crate::linalg::rel_diff(prod.as_ref(), Mat::<C64>::identity(t0.order(), t0.order()).as_ref());
        assert!(err < 1e-10);
    }

    #[test]
    fn far_field_constant_matches_reference() {
        // Six faces times ∫∫_{[-1,1]²} (1 + a² + b²)⁻² da db by adaptive cubature.
        assert!((cube_far_field_constant() - 10.445037016405239).abs() < 1e-10);
        // Between the inscribed and circumscribed spheres.
        assert!(cube_far_field_constant() < 4.0 * PI && cube_far_field_constant() > 4.0 * PI / 3f64.sqrt());
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = small_grid();
        let fam = PotentialFamily::gaussian_well(1.0);
        assert!(coupling_scan(&fam, &g, (3.0, 3.0), 5).is_err());
        assert!(coupling_scan(&fam, &g, (0.0, 1.0), 1).is_err());
        let pot = sample_potential(&fam, &g).unwrap();
        assert!(classify_threshold(&pot, &g, 0.0).is_err());
        let other = build_grid(GridScheme::UniformTensor, 6, 2.0).unwrap();
        assert!(build_t0(&pot, &other).is_err());
    }
}
