//! The operator `M±(λ) = U + v R0±(λ) v*`, its inversion by several routes, the
//! perturbed resolvent from the symmetric resolvent identity
//! `R_V = R0 - R0 v* M⁻¹ v R0`, the perturbed spectral density and Born terms.
//!
//! In symmetrized coordinates `(M̂⁺)ᴴ = M̂⁻`, so one factorization of `M̂⁺` answers
//! solves for both branches.

use faer::{Mat, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{sub3, Mat4, C64};
use crate::error::{Error, Result};
use crate::grid::{assemble_blocks, DiagonalRule, GridOperator, SpatialGrid};
use crate::kernels::{expansion_error_disp, g1_disp, resolvent_free_disp, Branch, SpectralPoint};
use crate::linalg::{singular_values, Lu};
use crate::potential::FactorizedPotential;
use crate::threshold::ThresholdReport;

/// Neumann series stops once a term is this small relative to the partial sum.
pub const NEUMANN_RATIO: f64 = 1e-10;
/// Neumann series falls back to a direct solve after this many terms.
pub const NEUMANN_MAX_TERMS: usize = 50;
/// Default Tikhonov parameter for the regularized direct route.
pub const TIKHONOV_EPS: f64 = 1e-12;
/// Relative residual allowed per unit of condition number.
const RESIDUAL_PER_CONDITION: f64 = 1e-8;

/// How `M⁻¹` was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InversionRoute {
    /// Dense LU of `M`.
    Direct,
    /// `D₁ Σₖ (-(M - T₀) D₁)ᵏ`, regular thresholds only.
    Neumann,
    /// `(M+S₁)⁻¹ + (M+S₁)⁻¹ S₁ B⁻¹ S₁ (M+S₁)⁻¹` with `B = S₁ - S₁(M+S₁)⁻¹S₁`.
    JensenNenciu,
    /// `(MᴴM + εI)⁻¹ Mᴴ`.
    Tikhonov { epsilon: f64 },
}

/// `M±(λ)` with an optional inverse.
#[derive(Clone, Debug)]
pub struct MLambda {
    pub point: SpectralPoint,
    pub operator: GridOperator,
    pub inverse: Option<GridOperator>,
    pub route: Option<InversionRoute>,
    /// `‖M‖₁ ‖M⁻¹‖₁`, available once inverted.
    pub condition: Option<f64>,
    /// Number of Neumann terms summed, if that route was used.
    pub neumann_terms: Option<usize>,
}

fn check_grid(pot: &FactorizedPotential, grid: &SpatialGrid) -> Result<()> {
    if pot.grid != grid.descriptor {
        return Err(Error::Validation("potential was sampled on a different grid".into()));
    }
    Ok(())
}

/// `R0±(λ)(x, y)`, with the symmetric diagonal rule when `x = y`.
pub fn r0_or_diagonal(p: SpectralPoint, x: [f64; 3], y: [f64; 3], width: f64) -> Mat4 {
    resolvent_free_disp(p.lambda, p.branch, sub3(x, y), 0)
        .unwrap_or_else(|| DiagonalRule::default().free_resolvent_block(p, width))
}

/// Assembles `Σᵢⱼ √wᵢ v(xᵢ) K(xᵢ, xⱼ) v(xⱼ)ᴴ √wⱼ` plus `U` on the diagonal if asked.
fn assemble_vkv<K, D>(pot: &FactorizedPotential, grid: &SpatialGrid, kernel: K, diagonal: D, with_u: bool) -> Result<GridOperator>
where
    K: Fn([f64; 3]) -> Option<Mat4> + Sync,
    D: Fn(f64) -> Mat4 + Sync,
{
    check_grid(pot, grid)?;
    let v = pot.v();
    let v_adj: Vec<Mat4> = v.iter().map(Mat4::adjoint).collect();
    let mut op = assemble_blocks(grid, |i, j| {
        let k = if i == j {
            diagonal(grid.local_width(i))
        } else {
            kernel(sub3(grid.points[i], grid.points[j])).ok_or(Error::CoincidentPoints { x: grid.points[i] })?
        };
        Ok(v[i] * k * v_adj[j])
    })?;
    if with_u {
        for (i, f) in pot.factors.iter().enumerate() {
            let b = op.block(i, i) + f.u_matrix();
            op.set_block(i, i, &b);
        }
    }
    Ok(op)
}

/// Assembles `M±(λ) = U + v R0±(λ) v*` from the closed-form kernel.
///
/// At `λ = 0` the result equals [`crate::threshold::build_t0`] bitwise for both branches.
pub fn assemble_m(pot: &FactorizedPotential, grid: &SpatialGrid, p: SpectralPoint) -> Result<MLambda> {
    let rule = DiagonalRule::default();
    let operator = assemble_vkv(
        pot,
        grid,
        |d| resolvent_free_disp(p.lambda, p.branch, d, 0),
        |w| rule.free_resolvent_block(p, w),
        true,
    )?;
    Ok(MLambda { point: p, operator, inverse: None, route: None, condition: None, neumann_terms: None })
}

/// The pieces `v G1 v*` and `v E1±(λ) v*` of the expansion `M = T₀ + λ v G1 v* + v E1 v*`.
pub fn expansion_operators(pot: &FactorizedPotential, grid: &SpatialGrid, p: SpectralPoint) -> Result<(GridOperator, GridOperator)> {
    let rule = DiagonalRule::default();
    let g1 = assemble_vkv(pot, grid, g1_disp, g1_symmetric, false)?;
    let e1 = assemble_vkv(
        pot,
        grid,
        |d| expansion_error_disp(1, p, d),
        |w| rule.free_resolvent_block(p, w) - g1_symmetric(w).scale_re(p.lambda),
        false,
    )?;
    Ok((g1, e1))
}

/// Symmetric-rule diagonal block of `G1 = I/(4π|x-y|)`.
fn g1_symmetric(width: f64) -> Mat4 {
    let DiagonalRule::Symmetric { factor } = DiagonalRule::default() else {
        unreachable!("the default rule is symmetric")
    };
    Mat4::identity().scale_re(1.0 / (4.0 * std::f64::consts::PI * factor * width))
}

/// `max |M - (T₀ + λ v G1 v* + v E1 v*)|` between the two assembly paths.
pub fn two_path_defect(pot: &FactorizedPotential, grid: &SpatialGrid, t0: &GridOperator, m: &MLambda) -> Result<f64> {
    let (g1, e1) = expansion_operators(pot, grid, m.point)?;
    let lambda = m.point.lambda;
    let n = m.operator.order();
    let mut worst = 0.0_f64;
    for c in 0..n {
        for r in 0..n {
            let other = t0.matrix[(r, c)] + g1.matrix[(r, c)] * lambda + e1.matrix[(r, c)];
            worst = worst.max((m.operator.matrix[(r, c)] - other).norm());
        }
    }
    Ok(worst)
}

fn one_norm(m: MatRef<'_, C64>) -> f64 {
    (0..m.ncols()).map(|c| (0..m.nrows()).map(|r| m[(r, c)].norm()).sum::<f64>()).fold(0.0, f64::max)
}

/// `max |A B - I|`.
fn identity_residual(a: MatRef<'_, C64>, b: MatRef<'_, C64>) -> f64 {
    let p = a * b;
    let n = p.nrows();
    let mut worst = 0.0_f64;
    for c in 0..n {
        for r in 0..n {
            let want = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((p[(r, c)] - want).norm());
        }
    }
    worst
}

/// Inverts `M` by the natural route: direct when zero is regular, Jensen–Nenciu otherwise.
pub fn invert_m(m: MLambda, report: &ThresholdReport) -> Result<MLambda> {
    let route = if report.is_regular() { InversionRoute::Direct } else { InversionRoute::JensenNenciu };
    invert_m_with(m, report, route)
}

/// Inverts `M` by the requested route and checks `‖M M⁻¹ - I‖ ≤ 1e-8 · cond`.
pub fn invert_m_with(mut m: MLambda, report: &ThresholdReport, route: InversionRoute) -> Result<MLambda> {
    let lambda = m.point.lambda;
    if !report.is_regular() && lambda == 0.0 {
        return Err(Error::ZeroEnergyExcluded);
    }
    let a = m.operator.matrix.as_ref();
    let n = a.nrows();
    let mut used = route;
    let inverse = match route {
        InversionRoute::Direct => Lu::new(a).inverse(),
        InversionRoute::JensenNenciu => {
            let solver = ResolventSolver::from_operator(&m.operator, report, m.point)?;
            solver.solve(m.point.branch, Mat::<C64>::identity(n, n).as_ref())
        }
        InversionRoute::Tikhonov { epsilon } => {
            let a_adj = a.adjoint().to_owned();
            let mut normal = &a_adj * a;
            for k in 0..n {
                normal[(k, k)] += epsilon;
            }
            Lu::new(normal.as_ref()).solve(a_adj.as_ref())
        }
        InversionRoute::Neumann => {
            if !report.is_regular() {
                return Err(Error::Validation("the Neumann route needs a regular threshold".into()));
            }
            let d1 = report.d1.matrix.as_ref();
            let e = a - report.t0.matrix.as_ref();
            let q = -(&e * d1);
            let mut term = d1.to_owned();
            let mut sum = term.clone();
            let mut converged = None;
            for k in 1..=NEUMANN_MAX_TERMS {
                term = &term * &q;
                sum += &term;
                if term.norm_l2() < NEUMANN_RATIO * sum.norm_l2() {
                    converged = Some(k + 1);
                    break;
                }
            }
            match converged {
                Some(k) => {
                    m.neumann_terms = Some(k);
                    sum
                }
                None => {
                    log::warn!("Neumann series did not converge at lambda = {lambda}; using a direct solve");
                    used = InversionRoute::Direct;
                    Lu::new(a).inverse()
                }
            }
        }
    };
    let condition = one_norm(a) * one_norm(inverse.as_ref());
    let residual = identity_residual(a, inverse.as_ref());
    if !(condition.is_finite() && residual <= RESIDUAL_PER_CONDITION * condition.max(1.0)) {
        let sigma_min = singular_values(a).map(|s| *s.last().expect("nonempty")).unwrap_or(0.0);
        return Err(Error::Singular { lambda, sigma_min });
    }
    m.inverse = Some(GridOperator { n_points: m.operator.n_points, matrix: inverse });
    m.route = Some(used);
    m.condition = Some(condition);
    Ok(m)
}

/// Factorization of `M̂⁺(λ) + S₁` that solves `M±(λ) X = B` for both branches.
///
/// With `P = M⁺ + S₁` and `S₁ = ΦΦᴴ`, Woodbury gives
/// `(M⁺)⁻¹ = P⁻¹ + P⁻¹Φ (I - ΦᴴP⁻¹Φ)⁻¹ ΦᴴP⁻¹`, and the minus branch uses `Pᴴ`.
pub struct ResolventSolver {
    pub lambda: f64,
    lu: Lu,
    phi: Mat<C64>,
    y_plus: Mat<C64>,
    y_minus: Mat<C64>,
    b_plus_inv: Mat<C64>,
    b_minus_inv: Mat<C64>,
}

impl ResolventSolver {
    /// Assembles `M⁺(λ)` and factorizes it.
    pub fn new(pot: &FactorizedPotential, grid: &SpatialGrid, report: &ThresholdReport, lambda: f64) -> Result<Self> {
        let m = assemble_m(pot, grid, SpectralPoint::plus(lambda))?;
        Self::from_operator(&m.operator, report, SpectralPoint::plus(lambda))
    }

    /// Factorizes a given `M±(λ)`; `p.branch` says which branch `m` is.
    pub fn from_operator(m: &GridOperator, report: &ThresholdReport, p: SpectralPoint) -> Result<Self> {
        let lambda = p.lambda;
        let r = report.rank();
        if r > 0 && lambda == 0.0 {
            return Err(Error::ZeroEnergyExcluded);
        }
        let plus = match p.branch {
            Branch::Plus => m.matrix.clone(),
            Branch::Minus => m.matrix.adjoint().to_owned(),
        };
        let phi = report.kernel.clone();
        let shifted = &plus + &phi * phi.adjoint();
        let lu = Lu::new(shifted.as_ref());
        let y_plus = lu.solve(phi.as_ref());
        let y_minus = lu.solve_adjoint(phi.as_ref());
        let small = |y: &Mat<C64>| -> Result<Mat<C64>> {
            let b = Mat::<C64>::identity(r, r) - phi.adjoint() * y;
            if r > 0 {
                let sv = singular_values(b.as_ref())?;
                if !(sv[r - 1] > 1e-14 * sv[0]) {
                    return Err(Error::Singular { lambda, sigma_min: sv[r - 1] });
                }
            }
            Ok(Lu::new(b.as_ref()).inverse())
        };
        let b_plus_inv = small(&y_plus)?;
        let b_minus_inv = small(&y_minus)?;
        Ok(Self { lambda, lu, phi, y_plus, y_minus, b_plus_inv, b_minus_inv })
    }

    /// `M±(λ)⁻¹ B`.
    pub fn solve(&self, branch: Branch, rhs: MatRef<'_, C64>) -> Mat<C64> {
        let (x, y, binv) = match branch {
            Branch::Plus => (self.lu.solve(rhs), &self.y_plus, &self.b_plus_inv),
            Branch::Minus => (self.lu.solve_adjoint(rhs), &self.y_minus, &self.b_minus_inv),
        };
        if self.phi.ncols() == 0 {
            return x;
        }
        let coeff = binv * (self.phi.adjoint() * &x);
        x + y * coeff
    }
}

/// Left factor rows `R0(xₐ, xᵢ) v(xᵢ)ᴴ √wᵢ`, as a `(4·|xs|) × 4n` matrix.
pub fn left_factor(pot: &FactorizedPotential, grid: &SpatialGrid, p: SpectralPoint, xs: &[[f64; 3]]) -> Mat<C64> {
    let n = grid.len();
    let blocks: Vec<Mat4> = (0..xs.len() * n)
        .into_par_iter()
        .map(|k| {
            let (a, i) = (k / n, k % n);
            let r0 = r0_or_diagonal(p, xs[a], grid.points[i], grid.local_width(i));
            (r0 * pot.factors[i].v.adjoint()).scale_re(grid.weights[i].sqrt())
        })
        .collect();
    Mat::from_fn(4 * xs.len(), 4 * n, |r, c| blocks[(r / 4) * n + c / 4][(r % 4, c % 4)])
}

/// Right factor columns `√wⱼ v(xⱼ) R0(xⱼ, y_b)`, as a `4n × (4·|ys|)` matrix.
pub fn right_factor(pot: &FactorizedPotential, grid: &SpatialGrid, p: SpectralPoint, ys: &[[f64; 3]]) -> Mat<C64> {
    let n = grid.len();
    let blocks: Vec<Mat4> = (0..ys.len() * n)
        .into_par_iter()
        .map(|k| {
            let (b, j) = (k / n, k % n);
            let r0 = r0_or_diagonal(p, grid.points[j], ys[b], grid.local_width(j));
            (pot.factors[j].v * r0).scale_re(grid.weights[j].sqrt())
        })
        .collect();
    Mat::from_fn(4 * n, 4 * ys.len(), |r, c| blocks[(c / 4) * n + r / 4][(r % 4, c % 4)])
}

/// `R0(xₐ, y_b) - [L · X]_{ab}` for the correction `X = M⁻¹ B`.
fn assemble_kernel(
    grid: &SpatialGrid,
    p: SpectralPoint,
    xs: &[[f64; 3]],
    ys: &[[f64; 3]],
    left: &Mat<C64>,
    solved: &Mat<C64>,
) -> Vec<Vec<Mat4>> {
    let corr = left * solved;
    xs.iter()
        .enumerate()
        .map(|(a, x)| {
            ys.iter()
                .enumerate()
                .map(|(b, y)| {
                    let width = grid.local_width(grid.nearest(*x));
                    r0_or_diagonal(p, *x, *y, width) - Mat4::from_fn(|r, c| corr[(4 * a + r, 4 * b + c)])
                })
                .collect()
        })
        .collect()
}

/// `R_V±(λ)(x, y) = R0(x, y) - Σᵢⱼ R0(x, xᵢ) v*ᵢ √wᵢ [M̂⁻¹]ᵢⱼ √wⱼ vⱼ R0(xⱼ, y)`.
///
/// Points that coincide with a grid point (or with each other) use the symmetric
/// diagonal rule for the coinciding `R0` factor.
pub fn perturbed_resolvent(
    pot: &FactorizedPotential,
    grid: &SpatialGrid,
    minv: &MLambda,
    xs: &[[f64; 3]],
    ys: &[[f64; 3]],
) -> Result<Vec<Vec<Mat4>>> {
    check_grid(pot, grid)?;
    let inverse = minv.inverse.as_ref().ok_or_else(|| Error::Validation("M has not been inverted".into()))?;
    let p = minv.point;
    let left = left_factor(pot, grid, p, xs);
    let solved = &inverse.matrix * right_factor(pot, grid, p, ys);
    Ok(assemble_kernel(grid, p, xs, ys, &left, &solved))
}

/// [`perturbed_resolvent`] through a [`ResolventSolver`].
pub fn perturbed_resolvent_solver(
    pot: &FactorizedPotential,
    grid: &SpatialGrid,
    solver: &ResolventSolver,
    branch: Branch,
    xs: &[[f64; 3]],
    ys: &[[f64; 3]],
) -> Result<Vec<Vec<Mat4>>> {
    check_grid(pot, grid)?;
    let p = SpectralPoint { lambda: solver.lambda, branch };
    let left = left_factor(pot, grid, p, xs);
    let solved = solver.solve(branch, right_factor(pot, grid, p, ys).as_ref());
    Ok(assemble_kernel(grid, p, xs, ys, &left, &solved))
}

/// Perturbed spectral density `[R_V⁺ - R_V⁻](λ)(x, y) / (2πi)` on a list of points.
#[derive(Clone, Debug, PartialEq)]
pub struct DensitySample {
    pub lambda: f64,
    pub xs: Vec<[f64; 3]>,
    pub ys: Vec<[f64; 3]>,
    /// `kernel[a][b]` is the density at `(xs[a], ys[b])`.
    pub kernel: Vec<Vec<Mat4>>,
}

impl DensitySample {
    /// `max |K(xₐ, x_b) - K(x_b, xₐ)ᴴ|`; requires `xs == ys`.
    pub fn hermiticity_defect(&self) -> Result<f64> {
        if self.xs != self.ys {
            return Err(Error::Validation("Hermitian symmetry needs matching point lists".into()));
        }
        let n = self.xs.len();
        let mut worst = 0.0_f64;
        for a in 0..n {
            for b in 0..n {
                worst = worst.max((self.kernel[a][b] - self.kernel[b][a].adjoint()).max_abs());
            }
        }
        Ok(worst)
    }

    /// Largest entry magnitude over all sampled pairs.
    pub fn max_abs(&self) -> f64 {
        self.kernel.iter().flatten().map(Mat4::max_abs).fold(0.0, f64::max)
    }
}

/// `(R⁺ - R⁻) / (2πi)` from the two branch kernels.
pub fn density_from_branches(plus: &[Vec<Mat4>], minus: &[Vec<Mat4>]) -> Vec<Vec<Mat4>> {
    let factor = C64::new(0.0, -1.0 / (2.0 * std::f64::consts::PI));
    plus.iter()
        .zip(minus)
        .map(|(rp, rm)| rp.iter().zip(rm).map(|(a, b)| (*a - *b).scale(factor)).collect())
        .collect()
}

/// Evaluates the perturbed spectral density at `λ` on `xs × ys`.
pub fn spectral_density(
    pot: &FactorizedPotential,
    grid: &SpatialGrid,
    report: &ThresholdReport,
    lambda: f64,
    xs: &[[f64; 3]],
    ys: &[[f64; 3]],
) -> Result<DensitySample> {
    if !report.is_regular() && lambda == 0.0 {
        return Err(Error::ZeroEnergyExcluded);
    }
    let solver = ResolventSolver::new(pot, grid, report, lambda)?;
    let plus = perturbed_resolvent_solver(pot, grid, &solver, Branch::Plus, xs, ys)?;
    let minus = perturbed_resolvent_solver(pot, grid, &solver, Branch::Minus, xs, ys)?;
    Ok(DensitySample { lambda, xs: xs.to_vec(), ys: ys.to_vec(), kernel: density_from_branches(&plus, &minus) })
}

/// The Born term `R0 (V R0)ᵏ (x, y)` for `k ∈ {0, 1, 2}` by grid quadrature.
pub fn born_series_term(
    pot: &FactorizedPotential,
    grid: &SpatialGrid,
    p: SpectralPoint,
    k: usize,
    x: [f64; 3],
    y: [f64; 3],
) -> Result<Mat4> {
    check_grid(pot, grid)?;
    if k > 2 {
        return Err(Error::Validation(format!("Born terms are available for k <= 2, got {k}")));
    }
    let width = |i: usize| grid.local_width(i);
    let first = r0_or_diagonal(p, x, y, grid.local_width(grid.nearest(x)));
    if k == 0 {
        return Ok(first);
    }
    // cⱼ = wⱼ V(xⱼ) R0(xⱼ, y).
    let c: Vec<Mat4> = (0..grid.len())
        .map(|j| (pot.values[j] * r0_or_diagonal(p, grid.points[j], y, width(j))).scale_re(grid.weights[j]))
        .collect();
    let inner: Vec<Mat4> = if k == 1 {
        c
    } else {
        (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let s = (0..grid.len())
                    .map(|j| r0_or_diagonal(p, grid.points[i], grid.points[j], width(j)) * c[j])
                    .fold(Mat4::zero(), |a, b| a + b);
                (pot.values[i] * s).scale_re(grid.weights[i])
            })
            .collect()
    };
    Ok((0..grid.len())
        .map(|i| r0_or_diagonal(p, x, grid.points[i], width(i)) * inner[i])
        .fold(Mat4::zero(), |a, b| a + b))
}

/// `R0 (V R0)² V R_V (x, y)`, the remainder after the first three Born terms, so that
/// `R_V = R0 - R0VR0 + R0VR0VR0 - remainder`.
pub fn born_remainder(
    pot: &FactorizedPotential,
    grid: &SpatialGrid,
    minv: &MLambda,
    x: [f64; 3],
    y: [f64; 3],
) -> Result<Mat4> {
    let p = minv.point;
    let n = grid.len();
    let rv = perturbed_resolvent(pot, grid, minv, &grid.points, &[y])?;
    let width = |i: usize| grid.local_width(i);
    let mut layer: Vec<Mat4> = (0..n).map(|k| (pot.values[k] * rv[k][0]).scale_re(grid.weights[k])).collect();
    for _ in 0..2 {
        layer = (0..n)
            .into_par_iter()
            .map(|i| {
                let s = (0..n)
                    .map(|j| r0_or_diagonal(p, grid.points[i], grid.points[j], width(j)) * layer[j])
                    .fold(Mat4::zero(), |a, b| a + b);
                (pot.values[i] * s).scale_re(grid.weights[i])
            })
            .collect();
    }
    Ok((0..n).map(|i| r0_or_diagonal(p, x, grid.points[i], width(i)) * layer[i]).fold(Mat4::zero(), |a, b| a + b))
}
