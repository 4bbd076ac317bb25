//! Spatial grids, quadrature weights and dense kernel operators.
//!
//! Operators are stored in the weight-symmetrized form
//!
//! ```text
//! Â_ij = √wᵢ K(xᵢ, xⱼ) √wⱼ
//! ```
//!
//! which is similar to the Nyström matrix `K(xᵢ, xⱼ) wⱼ` through `W^{1/2}`. The
//! Euclidean geometry of `Â` is the L² geometry of the underlying integral operator,
//! so singular values, Hermiticity and orthonormality are read off directly.

use std::f64::consts::PI;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{alpha, bracket, Mat4, Spinor, C64, I, ZERO};
use crate::error::{Error, Result};
use crate::kernels::{resolvent_free_disp, SpectralPoint};

/// Default effective self-cell radius in units of the cell width.
pub const DIAGONAL_RADIUS_FACTOR: f64 = 0.62;

/// Spatial discretization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridScheme {
    /// `N³` midpoint cells on `[-R, R]³`.
    UniformTensor,
    /// Gauss–Legendre radius × Gauss–Legendre polar cosine × uniform azimuth on the ball of radius `R`.
    RadialSpherical,
}

/// Parameters that fully determine a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDescriptor {
    pub scheme: GridScheme,
    pub n: usize,
    pub box_radius: f64,
}

/// Quadrature points and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGrid {
    pub descriptor: GridDescriptor,
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

/// Builds a deterministic grid.
pub fn build_grid(scheme: GridScheme, n: usize, box_radius: f64) -> Result<SpatialGrid> {
    if n < 2 {
        return Err(Error::Validation(format!("grid size must be at least 2, got {n}")));
    }
    if !(box_radius > 0.0 && box_radius.is_finite()) {
        return Err(Error::Validation(format!("box radius must be positive, got {box_radius}")));
    }
    let descriptor = GridDescriptor { scheme, n, box_radius };
    let (points, weights) = match scheme {
        GridScheme::UniformTensor => uniform_points(n, box_radius),
        GridScheme::RadialSpherical => radial_points(n, box_radius),
    };
    Ok(SpatialGrid { descriptor, points, weights })
}

/// Midpoint coordinates of an `n`-cell partition of `[-r, r]`.
pub fn midpoints(n: usize, r: f64) -> Vec<f64> {
    let h = 2.0 * r / n as f64;
    (0..n).map(|k| -r + h * (k as f64 + 0.5)).collect()
}

fn uniform_points(n: usize, r: f64) -> (Vec<[f64; 3]>, Vec<f64>) {
    let c = midpoints(n, r);
    let h = 2.0 * r / n as f64;
    let mut pts = Vec::with_capacity(n * n * n);
    for &a in &c {
        for &b in &c {
            for &z in &c {
                pts.push([a, b, z]);
            }
        }
    }
    let w = vec![h * h * h; pts.len()];
    (pts, w)
}

fn radial_points(n: usize, r: f64) -> (Vec<[f64; 3]>, Vec<f64>) {
    let gl = gauss_quad::GaussLegendre::new(std::num::NonZeroUsize::new(n).expect("n >= 2"));
    let nodes: Vec<(f64, f64)> = gl.iter().map(|(x, w)| (*x, *w)).collect();
    let n_phi = 2 * n;
    let mut pts = Vec::with_capacity(n * n * n_phi);
    let mut wts = Vec::with_capacity(n * n * n_phi);
    for &(xr, wr) in &nodes {
        let rad = 0.5 * r * (xr + 1.0);
        let w_rad = 0.5 * r * wr * rad * rad;
        for &(ct, wt) in &nodes {
            let st = (1.0 - ct * ct).sqrt();
            for k in 0..n_phi {
                let phi = 2.0 * PI * (k as f64 + 0.5) / n_phi as f64;
                pts.push([rad * st * phi.cos(), rad * st * phi.sin(), rad * ct]);
                wts.push(w_rad * wt * 2.0 * PI / n_phi as f64);
            }
        }
    }
    (pts, wts)
}

impl SpatialGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Cell width of a uniform grid.
    pub fn spacing(&self) -> Option<f64> {
        match self.descriptor.scheme {
            GridScheme::UniformTensor => Some(2.0 * self.descriptor.box_radius / self.descriptor.n as f64),
            GridScheme::RadialSpherical => None,
        }
    }

    /// Local cell width `wᵢ^{1/3}`.
    pub fn local_width(&self, i: usize) -> f64 {
        self.weights[i].cbrt()
    }

    /// `Σ wᵢ f(xᵢ)`.
    pub fn integrate(&self, f: impl Fn([f64; 3]) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }

    /// Index of the grid point nearest to `x`.
    pub fn nearest(&self, x: [f64; 3]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in self.points.iter().enumerate() {
            let d = (p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2) + (p[2] - x[2]).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Linear index of the uniform-grid cell `(a, b, c)`.
    pub fn index(&self, a: usize, b: usize, c: usize) -> usize {
        let n = self.descriptor.n;
        (a * n + b) * n + c
    }

    /// Whether `i` is a uniform-grid point within `layers` cells of the box boundary.
    pub fn in_boundary_shell(&self, i: usize, layers: usize) -> bool {
        let n = self.descriptor.n;
        let idx = [i / (n * n), (i / n) % n, i % n];
        idx.iter().any(|&k| k < layers || k + layers >= n)
    }

    /// Stable content hash of the descriptor.
    pub fn descriptor_hash(&self) -> String {
        crate::io::hash_json(&self.descriptor)
    }
}

/// How diagonal blocks of a singular kernel are assigned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagonalRule {
    /// `½[K(xᵢ + ρe₁, xᵢ) + K(xᵢ - ρe₁, xᵢ)]` with `ρ = c·wᵢ^{1/3}`.
    Symmetric { factor: f64 },
    /// Zero block, for kernels that are odd on the self-cell.
    Zero,
    /// The kernel is regular on the diagonal and is evaluated there.
    Evaluate,
}

impl Default for DiagonalRule {
    fn default() -> Self {
        DiagonalRule::Symmetric { factor: DIAGONAL_RADIUS_FACTOR }
    }
}

impl DiagonalRule {
    /// Diagonal block for a kernel given as a function of `(x, y)`.
    pub fn block<K>(&self, kernel: &K, x: [f64; 3], width: f64) -> Result<Mat4>
    where
        K: Fn([f64; 3], [f64; 3]) -> Result<Mat4>,
    {
        match *self {
            DiagonalRule::Zero => Ok(Mat4::zero()),
            DiagonalRule::Evaluate => kernel(x, x),
            DiagonalRule::Symmetric { factor } => {
                let rho = factor * width;
                let a = kernel([x[0] + rho, x[1], x[2]], x)?;
                let b = kernel([x[0] - rho, x[1], x[2]], x)?;
                Ok((a + b).scale_re(0.5))
            }
        }
    }

    /// Diagonal block of the free resolvent kernel at a point of cell width `width`.
    ///
    /// For the symmetric rule the odd `α·e` terms cancel, leaving the closed form
    /// `λ e^{±iλρ} / (4πρ) I`, which vanishes exactly at `λ = 0`.
    pub fn free_resolvent_block(&self, p: SpectralPoint, width: f64) -> Mat4 {
        match *self {
            DiagonalRule::Zero | DiagonalRule::Evaluate => Mat4::zero(),
            DiagonalRule::Symmetric { factor } => {
                let rho = factor * width;
                let phase = (I * (p.branch.sign() * p.lambda * rho)).exp();
                Mat4::identity().scale(phase * (p.lambda / (4.0 * PI * rho)))
            }
        }
    }
}

/// Dense `(4n) × (4n)` operator in symmetrized form.
#[derive(Clone, Debug)]
pub struct GridOperator {
    pub n_points: usize,
    pub matrix: Mat<C64>,
}

impl GridOperator {
    pub fn zeros(n_points: usize) -> Self {
        Self { n_points, matrix: Mat::zeros(4 * n_points, 4 * n_points) }
    }

    pub fn identity(n_points: usize) -> Self {
        Self { n_points, matrix: Mat::identity(4 * n_points, 4 * n_points) }
    }

    /// Block-diagonal operator with the given 4×4 blocks.
    pub fn block_diagonal(blocks: &[Mat4]) -> Self {
        let mut op = Self::zeros(blocks.len());
        for (i, b) in blocks.iter().enumerate() {
            op.set_block(i, i, b);
        }
        op
    }

    pub fn order(&self) -> usize {
        4 * self.n_points
    }

    /// Symmetrized block `(i, j)`.
    pub fn block(&self, i: usize, j: usize) -> Mat4 {
        Mat4::from_fn(|r, c| self.matrix[(4 * i + r, 4 * j + c)])
    }

    pub fn set_block(&mut self, i: usize, j: usize, b: &Mat4) {
        for r in 0..4 {
            for c in 0..4 {
                self.matrix[(4 * i + r, 4 * j + c)] = b[(r, c)];
            }
        }
    }

    /// Nyström block `K(xᵢ, xⱼ) wⱼ` recovered from the symmetrized storage.
    pub fn nystrom_block(&self, grid: &SpatialGrid, i: usize, j: usize) -> Mat4 {
        self.block(i, j).scale_re((grid.weights[j] / grid.weights[i]).sqrt())
    }

    /// `max |A - Aᴴ|`.
    pub fn hermiticity_defect(&self) -> f64 {
        let m = &self.matrix;
        let n = m.nrows();
        let mut worst = 0.0_f64;
        for j in 0..n {
            for i in 0..=j {
                worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// Frobenius norm of the stored matrix.
    pub fn frobenius(&self) -> f64 {
        self.matrix.norm_l2()
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: C64, other: &GridOperator, b: C64) -> GridOperator {
        let matrix = Mat::from_fn(self.order(), self.order(), |r, c| a * self.matrix[(r, c)] + b * other.matrix[(r, c)]);
        GridOperator { n_points: self.n_points, matrix }
    }

    /// Applies the operator to a field in symmetrized coordinates.
    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let x = faer::col::ColRef::from_slice(v);
        let y = &self.matrix * x;
        (0..y.nrows()).map(|k| y[k]).collect()
    }
}

/// Assembles `√wᵢ K(xᵢ, xⱼ) √wⱼ` over all point pairs.
pub fn assemble<K>(kernel: K, grid: &SpatialGrid, rule: DiagonalRule) -> Result<GridOperator>
where
    K: Fn([f64; 3], [f64; 3]) -> Result<Mat4> + Sync,
{
    assemble_blocks(grid, |i, j| {
        let k = if i == j {
            rule.block(&kernel, grid.points[i], grid.local_width(i))
        } else {
            kernel(grid.points[i], grid.points[j])
        };
        k.map_err(|e| Error::Assembly { i, j, source: Box::new(e) })
    })
}

/// Assembles `√wᵢ L(xᵢ) K(xᵢ, xⱼ) R(xⱼ)ᴴ √wⱼ`, the discretization of `L K R*`.
pub fn assemble_sandwiched<K>(
    kernel: K,
    grid: &SpatialGrid,
    left: &[Mat4],
    right: &[Mat4],
    rule: DiagonalRule,
) -> Result<GridOperator>
where
    K: Fn([f64; 3], [f64; 3]) -> Result<Mat4> + Sync,
{
    let right_adj: Vec<Mat4> = right.iter().map(Mat4::adjoint).collect();
    assemble_blocks(grid, |i, j| {
        let k = if i == j {
            rule.block(&kernel, grid.points[i], grid.local_width(i))
        } else {
            kernel(grid.points[i], grid.points[j])
        };
        k.map(|k| left[i] * k * right_adj[j]).map_err(|e| Error::Assembly { i, j, source: Box::new(e) })
    })
}

/// Assembles from an explicit block function `(i, j) ↦ K_ij`; weights are applied here.
pub fn assemble_blocks<F>(grid: &SpatialGrid, block: F) -> Result<GridOperator>
where
    F: Fn(usize, usize) -> Result<Mat4> + Sync,
{
    let n = grid.len();
    let sqrt_w: Vec<f64> = grid.weights.iter().map(|w| w.sqrt()).collect();
    let slabs: Vec<Vec<C64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut slab = vec![ZERO; 16 * n];
            for i in 0..n {
                let b = block(i, j)?.scale_re(sqrt_w[i] * sqrt_w[j]);
                for c in 0..4 {
                    for r in 0..4 {
                        slab[c * 4 * n + 4 * i + r] = b[(r, c)];
                    }
                }
            }
            Ok(slab)
        })
        .collect::<Result<_>>()?;
    let mut op = GridOperator::zeros(n);
    for (j, slab) in slabs.iter().enumerate() {
        for c in 0..4 {
            let col = op.matrix.col_mut(4 * j + c);
            let src = &slab[c * 4 * n..(c + 1) * 4 * n];
            for (dst, s) in col.iter_mut().zip(src) {
                *dst = *s;
            }
        }
    }
    Ok(op)
}

/// Evaluates `Σⱼ K(t - sⱼ) qⱼ` at every target `t` for several source sets at once.
///
/// `kernel` takes the displacement and returns `None` only at zero displacement, where
/// the block `coincident` is used instead. `charges[m][j]` is the (already weighted)
/// spinor attached to source `j` in set `m`. Returns `out[m][target]`.
pub fn kernel_sum<K>(
    kernel: K,
    coincident: Mat4,
    targets: &[[f64; 3]],
    sources: &[[f64; 3]],
    charges: &[Vec<Spinor>],
) -> Vec<Vec<Spinor>>
where
    K: Fn([f64; 3]) -> Option<Mat4> + Sync,
{
    let sets = charges.len();
    let per_target: Vec<Vec<Spinor>> = targets
        .par_iter()
        .map(|t| {
            let mut acc = vec![[ZERO; 4]; sets];
            for (j, s) in sources.iter().enumerate() {
                let d = [t[0] - s[0], t[1] - s[1], t[2] - s[2]];
                let k = kernel(d).unwrap_or(coincident);
                for (a, q) in acc.iter_mut().zip(charges) {
                    let v = k.mul_vec(&q[j]);
                    for c in 0..4 {
                        a[c] += v[c];
                    }
                }
            }
            acc
        })
        .collect();
    (0..sets).map(|m| per_target.iter().map(|row| row[m]).collect()).collect()
}

/// Uniform lattice with the spacing of `grid` covering `[-(2e+1)R, (2e+1)R]³`.
///
/// The points of `grid` are a subset of the result.
pub fn extended_lattice(grid: &SpatialGrid, extension: usize) -> Result<SpatialGrid> {
    if grid.descriptor.scheme != GridScheme::UniformTensor {
        return Err(Error::Validation("lattice extension needs a uniform grid".into()));
    }
    let (n, r) = (grid.descriptor.n, grid.descriptor.box_radius);
    let k = 2 * extension + 1;
    let mut ext = build_grid(GridScheme::UniformTensor, k * n, k as f64 * r)?;
    // Reuse the base coordinates bit for bit so coinciding points have zero displacement.
    let mut axis = midpoints(k * n, k as f64 * r);
    axis[extension * n..(extension + 1) * n].copy_from_slice(&midpoints(n, r));
    for (p, slot) in ext.points.iter_mut().enumerate() {
        let (a, rest) = (p / (k * n * k * n), p % (k * n * k * n));
        *slot = [axis[a], axis[rest / (k * n)], axis[rest % (k * n)]];
    }
    Ok(ext)
}

/// Hilbert–Schmidt norm `(Σᵢⱼ wᵢwⱼ‖K_ij‖²_F)^{1/2}` of an assembled operator.
pub fn hs_norm(op: &GridOperator) -> f64 {
    op.frobenius()
}

/// A ℂ⁴-valued field sampled on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinorField {
    pub descriptor: GridDescriptor,
    pub values: Vec<Spinor>,
}

impl SpinorField {
    pub fn new(grid: &SpatialGrid, values: Vec<Spinor>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Validation(format!(
                "field has {} samples but grid has {} points",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().flatten().any(|z| !z.is_finite()) {
            return Err(Error::Validation("field contains non-finite values".into()));
        }
        Ok(Self { descriptor: grid.descriptor, values })
    }

    pub fn from_fn(grid: &SpatialGrid, f: impl Fn([f64; 3]) -> Spinor) -> Self {
        Self { descriptor: grid.descriptor, values: grid.points.iter().map(|x| f(*x)).collect() }
    }

    pub fn zeros(grid: &SpatialGrid) -> Self {
        Self { descriptor: grid.descriptor, values: vec![[ZERO; 4]; grid.len()] }
    }

    /// Weighted L² norm `(Σ wᵢ |ψᵢ|²)^{1/2}`.
    pub fn l2_norm(&self, grid: &SpatialGrid) -> f64 {
        self.values
            .iter()
            .zip(&grid.weights)
            .map(|(v, w)| w * v.iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Weighted inner product `Σ wᵢ ⟨aᵢ, bᵢ⟩` (conjugate-linear in `self`).
    pub fn inner(&self, other: &SpinorField, grid: &SpatialGrid) -> C64 {
        self.values
            .iter()
            .zip(&other.values)
            .zip(&grid.weights)
            .map(|((a, b), w)| (0..4).map(|k| a[k].conj() * b[k]).sum::<C64>() * *w)
            .sum()
    }

    /// Symmetrized coordinates `√wᵢ ψᵢ`, flattened.
    pub fn to_symmetrized(&self, grid: &SpatialGrid) -> Vec<C64> {
        self.values
            .iter()
            .zip(&grid.weights)
            .flat_map(|(v, w)| {
                let s = w.sqrt();
                v.map(|z| z * s)
            })
            .collect()
    }

    /// Inverse of [`SpinorField::to_symmetrized`].
    pub fn from_symmetrized(grid: &SpatialGrid, v: &[C64]) -> Self {
        let values = grid
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let s = 1.0 / w.sqrt();
                [v[4 * i] * s, v[4 * i + 1] * s, v[4 * i + 2] * s, v[4 * i + 3] * s]
            })
            .collect();
        Self { descriptor: grid.descriptor, values }
    }

    /// Pointwise `a·self + b·other`.
    pub fn combine(&self, a: C64, other: &SpinorField, b: C64) -> SpinorField {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| [0, 1, 2, 3].map(|k| a * x[k] + b * y[k]))
            .collect();
        SpinorField { descriptor: self.descriptor, values }
    }

    /// Pointwise `Mᵢ ψᵢ`.
    pub fn apply_pointwise(&self, mats: &[Mat4]) -> SpinorField {
        let values = self.values.iter().zip(mats).map(|(v, m)| m.mul_vec(v)).collect();
        SpinorField { descriptor: self.descriptor, values }
    }
}

/// Multiplies a field by `⟨x⟩^σ`.
pub fn apply_weight(field: &SpinorField, grid: &SpatialGrid, sigma: f64) -> SpinorField {
    let values = field
        .values
        .iter()
        .zip(&grid.points)
        .map(|(v, x)| {
            let f = bracket(*x).powf(sigma);
            v.map(|z| z * f)
        })
        .collect();
    SpinorField { descriptor: field.descriptor, values }
}

/// Conjugates an operator: block `(i, j)` is scaled by `⟨xᵢ⟩^{σ_left} ⟨xⱼ⟩^{σ_right}`.
pub fn apply_weight_op(op: &GridOperator, grid: &SpatialGrid, sigma_left: f64, sigma_right: f64) -> GridOperator {
    let l: Vec<f64> = grid.points.iter().map(|x| bracket(*x).powf(sigma_left)).collect();
    let r: Vec<f64> = grid.points.iter().map(|x| bracket(*x).powf(sigma_right)).collect();
    let matrix = Mat::from_fn(op.order(), op.order(), |a, b| op.matrix[(a, b)] * (l[a / 4] * r[b / 4]));
    GridOperator { n_points: op.n_points, matrix }
}

/// First derivative along `axis` with the 4th-order central stencil and one-sided
/// 4th-order closures on the two outermost layers.
fn derivative_fd4(values: &[Spinor], n: usize, h: f64, axis: usize) -> Vec<Spinor> {
    const EDGE0: [f64; 5] = [-25.0, 48.0, -36.0, 16.0, -3.0];
    const EDGE1: [f64; 5] = [-3.0, -10.0, 18.0, -6.0, 1.0];
    let stride = match axis {
        0 => n * n,
        1 => n,
        _ => 1,
    };
    let scale = 1.0 / (12.0 * h);
    let mut out = vec![[ZERO; 4]; values.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let k = (idx / stride) % n;
        let base = idx - k * stride;
        let at = |m: usize| &values[base + m * stride];
        let mut acc = [ZERO; 4];
        let mut add = |m: usize, c: f64| {
            for (a, v) in acc.iter_mut().zip(at(m)) {
                *a += v * c;
            }
        };
        if k >= 2 && k + 2 < n {
            add(k - 2, 1.0);
            add(k - 1, -8.0);
            add(k + 1, 8.0);
            add(k + 2, -1.0);
        } else if k < 2 {
            let c = if k == 0 { EDGE0 } else { EDGE1 };
            for (m, cm) in c.iter().enumerate() {
                add(m, *cm);
            }
        } else {
            let c = if k == n - 1 { EDGE0 } else { EDGE1 };
            for (m, cm) in c.iter().enumerate() {
                add(n - 1 - m, -cm);
            }
        }
        *o = acc.map(|z| z * scale);
    }
    out
}

/// Finite-difference free Dirac operator `D₀ψ = -iα·∇ψ` on a uniform grid.
pub fn dirac_fd(field: &SpinorField, grid: &SpatialGrid) -> Result<SpinorField> {
    let h = grid
        .spacing()
        .ok_or_else(|| Error::Validation("finite differences need a uniform grid".into()))?;
    let n = grid.descriptor.n;
    if n < 5 {
        return Err(Error::Validation("finite differences need at least 5 points per axis".into()));
    }
    let mut values = vec![[ZERO; 4]; field.values.len()];
    for axis in 0..3 {
        let a = alpha(axis).scale(-I);
        let d = derivative_fd4(&field.values, n, h, axis);
        for (v, dv) in values.iter_mut().zip(&d) {
            let t = a.mul_vec(dv);
            for k in 0..4 {
                v[k] += t[k];
            }
        }
    }
    Ok(SpinorField { descriptor: field.descriptor, values })
}

/// Applies the free resolvent `R0±(λ)` to a smooth source at every grid point.
///
/// The source is sampled on a midpoint lattice refined `refine` times (an even factor,
/// so no source point coincides with a target). Each target sees a source lattice that
/// is point-symmetric about it, so the odd `|x-y|^{-2}` part cancels cell by cell.
/// Target-source displacements form the lattice `h_f(k + (refine - 1)/2)`, so the sum
/// is a discrete convolution evaluated by FFT.
pub fn apply_free_resolvent(
    p: SpectralPoint,
    grid: &SpatialGrid,
    source: impl Fn([f64; 3]) -> Spinor,
    refine: usize,
) -> Result<SpinorField> {
    if grid.descriptor.scheme != GridScheme::UniformTensor {
        return Err(Error::Validation("refined resolvent application needs a uniform grid".into()));
    }
    if refine == 0 || refine % 2 != 0 {
        return Err(Error::Validation(format!("refinement factor must be even, got {refine}")));
    }
    let n = grid.descriptor.n;
    let nf = n * refine;
    let l = 2 * nf;
    let fine = build_grid(GridScheme::UniformTensor, nf, grid.descriptor.box_radius)?;
    let hf = fine.spacing().expect("uniform");
    let wf = fine.weights[0];
    let offset = 0.5 * (refine as f64 - 1.0);
    let cube = |a: usize, b: usize, c: usize| (a * l + b) * l + c;
    let signed = |k: usize| if k < nf { k as f64 } else { k as f64 - l as f64 };

    // Kernel table on the displacement lattice, one cube per matrix entry.
    let rows: Vec<Vec<Mat4>> = (0..l)
        .into_par_iter()
        .map(|a| {
            let mut row = Vec::with_capacity(l * l);
            for b in 0..l {
                for c in 0..l {
                    let d = [signed(a), signed(b), signed(c)].map(|k| hf * (k + offset));
                    row.push(resolvent_free_disp(p.lambda, p.branch, d, 0).expect("offset lattice avoids zero"));
                }
            }
            row
        })
        .collect();
    let fwd = crate::fft::Fft3::forward(l);
    let inv = crate::fft::Fft3::inverse(l);
    let kernel_hat: Vec<Vec<C64>> = (0..16)
        .into_par_iter()
        .map(|e| {
            let mut cube_data: Vec<C64> = rows.iter().flatten().map(|m| m[(e / 4, e % 4)]).collect();
            fwd.process(&mut cube_data);
            cube_data
        })
        .collect();
    drop(rows);

    // Zero-padded source cubes.
    let src_hat: Vec<Vec<C64>> = (0..4)
        .map(|comp| {
            let mut cube_data = vec![ZERO; l * l * l];
            for a in 0..nf {
                for b in 0..nf {
                    for c in 0..nf {
                        let y = fine.points[(a * nf + b) * nf + c];
                        cube_data[cube(a, b, c)] = source(y)[comp] * wf;
                    }
                }
            }
            fwd.process(&mut cube_data);
            cube_data
        })
        .collect();

    let mut values = vec![[ZERO; 4]; grid.len()];
    let norm = 1.0 / (l * l * l) as f64;
    for r in 0..4 {
        let mut prod = vec![ZERO; l * l * l];
        for (c, s_hat) in src_hat.iter().enumerate() {
            for ((o, k), s) in prod.iter_mut().zip(&kernel_hat[4 * r + c]).zip(s_hat) {
                *o += k * s;
            }
        }
        inv.process(&mut prod);
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    values[grid.index(a, b, c)][r] = prod[cube(refine * a, refine * b, refine * c)] * norm;
                }
            }
        }
    }
    Ok(SpinorField { descriptor: grid.descriptor, values })
}

/// Direct-summation reference for [`apply_free_resolvent`] at one target point.
pub fn apply_free_resolvent_at(
    p: SpectralPoint,
    x: [f64; 3],
    fine: &SpatialGrid,
    source: impl Fn([f64; 3]) -> Spinor,
) -> Spinor {
    let mut acc = [ZERO; 4];
    for (y, w) in fine.points.iter().zip(&fine.weights) {
        let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
        if let Some(k) = resolvent_free_disp(p.lambda, p.branch, d, 0) {
            let t = k.mul_vec(&source(*y));
            for c in 0..4 {
                acc[c] += t[c] * *w;
            }
        }
    }
    acc
}

/// Relative residual `‖(D₀ - λ) R0±(λ) f - f‖ / ‖f‖` of the discretized free resolvent.
pub fn free_resolvent_identity_residual(
    p: SpectralPoint,
    grid: &SpatialGrid,
    source: impl Fn([f64; 3]) -> Spinor + Copy,
    refine: usize,
) -> Result<f64> {
    let u = apply_free_resolvent(p, grid, source, refine)?;
    let du = dirac_fd(&u, grid)?;
    let f = SpinorField::from_fn(grid, source);
    let lhs = du.combine(C64::new(1.0, 0.0), &u, C64::new(-p.lambda, 0.0));
    let err = lhs.combine(C64::new(1.0, 0.0), &f, C64::new(-1.0, 0.0));
    Ok(err.l2_norm(grid) / f.l2_norm(grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{g0_disp, g1_disp};

    fn g1_kernel(x: [f64; 3], y: [f64; 3]) -> Result<Mat4> {
        g1_disp(crate::algebra::sub3(x, y)).ok_or(Error::CoincidentPoints { x })
    }

    fn g0_kernel(x: [f64; 3], y: [f64; 3]) -> Result<Mat4> {
        g0_disp(crate::algebra::sub3(x, y)).ok_or(Error::CoincidentPoints { x })
    }

    #[test]
    fn two_cell_grid() {
        let g = build_grid(GridScheme::UniformTensor, 2, 1.0).unwrap();
        assert_eq!(g.len(), 8);
        for p in &g.points {
            assert!(p.iter().all(|c| c.abs() == 0.5));
        }
        assert!(g.weights.iter().all(|w| *w == 1.0));
        assert_eq!(g.weights.iter().sum::<f64>(), 8.0);
    }

    #[test]
    fn eight_cell_grid_extent() {
        let g = build_grid(GridScheme::UniformTensor, 8, 6.0).unwrap();
        assert_eq!(g.len(), 512);
        let max = g.points.iter().flatten().fold(0.0_f64, |m, c| m.max(c.abs()));
        assert_eq!(max, 5.25);
        assert!((g.weights.iter().sum::<f64>() - 1728.0).abs() < 1e-10);
    }

    #[test]
    fn radial_grid_integrates_ball_volume() {
        let g = build_grid(GridScheme::RadialSpherical, 6, 2.0).unwrap();
        let vol = g.weights.iter().sum::<f64>();
        assert!((vol - 4.0 / 3.0 * PI * 8.0).abs() < 1e-10);
        assert!(g.weights.iter().all(|w| *w > 0.0));
        let r2 = g.integrate(|x| x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
        assert!((r2 - 4.0 * PI * 32.0 / 5.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(build_grid(GridScheme::UniformTensor, 1, 1.0).is_err());
        assert!(build_grid(GridScheme::UniformTensor, 4, 0.0).is_err());
    }

    #[test]
    fn identity_kernel_operator() {
        let g = build_grid(GridScheme::UniformTensor, 2, 1.0).unwrap();
        let op = assemble(|_, _| Ok(Mat4::identity()), &g, DiagonalRule::Evaluate).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(op.nystrom_block(&g, i, j), Mat4::identity());
            }
        }
        assert!((hs_norm(&op) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn g1_blocks_on_two_cell_grid() {
        let g = build_grid(GridScheme::UniformTensor, 2, 1.0).unwrap();
        let op = assemble(g1_kernel, &g, DiagonalRule::default()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let b = op.nystrom_block(&g, i, j);
                let expected = if i == j {
                    1.0 / (4.0 * PI * 0.62)
                } else {
                    1.0 / (4.0 * PI * crate::algebra::norm3(crate::algebra::sub3(g.points[i], g.points[j])))
                };
                assert!((b - Mat4::identity().scale_re(expected)).max_abs() < 1e-14);
            }
        }
    }

    #[test]
    fn g0_operator_is_hermitian_with_zero_diagonal() {
        let g = build_grid(GridScheme::UniformTensor, 4, 2.0).unwrap();
        let op = assemble(g0_kernel, &g, DiagonalRule::Zero).unwrap();
        assert!(op.hermiticity_defect() < 1e-15);
        let sym = assemble(g0_kernel, &g, DiagonalRule::default()).unwrap();
        for i in 0..g.len() {
            assert_eq!(op.block(i, i).max_abs(), 0.0);
            // The odd kernel cancels on the symmetric self-cell pair up to rounding of x ± ρ.
            assert!(sym.block(i, i).max_abs() < 1e-15);
        }
    }

    #[test]
    fn assembly_is_linear() {
        let g = build_grid(GridScheme::UniformTensor, 3, 1.5).unwrap();
        let a = assemble(g0_kernel, &g, DiagonalRule::default()).unwrap();
        let b = assemble(g1_kernel, &g, DiagonalRule::default()).unwrap();
        let s = assemble(
            |x, y| Ok(g0_kernel(x, y)?.scale_re(2.0) + g1_kernel(x, y)?.scale(C64::new(0.0, -3.0))),
            &g,
            DiagonalRule::default(),
        )
        .unwrap();
        let lin = a.combine(C64::new(2.0, 0.0), &b, C64::new(0.0, -3.0));
        assert!(s.combine(C64::new(1.0, 0.0), &lin, C64::new(-1.0, 0.0)).frobenius() < 1e-12);
    }

    #[test]
    fn assembly_error_carries_indices() {
        let g = build_grid(GridScheme::UniformTensor, 2, 1.0).unwrap();
        let err = assemble(g0_kernel, &g, DiagonalRule::Evaluate).unwrap_err();
        assert!(matches!(err, Error::Assembly { i: 0, j: 0, .. }));
    }

    #[test]
    fn weights_on_fields() {
        let g = build_grid(GridScheme::UniformTensor, 2, 1.0).unwrap();
        let f = SpinorField::from_fn(&g, |_| [C64::new(1.0, 0.0); 4]);
        assert_eq!(apply_weight(&f, &g, 0.0), f);
        let w = apply_weight(&f, &g, 2.0);
        // |x|² = 3/4 at every point.
        assert!((w.values[0][0].re - 1.75).abs() < 1e-15);
        assert_eq!(bracket([0.0; 3]).powf(1.0), 1.0);
        assert!((bracket([1.0, 1.0, 1.0]).powf(2.0) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn symmetrized_round_trip() {
        let g = build_grid(GridScheme::RadialSpherical, 3, 1.0).unwrap();
        let f = SpinorField::from_fn(&g, |x| [C64::new(x[0], x[1]), C64::new(x[2], 0.0), ZERO, C64::new(1.0, -1.0)]);
        let back = SpinorField::from_symmetrized(&g, &f.to_symmetrized(&g));
        for (a, b) in f.values.iter().zip(&back.values) {
            for k in 0..4 {
                assert!((a[k] - b[k]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn finite_difference_dirac_is_exact_on_quartics() {
        let g = build_grid(GridScheme::UniformTensor, 7, 1.0).unwrap();
        let f = SpinorField::from_fn(&g, |x| [C64::new(x[0].powi(4), 0.0), C64::new(0.0, x[1].powi(3)), C64::new(x[2] * x[0], 0.0), ZERO]);
        let d = dirac_fd(&f, &g).unwrap();
        for (x, got) in g.points.iter().zip(&d.values) {
            let grad = [
                [C64::new(4.0 * x[0].powi(3), 0.0), ZERO, C64::new(x[2], 0.0), ZERO],
                [ZERO, C64::new(0.0, 3.0 * x[1] * x[1]), ZERO, ZERO],
                [ZERO, ZERO, C64::new(x[0], 0.0), ZERO],
            ];
            let mut want = [ZERO; 4];
            for axis in 0..3 {
                let t = alpha(axis).scale(-I).mul_vec(&grad[axis]);
                for k in 0..4 {
                    want[k] += t[k];
                }
            }
            for k in 0..4 {
                assert!((got[k] - want[k]).norm() < 1e-10, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn bracket_integral_quadrature_sanity() {
        // Adaptive cubature of ⟨x⟩^{-4} over [-6, 6]³, computed independently.
        const BOX_VALUE: f64 = 8.151568637086777;
        let g = build_grid(GridScheme::UniformTensor, 16, 6.0).unwrap();
        let v = g.integrate(|x| bracket(x).powi(-4));
        assert!((v - BOX_VALUE).abs() / BOX_VALUE < 0.01, "{v}");
        // The whole-space value is π²; the box misses the slowly decaying tail.
        let gap = (PI * PI - BOX_VALUE) / (PI * PI);
        assert!(gap > 0.17 && gap < 0.18);
    }

    #[test]
    fn odd_kernels_have_hermitian_sandwich() {
        let g = build_grid(GridScheme::UniformTensor, 3, 1.0).unwrap();
        let v: Vec<Mat4> = g.points.iter().map(|x| Mat4::identity().scale_re((-x[0] * x[0]).exp())).collect();
        let op = assemble_sandwiched(g0_kernel, &g, &v, &v, DiagonalRule::default()).unwrap();
        assert!(op.hermiticity_defect() < 1e-15);
    }

    #[test]
    fn fft_resolvent_application_matches_direct_sum() {
        let g = build_grid(GridScheme::UniformTensor, 4, 2.0).unwrap();
        let src = |x: [f64; 3]| {
            let e = (-(x[0] * x[0] + 2.0 * x[1] * x[1] + x[2] * x[2])).exp();
            [C64::new(e, 0.0), C64::new(0.0, x[0] * e), ZERO, C64::new(-0.5 * e, 0.1)]
        };
        let p = SpectralPoint::minus(0.4);
        let fast = apply_free_resolvent(p, &g, src, 2).unwrap();
        let fine = build_grid(GridScheme::UniformTensor, 8, 2.0).unwrap();
        for i in [0, 17, 63] {
            let slow = apply_free_resolvent_at(p, g.points[i], &fine, src);
            for c in 0..4 {
                assert!((fast.values[i][c] - slow[c]).norm() < 1e-12, "{i} {c}");
            }
        }
    }

    #[test]
    fn kernel_sum_matches_assembled_operator() {
        let g = build_grid(GridScheme::UniformTensor, 3, 1.5).unwrap();
        let op = assemble(g1_kernel, &g, DiagonalRule::default()).unwrap();
        let field = SpinorField::from_fn(&g, |x| [C64::new(x[0], 1.0), ZERO, C64::new(0.0, x[2]), C64::new(1.0, 0.0)]);
        let applied = SpinorField::from_symmetrized(&g, &op.apply(&field.to_symmetrized(&g)));
        let charges: Vec<Spinor> = field.values.iter().zip(&g.weights).map(|(v, w)| v.map(|z| z * *w)).collect();
        let diag = Mat4::identity().scale_re(1.0 / (4.0 * PI * 0.62 * g.spacing().unwrap()));
        let sums = kernel_sum(g1_disp, diag, &g.points, &g.points, &[charges]);
        for (a, b) in applied.values.iter().zip(&sums[0]) {
            for c in 0..4 {
                assert!((a[c] - b[c]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn resolvent_diagonal_block_is_even_part() {
        let rule = DiagonalRule::default();
        for p in [SpectralPoint::plus(0.7), SpectralPoint::minus(-0.3), SpectralPoint::plus(2.0)] {
            let got = rule.free_resolvent_block(p, 0.5);
            let rho = 0.62 * 0.5;
            let a = resolvent_free_disp(p.lambda, p.branch, [rho, 0.0, 0.0], 0).unwrap();
            let b = resolvent_free_disp(p.lambda, p.branch, [-rho, 0.0, 0.0], 0).unwrap();
            assert!((got - (a + b).scale_re(0.5)).max_abs() < 1e-14);
        }
        assert_eq!(rule.free_resolvent_block(SpectralPoint::minus(0.0), 0.5), Mat4::zero());
    }

    #[test]
    fn extended_lattice_contains_base_grid() {
        let g = build_grid(GridScheme::UniformTensor, 6, 2.0).unwrap();
        let e = extended_lattice(&g, 2).unwrap();
        assert_eq!(e.len(), 30 * 30 * 30);
        for p in &g.points {
            assert_eq!(e.points[e.nearest(*p)], *p);
        }
    }

    #[test]
    fn free_resolvent_branches_are_adjoint_on_grid() {
        let g = build_grid(GridScheme::UniformTensor, 3, 1.0).unwrap();
        let k = |p: SpectralPoint| {
            move |x: [f64; 3], y: [f64; 3]| crate::kernels::resolvent_free(p, x, y)
        };
        let plus = assemble(k(SpectralPoint::plus(0.3)), &g, DiagonalRule::default()).unwrap();
        let minus = assemble(k(SpectralPoint::minus(0.3)), &g, DiagonalRule::default()).unwrap();
        let adj = GridOperator { n_points: plus.n_points, matrix: plus.matrix.adjoint().to_owned() };
        assert!(adj.combine(C64::new(1.0, 0.0), &minus, C64::new(-1.0, 0.0)).frobenius() < 1e-14);
    }
}
