//! Time evolution through the Stone formula
//! `e^{-itH} w(H)(x, y) = ∫ e^{-itλ} w(λ) [R_V⁺ - R_V⁻](λ)(x, y) / (2πi) dλ`,
//! the free Fourier-multiplier route, the half-period shift bound and
//! decay-exponent fitting.
//!
//! The perturbed density splits as `(μ - C) / (2πi)` with the correction
//! `C = L⁺X⁺ - L⁻X⁻`, where `L±` holds the closed-form left factors and
//! `X± = M±⁻¹ B±` the solved right factors. Writing `S = λ(X⁺ + X⁻)` and
//! `Z = X⁺ - X⁻` gives `C = ½[(L⁺ - L⁻)/λ · S + (L⁺ + L⁻) Z]`. Both `S` and `Z`
//! stay bounded as `λ → 0` even when `M⁻¹` has a `1/λ` pole, so they are cached
//! on a coarse λ-lattice and interpolated, while the fast phases of `L±` are
//! evaluated exactly at every quadrature node.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{alpha, alpha_dot, bracket, norm3, sub3, symbol_propagator, Mat4, Spinor, C64, I, ZERO};
use crate::error::{Error, Result};
use crate::fft::{signed_index, Fft3};
use crate::grid::{SpatialGrid, SpinorField, DIAGONAL_RADIUS_FACTOR};
use crate::io::{hash_json, read_dataset, write_dataset};
use crate::kernels::{cos_minus_sinc, Branch, CutoffSpec, SpectralPoint};
use crate::potential::FactorizedPotential;
use crate::resolvent::{right_factor, ResolventSolver};
use crate::threshold::ThresholdReport;

/// Default smoothing exponent, just above three.
pub const DEFAULT_S: f64 = 3.01;
/// Default window `[t_min, t_max]` for exponent fits.
pub const DEFAULT_FIT_WINDOW: [f64; 2] = [4.0, 64.0];
/// Largest lattice the half-period probe will allocate.
pub const MAX_PROBE_POINTS: usize = 1 << 22;

const GL3_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GL3_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

/// Which spectral weight enters the Stone integral.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvolutionMode {
    /// `w = χ`, integrated over the support of the cutoff.
    #[default]
    LowOnly,
    /// `w = ⟨λ⟩^{-s}`, integrated over `[-λ_max, λ_max]`.
    FullRange,
}

/// Parameters of the λ-quadrature and of the decay fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    /// Smoothing exponent of `⟨λ⟩^{-s}`.
    pub s: f64,
    /// Truncation of the full-range integral.
    pub lambda_max: f64,
    /// Number of quadrature panels over the integration range (even).
    pub n_lambda: usize,
    pub chi: CutoffSpec,
    pub times: Vec<f64>,
    /// Weight exponent `γ` of `⟨x⟩^{-γ} K ⟨y⟩^{-γ}`.
    pub gamma: f64,
    pub mode: EvolutionMode,
    pub fit_window: [f64; 2],
    /// Dyadic refinement `±λ₀ 2^{-k}`, `k = 0..=dyadic_levels`, of the density lattice.
    pub dyadic_levels: u32,
    /// Uniform density-lattice nodes per `λ₀`.
    pub coarse_per_lambda0: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            s: DEFAULT_S,
            lambda_max: 5.0,
            n_lambda: 512,
            chi: CutoffSpec::default(),
            times: default_times(),
            gamma: 0.0,
            mode: EvolutionMode::LowOnly,
            fit_window: DEFAULT_FIT_WINDOW,
            dyadic_levels: 10,
            coarse_per_lambda0: 16,
        }
    }
}

/// `t = 2^j` for `j = 0..=6`, with half steps `2^{j+½}` from `t = 4` on.
pub fn default_times() -> Vec<f64> {
    let mut out = Vec::new();
    for j in 0..=6 {
        let t = 2f64.powi(j);
        out.push(t);
        if (2..6).contains(&j) {
            out.push(t * std::f64::consts::SQRT_2);
        }
    }
    out
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if !(self.s.is_finite() && self.s >= 0.0) {
            return fail(format!("smoothing exponent must be non-negative, got {}", self.s));
        }
        if self.mode == EvolutionMode::FullRange && self.s <= 3.0 {
            return fail(format!("full-range evolution needs s > 3, got {}", self.s));
        }
        if !(self.chi.lambda0 > 0.0 && self.chi.lambda0.is_finite()) {
            return fail(format!("cutoff radius must be positive, got {}", self.chi.lambda0));
        }
        if !(self.lambda_max >= 10.0 * self.chi.lambda0) {
            return fail(format!("lambda_max = {} is below 10 lambda0", self.lambda_max));
        }
        if self.n_lambda < 2 || self.n_lambda % 2 != 0 {
            return fail(format!("n_lambda must be even and at least 2, got {}", self.n_lambda));
        }
        if self.times.is_empty() || self.times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return fail("times must be positive and finite".into());
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return fail("times must be strictly increasing".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        let [a, b] = self.fit_window;
        if !(a > 0.0 && b > a) {
            return fail(format!("invalid fit window [{a}, {b}]"));
        }
        if self.coarse_per_lambda0 < 2 {
            return fail("coarse_per_lambda0 must be at least 2".into());
        }
        Ok(())
    }

    /// Half-width `Λ` of the integration range `[-Λ, Λ]`.
    pub fn half_range(&self) -> f64 {
        match self.mode {
            EvolutionMode::LowOnly => self.chi.lambda0,
            EvolutionMode::FullRange => self.lambda_max,
        }
    }

    /// Spectral weight `w(λ)`.
    pub fn weight(&self, lambda: f64) -> f64 {
        match self.mode {
            EvolutionMode::LowOnly => self.chi.chi(lambda),
            EvolutionMode::FullRange => (1.0 + lambda * lambda).powf(-0.5 * self.s),
        }
    }

    /// Panel width of the composite quadrature.
    pub fn panel_width(&self) -> f64 {
        2.0 * self.half_range() / self.n_lambda as f64
    }

    /// Quadrature nodes, three Gauss points per panel; none is exactly zero.
    pub fn quadrature_nodes(&self) -> Vec<f64> {
        let (half, h) = (self.half_range(), self.panel_width());
        (0..self.n_lambda)
            .flat_map(|p| {
                let c = -half + (p as f64 + 0.5) * h;
                GL3_NODES.map(|u| c + 0.5 * h * u)
            })
            .collect()
    }

    /// Punctured density lattice: dyadic `±λ₀ 2^{-k}` plus a uniform fringe up to `±Λ`.
    pub fn density_lattice(&self) -> Vec<f64> {
        let lambda0 = self.chi.lambda0;
        let half = self.half_range();
        let step = lambda0 / self.coarse_per_lambda0 as f64;
        let mut nodes = Vec::new();
        for k in 0..=self.dyadic_levels {
            let l = lambda0 * 2f64.powi(-(k as i32));
            nodes.extend([l, -l]);
        }
        let count = (half / step).ceil() as i64;
        for k in 1..=count {
            let l = (k as f64 * step).min(half);
            nodes.extend([l, -l]);
        }
        nodes.sort_by(f64::total_cmp);
        nodes.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * lambda0);
        nodes
    }
}

/// Moments `∫_{-1}^{1} uᵏ e^{-iωu} du` for `k = 0, 1, 2`.
fn moments(omega: f64) -> [C64; 3] {
    if omega.abs() < 0.5 {
        let mut m = [ZERO; 3];
        let mut term = C64::new(1.0, 0.0);
        for n in 0..24 {
            for (k, mk) in m.iter_mut().enumerate() {
                let p = k + n;
                if p % 2 == 0 {
                    *mk += term * (2.0 / (p as f64 + 1.0));
                }
            }
            term *= C64::new(0.0, -omega) / (n as f64 + 1.0);
        }
        return m;
    }
    let (s, c) = omega.sin_cos();
    let w2 = omega * omega;
    [
        C64::new(2.0 * s / omega, 0.0),
        C64::new(0.0, -2.0 * (s - omega * c) / w2),
        C64::new(2.0 * ((w2 - 2.0) * s + 2.0 * omega * c) / (w2 * omega), 0.0),
    ]
}

/// Weights of `∫_{-1}^{1} e^{-iωu} p(u) du` for the quadratic `p` through the Gauss nodes.
fn filon_weights(omega: f64) -> [C64; 3] {
    let [m0, m1, m2] = moments(omega);
    let q = GL3_NODES[2];
    let q2 = q * q;
    [(m2 - m1 * q) / (2.0 * q2), m0 - m2 / q2, (m2 + m1 * q) / (2.0 * q2)]
}

/// Complex weights of `∫ e^{-itλ} f(λ) dλ` over one panel from `f` at its Gauss nodes.
///
/// Plain Gauss–Legendre with the exponential sampled is used while `|t|·h ≤ 1`; beyond
/// that the quadratic interpolant of `f` is integrated against `e^{-itλ}` exactly.
fn panel_weights(t: f64, center: f64, width: f64) -> [C64; 3] {
    let half = 0.5 * width;
    if (t * width).abs() <= 1.0 {
        return [0, 1, 2].map(|j| {
            let l = center + half * GL3_NODES[j];
            (I * (-t * l)).exp() * (half * GL3_WEIGHTS[j])
        });
    }
    let phase = (I * (-t * center)).exp() * half;
    filon_weights(t * half).map(|w| w * phase)
}

/// `(sa, si)` with `μ(λ, d) = sa·α·ê + i·si·I` at distance `r`, regular at `r = 0`.
fn free_density_coefficients(lambda: f64, r: f64) -> (f64, f64) {
    if r == 0.0 {
        return (0.0, lambda * lambda / (2.0 * PI));
    }
    let z = lambda * r;
    (lambda * cos_minus_sinc(z) / (2.0 * PI * r), lambda * z.sin() / (2.0 * PI * r))
}

/// Free spectral density `μ(λ, d) / (2πi)` for the displacement `d`.
pub fn free_density(lambda: f64, d: [f64; 3]) -> Mat4 {
    let r = norm3(d);
    let (sa, si) = free_density_coefficients(lambda, r);
    let mu = if r == 0.0 {
        Mat4::identity().scale(I * si)
    } else {
        alpha_dot(d.map(|c| c / r)).scale_re(sa) + Mat4::identity().scale(I * si)
    };
    mu.scale(C64::new(0.0, -1.0 / (2.0 * PI)))
}

fn at_lambda(lambda: f64, e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("at lambda = {lambda}: {m}")),
        other => other,
    }
}

/// Solved right factors of the perturbed density on a λ-lattice, for a fixed source list.
///
/// A free cache (no potential) carries no lattice and evaluates `μ/(2πi)` exactly.
#[derive(Clone, Debug)]
pub struct DensityCache {
    pub potential_hash: String,
    pub grid_hash: String,
    pub sources: Vec<[f64; 3]>,
    /// Sorted nonzero lattice nodes.
    pub lambdas: Vec<f64>,
    points: Vec<[f64; 3]>,
    rho: Vec<f64>,
    /// Per node, `√wᵢ v(xᵢ)ᴴ Sᵢ` flattened as `(4i + r)·4m + c`.
    q_s: Vec<Vec<C64>>,
    /// Per node, `√wᵢ v(xᵢ)ᴴ Zᵢ` in the same layout.
    q_z: Vec<Vec<C64>>,
}

impl DensityCache {
    /// Cache for `V ≡ 0`.
    pub fn free(sources: &[[f64; 3]]) -> Self {
        Self {
            potential_hash: String::new(),
            grid_hash: String::new(),
            sources: sources.to_vec(),
            lambdas: Vec::new(),
            points: Vec::new(),
            rho: Vec::new(),
            q_s: Vec::new(),
            q_z: Vec::new(),
        }
    }

    pub fn is_free(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// Whether the lattice spans `[-half, half]`.
    pub fn covers(&self, half: f64) -> bool {
        let slack = 1e-12 * half;
        self.is_free() || (self.lambdas[0] <= -half + slack && *self.lambdas.last().unwrap() >= half - slack)
    }

    /// Node indices and Lagrange coefficients of the cubic stencil around `lambda`.
    fn stencil(&self, lambda: f64) -> Result<(usize, Vec<f64>)> {
        let ls = &self.lambdas;
        let (lo, hi) = (ls[0], ls[ls.len() - 1]);
        let slack = 1e-12 * (hi - lo);
        if lambda < lo - slack || lambda > hi + slack {
            return Err(Error::Validation(format!("lambda = {lambda} lies outside the cached range [{lo}, {hi}]")));
        }
        let width = ls.len().min(4);
        let above = ls.partition_point(|l| *l <= lambda);
        let start = above.saturating_sub(width / 2).min(ls.len() - width);
        let coef = (start..start + width)
            .map(|k| {
                (start..start + width)
                    .filter(|&j| j != k)
                    .map(|j| (lambda - ls[j]) / (ls[k] - ls[j]))
                    .product()
            })
            .collect();
        Ok((start, coef))
    }

    /// Density `[R_V⁺ - R_V⁻](λ)(x_a, y_b) / (2πi)`, flattened as `a·m + b`.
    pub fn density(&self, lambda: f64, targets: &[[f64; 3]]) -> Result<Vec<Mat4>> {
        let m = self.sources.len();
        let mut out: Vec<Mat4> = targets
            .iter()
            .flat_map(|x| self.sources.iter().map(move |y| free_density(lambda, sub3(*x, *y))))
            .collect();
        if self.is_free() {
            return Ok(out);
        }
        let (start, coef) = self.stencil(lambda)?;
        let len = self.q_s[0].len();
        let mut qs = vec![ZERO; len];
        let mut qz = vec![ZERO; len];
        for (k, c) in coef.iter().enumerate() {
            for ((a, b), (s, z)) in qs.iter_mut().zip(qz.iter_mut()).zip(self.q_s[start + k].iter().zip(&self.q_z[start + k])) {
                *a += s * c;
                *b += z * c;
            }
        }
        let cols = 4 * m;
        let corrections: Vec<Vec<C64>> = targets.par_iter().map(|x| self.correction(lambda, *x, &qs, &qz, cols)).collect();
        let factor = C64::new(0.0, 1.0 / (4.0 * PI));
        for (a, acc) in corrections.iter().enumerate() {
            for b in 0..m {
                let c = Mat4::from_fn(|r, k| acc[r * cols + 4 * b + k]);
                // (μ - C)/(2πi) with C = ½·acc, and -1/(2πi) = i/(2π).
                out[a * m + b] += c.scale(factor);
            }
        }
        Ok(out)
    }

    /// `Σᵢ [(L⁺ - L⁻)/λ]ᵢ Sᵢ + [L⁺ + L⁻]ᵢ Zᵢ` for one target, as a `4 × 4m` array.
    fn correction(&self, lambda: f64, x: [f64; 3], qs: &[C64], qz: &[C64], cols: usize) -> Vec<C64> {
        let mut acc = vec![ZERO; 4 * cols];
        let mut p = vec![ZERO; 4 * cols];
        for (i, xi) in self.points.iter().enumerate() {
            let d = sub3(x, *xi);
            let r = norm3(d);
            let block = 4 * cols * i..4 * cols * (i + 1);
            let (bs, bz) = (&qs[block.clone()], &qz[block]);
            if r == 0.0 {
                // Symmetric self-cell rule: R0± = λ e^{±iλρ}/(4πρ) I.
                let rho = self.rho[i];
                let z = lambda * rho;
                let cdi = C64::new(0.0, z.sin() / (2.0 * PI * rho));
                let csi = C64::new(lambda * z.cos() / (2.0 * PI * rho), 0.0);
                for k in 0..4 * cols {
                    acc[k] += cdi * bs[k] + csi * bz[k];
                }
                continue;
            }
            let z = lambda * r;
            let (sz, cz) = z.sin_cos();
            let scale = 1.0 / (2.0 * PI * r);
            let cda = C64::new(cos_minus_sinc(z) * scale, 0.0);
            let cdi = C64::new(0.0, sz * scale);
            let csa = C64::new(0.0, (lambda * sz + cz / r) * scale);
            let csi = C64::new(lambda * cz * scale, 0.0);
            for k in 0..4 * cols {
                p[k] = cda * bs[k] + csa * bz[k];
                acc[k] += cdi * bs[k] + csi * bz[k];
            }
            let a = alpha_dot(d.map(|c| c / r));
            for row in 0..4 {
                for inner in 0..4 {
                    let e = a.0[row][inner];
                    if e == ZERO {
                        continue;
                    }
                    for c in 0..cols {
                        acc[row * cols + c] += e * p[inner * cols + c];
                    }
                }
            }
        }
        acc
    }
}

/// Solves `M±(λ) X = B±` at every lattice node and stores `S` and `Z`.
///
/// With `V ≡ 0` this returns [`DensityCache::free`]. A node at `λ = 0` is rejected.
pub fn build_density_cache(
    pot: &FactorizedPotential,
    grid: &SpatialGrid,
    report: &ThresholdReport,
    lambdas: &[f64],
    sources: &[[f64; 3]],
) -> Result<DensityCache> {
    build_density_cache_in(pot, grid, report, lambdas, sources, None)
}

/// Header of a persisted density-cache node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NodeHeader {
    potential_hash: String,
    grid_hash: String,
    sources: Vec<[f64; 3]>,
    lambda: f64,
    len: usize,
}

/// File stem of the node at `lambda`, keyed by potential, grid, sources and λ.
fn node_stem(dir: &Path, header: &NodeHeader) -> std::path::PathBuf {
    let key = hash_json(&(&header.potential_hash, &header.grid_hash, &header.sources, header.lambda.to_bits()));
    dir.join(format!("node_{}", &key[..24]))
}

/// [`build_density_cache`] that reuses and stores lattice nodes in `dir`.
///
/// Nodes whose stored header does not match the request are recomputed and overwritten.
pub fn build_density_cache_in(
    pot: &FactorizedPotential,
    grid: &SpatialGrid,
    report: &ThresholdReport,
    lambdas: &[f64],
    sources: &[[f64; 3]],
    dir: Option<&Path>,
) -> Result<DensityCache> {
    if sources.is_empty() {
        return Err(Error::Validation("density cache needs at least one source point".into()));
    }
    if pot.is_zero() {
        return Ok(DensityCache::free(sources));
    }
    let mut nodes = lambdas.to_vec();
    nodes.sort_by(f64::total_cmp);
    nodes.dedup();
    if nodes.is_empty() || nodes.contains(&0.0) || nodes.iter().any(|l| !l.is_finite()) {
        return Err(Error::Validation("density lattice must be nonempty, finite and punctured at zero".into()));
    }
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let n = grid.len();
    let cols = 4 * sources.len();
    let len = 4 * n * cols;
    let potential_hash = pot.content_hash();
    let grid_hash = grid.descriptor_hash();
    let project = |x: faer::Mat<C64>| -> Vec<C64> {
        let mut out = vec![ZERO; len];
        for i in 0..n {
            let va = pot.factors[i].v.adjoint().scale_re(grid.weights[i].sqrt());
            for r in 0..4 {
                for c in 0..cols {
                    out[(4 * i + r) * cols + c] = (0..4).map(|k| va.0[r][k] * x[(4 * i + k, c)]).sum();
                }
            }
        }
        out
    };
    let mut q_s = Vec::with_capacity(nodes.len());
    let mut q_z = Vec::with_capacity(nodes.len());
    let mut reused = 0;
    for &lambda in &nodes {
        let header =
            NodeHeader { potential_hash: potential_hash.clone(), grid_hash: grid_hash.clone(), sources: sources.to_vec(), lambda, len };
        if let Some(d) = dir {
            if let Ok((stored, mut data)) = read_dataset::<NodeHeader>(&node_stem(d, &header)) {
                if stored == header && data.len() == 2 * len {
                    q_z.push(data.split_off(len));
                    q_s.push(data);
                    reused += 1;
                    continue;
                }
            }
        }
        let solver = ResolventSolver::new(pot, grid, report, lambda).map_err(|e| at_lambda(lambda, e))?;
        let bp = right_factor(pot, grid, SpectralPoint::plus(lambda), sources);
        let bm = right_factor(pot, grid, SpectralPoint::minus(lambda), sources);
        let xp = solver.solve(Branch::Plus, bp.as_ref());
        let xm = solver.solve(Branch::Minus, bm.as_ref());
        if xp.norm_max().is_nan() || xm.norm_max().is_nan() {
            return Err(at_lambda(lambda, Error::Validation("solve produced non-finite values".into())));
        }
        let s = faer::Scale(C64::new(lambda, 0.0)) * (&xp + &xm);
        let (qs, qz) = (project(s), project(&xp - &xm));
        if let Some(d) = dir {
            let data: Vec<C64> = qs.iter().chain(&qz).copied().collect();
            write_dataset(&node_stem(d, &header), &header, &data)?;
        }
        q_s.push(qs);
        q_z.push(qz);
        log::debug!("density cache node lambda = {lambda:.6e}");
    }
    if dir.is_some() {
        log::info!("density cache: {reused} of {} nodes reused", nodes.len());
    }
    Ok(DensityCache {
        potential_hash,
        grid_hash,
        sources: sources.to_vec(),
        lambdas: nodes,
        points: grid.points.clone(),
        rho: (0..n).map(|i| DIAGONAL_RADIUS_FACTOR * grid.local_width(i)).collect(),
        q_s,
        q_z,
    })
}

/// Deterministic set of `(x, y)` pairs standing in for the supremum over `ℝ³ × ℝ³`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDesign {
    pub sources: Vec<[f64; 3]>,
    pub targets: Vec<[f64; 3]>,
}

impl SampleDesign {
    /// Origin-adjacent source and a grid corner; targets on a ray out to distance 96,
    /// at the box corners and axis points, and a few seeded random points.
    pub fn standard(grid: &SpatialGrid, seed: u64) -> Self {
        let r = grid.descriptor.box_radius;
        let h = grid.spacing().unwrap_or_else(|| grid.local_width(grid.nearest([0.0; 3])));
        let y0 = [0.5 * h; 3];
        let c = r - 0.5 * h;
        let sources = vec![y0, [-c, -c, -c]];
        let mut targets = Vec::new();
        for d in [0.25, 0.5, 1.0, 1.5, 2.0, 3.0].into_iter().chain((4..=96).map(f64::from)) {
            targets.push([y0[0] + d, y0[1], y0[2]]);
        }
        for k in 0..8 {
            let s = |b: usize| if k >> b & 1 == 1 { c } else { -c };
            targets.push([s(0), s(1), s(2)]);
        }
        for j in 0..3 {
            for sign in [1.0, -1.0] {
                let mut p = [0.0; 3];
                p[j] = sign * r;
                targets.push(p);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4 {
            targets.push([0, 1, 2].map(|_| rng.random_range(-3.0 * r..3.0 * r)));
        }
        Self { sources, targets }
    }

    pub fn pairs(&self) -> usize {
        self.sources.len() * self.targets.len()
    }
}

/// `K(t; x_a, y_b)` for a list of times.
#[derive(Clone, Debug)]
pub struct KernelSweep {
    pub times: Vec<f64>,
    pub targets: Vec<[f64; 3]>,
    pub sources: Vec<[f64; 3]>,
    /// `kernel[k][a·m + b]` is `K(times[k]; targets[a], sources[b])`.
    pub kernel: Vec<Vec<Mat4>>,
}

impl KernelSweep {
    pub fn get(&self, k: usize, a: usize, b: usize) -> Mat4 {
        self.kernel[k][a * self.sources.len() + b]
    }

    /// `max ⟨x⟩^{-γ} ‖K(t; x, y)‖ ⟨y⟩^{-γ}` over all pairs at time index `k`.
    pub fn sup_weighted(&self, k: usize, gamma: f64) -> f64 {
        let m = self.sources.len();
        self.kernel[k]
            .iter()
            .enumerate()
            .map(|(p, kern)| {
                let (x, y) = (self.targets[p / m], self.sources[p % m]);
                kern.spectral_norm() * (bracket(x) * bracket(y)).powf(-gamma)
            })
            .fold(0.0, f64::max)
    }
}

/// Evaluates `K(t; x, y) = ∫ e^{-itλ} w(λ) density(λ)(x, y) dλ` for every time at once.
pub fn stone_sweep(cache: &DensityCache, cfg: &EvolutionConfig, targets: &[[f64; 3]], times: &[f64]) -> Result<KernelSweep> {
    cfg.validate()?;
    let half = cfg.half_range();
    let h = cfg.panel_width();
    let outermost = half - 0.5 * h * (1.0 - GL3_NODES[2]);
    if !cache.covers(outermost) {
        return Err(Error::Validation(format!("density cache does not cover the integration range [-{half}, {half}]")));
    }
    let pairs = targets.len() * cache.sources.len();
    let mut kernel = vec![vec![Mat4::zero(); pairs]; times.len()];
    for p in 0..cfg.n_lambda {
        let c = -half + (p as f64 + 0.5) * h;
        let weights: Vec<[C64; 3]> = times.iter().map(|&t| panel_weights(t, c, h)).collect();
        for j in 0..3 {
            let lambda = c + 0.5 * h * GL3_NODES[j];
            let w = cfg.weight(lambda);
            if w == 0.0 {
                continue;
            }
            let dens = cache.density(lambda, targets)?;
            for (acc, wt) in kernel.iter_mut().zip(&weights) {
                let f = wt[j] * w;
                for (k, d) in acc.iter_mut().zip(&dens) {
                    *k += d.scale(f);
                }
            }
        }
    }
    Ok(KernelSweep { times: times.to_vec(), targets: targets.to_vec(), sources: cache.sources.clone(), kernel })
}

/// `K(t; x, y)` on `xs × ys` as `[a][b]`, building the density lattice from `cfg`.
pub fn stone_evolve(
    pot: &FactorizedPotential,
    grid: &SpatialGrid,
    report: &ThresholdReport,
    cfg: &EvolutionConfig,
    xs: &[[f64; 3]],
    ys: &[[f64; 3]],
    t: f64,
) -> Result<Vec<Vec<Mat4>>> {
    cfg.validate()?;
    let cache = build_density_cache(pot, grid, report, &cfg.density_lattice(), ys)?;
    let sweep = stone_sweep(&cache, cfg, xs, &[t])?;
    Ok((0..xs.len()).map(|a| (0..ys.len()).map(|b| sweep.get(0, a, b)).collect()).collect())
}

/// Least-squares slope of `log v` against `log t` over a window, with the largest
/// absolute deviation of the fitted line on the log scale.
pub fn fit_log_slope(times: &[f64], values: &[f64], window: [f64; 2]) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= window[0] * (1.0 - 1e-12) && **t <= window[1] * (1.0 + 1e-12))
        .map(|(t, v)| (t.ln(), v.ln()))
        .collect();
    if pts.len() < 2 || pts.iter().any(|(_, v)| !v.is_finite()) {
        return Err(Error::Validation("exponent fit needs at least two positive values in the window".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let residual = pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).abs()).fold(0.0, f64::max);
    Ok((slope, residual))
}

/// Weighted supremum of the kernel against time with its fitted exponent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub gamma: f64,
    pub times: Vec<f64>,
    /// `max ⟨x⟩^{-γ} ‖K(t; x, y)‖ ⟨y⟩^{-γ}` over the design.
    pub values: Vec<f64>,
    /// `max ‖K(t; x, y)‖` over the design.
    pub unweighted: Vec<f64>,
    pub fitted_exponent: f64,
    pub fit_window: [f64; 2],
    pub fit_residual: f64,
    pub pairs: usize,
}

/// Fits the decay of a kernel sweep at weight exponent `γ`.
pub fn decay_curve(sweep: &KernelSweep, gamma: f64, window: [f64; 2]) -> Result<DecayCurve> {
    let values: Vec<f64> = (0..sweep.times.len()).map(|k| sweep.sup_weighted(k, gamma)).collect();
    let unweighted: Vec<f64> = (0..sweep.times.len()).map(|k| sweep.sup_weighted(k, 0.0)).collect();
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Validation("decay curve has a non-positive value".into()));
    }
    let (fitted_exponent, fit_residual) = fit_log_slope(&sweep.times, &values, window)?;
    Ok(DecayCurve {
        gamma,
        times: sweep.times.clone(),
        values,
        unweighted,
        fitted_exponent,
        fit_window: window,
        fit_residual,
        pairs: sweep.targets.len() * sweep.sources.len(),
    })
}

pub(crate) fn check_span(times: &[f64]) -> Result<()> {
    let (lo, hi) = (times[0], times[times.len() - 1]);
    if hi < 10.0 * lo {
        return Err(Error::Validation(format!("decay experiment needs times spanning a decade, got [{lo}, {hi}]")));
    }
    Ok(())
}

/// Runs the Stone quadrature on a design and fits the decay exponent at `cfg.gamma`.
pub fn decay_experiment(
    pot: &FactorizedPotential,
    grid: &SpatialGrid,
    report: &ThresholdReport,
    cfg: &EvolutionConfig,
    design: &SampleDesign,
) -> Result<DecayCurve> {
    cfg.validate()?;
    check_span(&cfg.times)?;
    let cache = build_density_cache(pot, grid, report, &cfg.density_lattice(), &design.sources)?;
    let sweep = stone_sweep(&cache, cfg, &design.targets, &cfg.times)?;
    decay_curve(&sweep, cfg.gamma, cfg.fit_window)
}

/// `max ‖K(t; x, y)‖` over the standard design.
pub fn supnorm_kernel(
    pot: &FactorizedPotential,
    grid: &SpatialGrid,
    report: &ThresholdReport,
    cfg: &EvolutionConfig,
    t: f64,
) -> Result<f64> {
    cfg.validate()?;
    let design = SampleDesign::standard(grid, 0);
    let cache = build_density_cache(pot, grid, report, &cfg.density_lattice(), &design.sources)?;
    Ok(stone_sweep(&cache, cfg, &design.targets, &[t])?.sup_weighted(0, 0.0))
}

fn uniform_spacing(grid: &SpatialGrid) -> Result<f64> {
    grid.spacing().ok_or_else(|| Error::Validation("the Fourier route needs a uniform tensor grid".into()))
}

/// The four components of a field placed in the corner of a zero `p³` cube.
fn embed(grid: &SpatialGrid, field: &SpinorField, p: usize) -> Result<[Vec<C64>; 4]> {
    if field.descriptor != grid.descriptor {
        return Err(Error::Validation("field was sampled on a different grid".into()));
    }
    let n = grid.descriptor.n;
    let mut out = [0, 1, 2, 3].map(|_| vec![ZERO; p * p * p]);
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let v = field.values[grid.index(a, b, c)];
                for k in 0..4 {
                    out[k][(a * p + b) * p + c] = v[k];
                }
            }
        }
    }
    Ok(out)
}

fn extract(grid: &SpatialGrid, comps: &[Vec<C64>; 4], p: usize, scale: f64) -> SpinorField {
    let n = grid.descriptor.n;
    let mut values = vec![[ZERO; 4]; grid.len()];
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let idx = (a * p + b) * p + c;
                values[grid.index(a, b, c)] = [0, 1, 2, 3].map(|k| comps[k][idx] * scale);
            }
        }
    }
    SpinorField { descriptor: grid.descriptor, values }
}

/// `e^{-itD₀} ⟨D₀⟩^{-s}` applied by the discrete Fourier transform on the periodic box.
///
/// The multiplier is `⟨|ξ|⟩^{-s}[cos(t|ξ|) I - i sin(t|ξ|) A(ξ)/|ξ|]`. Waves that leave
/// the box re-enter on the opposite side; see [`free_propagator_oracle_padded`].
pub fn free_propagator_oracle(grid: &SpatialGrid, field: &SpinorField, t: f64, s: f64) -> Result<SpinorField> {
    free_propagator_oracle_padded(grid, field, t, s, 1)
}

/// [`free_propagator_oracle`] on a periodic box enlarged by the factor `pad`, which
/// delays the wrap-around of outgoing waves.
pub fn free_propagator_oracle_padded(grid: &SpatialGrid, field: &SpinorField, t: f64, s: f64, pad: usize) -> Result<SpinorField> {
    let h = uniform_spacing(grid)?;
    if pad == 0 {
        return Err(Error::Validation("padding factor must be at least 1".into()));
    }
    let p = pad * grid.descriptor.n;
    let mut comps = embed(grid, field, p)?;
    let forward = Fft3::forward(p);
    comps.iter_mut().for_each(|c| forward.process(c));
    let k0 = 2.0 * PI / (p as f64 * h);
    for a in 0..p {
        for b in 0..p {
            for c in 0..p {
                let xi = [a, b, c].map(|k| k0 * signed_index(k, p) as f64);
                let k2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
                let m = symbol_propagator(xi, t).scale_re((1.0 + k2).powf(-0.5 * s));
                let idx = (a * p + b) * p + c;
                let v: Spinor = [0, 1, 2, 3].map(|k| comps[k][idx]);
                let out = m.mul_vec(&v);
                for k in 0..4 {
                    comps[k][idx] = out[k];
                }
            }
        }
    }
    let inverse = Fft3::inverse(p);
    comps.iter_mut().for_each(|c| inverse.process(c));
    Ok(extract(grid, &comps, p, 1.0 / (p * p * p) as f64))
}

/// Free evolution of a field through the Stone formula with `V ≡ 0`.
///
/// For each quadrature node the spatial convolution `(μ(λ) * f)` is evaluated by
/// zero-padded FFTs, and the λ-integral is accumulated in Fourier space.
pub fn stone_evolve_field(grid: &SpatialGrid, field: &SpinorField, cfg: &EvolutionConfig, times: &[f64]) -> Result<Vec<SpinorField>> {
    cfg.validate()?;
    let h = uniform_spacing(grid)?;
    let p = 2 * grid.descriptor.n;
    let size = p * p * p;
    let forward = Fft3::forward(p);
    let mut fhat = embed(grid, field, p)?;
    fhat.iter_mut().for_each(|c| {
        c.iter_mut().for_each(|z| *z *= h * h * h);
        forward.process(c);
    });
    // (αⱼ f̂)_c for every mode.
    let alphas = [alpha(0), alpha(1), alpha(2)];
    let af: Vec<[Vec<C64>; 4]> = alphas
        .iter()
        .map(|al| {
            let mut out = [0, 1, 2, 3].map(|_| vec![ZERO; size]);
            for idx in 0..size {
                let v = al.mul_vec(&[0, 1, 2, 3].map(|k| fhat[k][idx]));
                for k in 0..4 {
                    out[k][idx] = v[k];
                }
            }
            out
        })
        .collect();
    let disp: Vec<[f64; 3]> = (0..size)
        .map(|idx| [idx / (p * p), (idx / p) % p, idx % p].map(|k| h * signed_index(k, p) as f64))
        .collect();
    let mut acc: Vec<[Vec<C64>; 4]> = times.iter().map(|_| [0, 1, 2, 3].map(|_| vec![ZERO; size])).collect();
    let half = cfg.half_range();
    let hp = cfg.panel_width();
    let to_density = C64::new(0.0, -1.0 / (2.0 * PI));
    for panel in 0..cfg.n_lambda {
        let c = -half + (panel as f64 + 0.5) * hp;
        let weights: Vec<[C64; 3]> = times.iter().map(|&t| panel_weights(t, c, hp)).collect();
        for j in 0..3 {
            let lambda = c + 0.5 * hp * GL3_NODES[j];
            let w = cfg.weight(lambda);
            if w == 0.0 {
                continue;
            }
            let mut kern: Vec<Vec<C64>> = (0..4).map(|_| vec![ZERO; size]).collect();
            for (idx, d) in disp.iter().enumerate() {
                let r = norm3(*d);
                let (sa, si) = free_density_coefficients(lambda, r);
                kern[0][idx] = C64::new(0.0, si);
                if r > 0.0 {
                    for k in 0..3 {
                        kern[k + 1][idx] = C64::new(sa * d[k] / r, 0.0);
                    }
                }
            }
            kern.par_iter_mut().for_each(|k| forward.process(k));
            for (a, wt) in acc.iter_mut().zip(&weights) {
                let f = wt[j] * w * to_density;
                for comp in 0..4 {
                    let out = &mut a[comp];
                    for idx in 0..size {
                        let g = kern[0][idx] * fhat[comp][idx]
                            + kern[1][idx] * af[0][comp][idx]
                            + kern[2][idx] * af[1][comp][idx]
                            + kern[3][idx] * af[2][comp][idx];
                        out[idx] += g * f;
                    }
                }
            }
        }
    }
    let inverse = Fft3::inverse(p);
    Ok(acc
        .into_iter()
        .map(|mut comps| {
            comps.iter_mut().for_each(|c| inverse.process(c));
            extract(grid, &comps, p, 1.0 / size as f64)
        })
        .collect())
}

/// `‖a - b‖ / ‖b‖` in the grid's weighted L² norm.
pub fn relative_l2_mismatch(a: &SpinorField, b: &SpinorField, grid: &SpatialGrid) -> f64 {
    a.combine(C64::new(1.0, 0.0), b, C64::new(-1.0, 0.0)).l2_norm(grid) / b.l2_norm(grid)
}

/// Result of the half-period shift bound at one time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfPeriodProbe {
    pub t: f64,
    /// `(1/|t|) ∫ ‖𝓔'(λ) - 𝓔'(λ - π/t)‖ dλ`.
    pub bound: f64,
    /// `‖∫ e^{-itλ} 𝓔(λ) dλ‖` on the same lattice.
    pub integral: f64,
    pub step: f64,
}

/// Half-period shift bound for `𝓔 = χ·density` at one `(x, y)`.
///
/// `𝓔'` is taken by central differences on a uniform lattice whose step divides `π/|t|`
/// and is at most `λ₀ / n_lambda`.
pub fn half_period_probe<F>(cfg: &EvolutionConfig, density: F, t: f64) -> Result<HalfPeriodProbe>
where
    F: Fn(f64) -> Mat4 + Sync,
{
    if t == 0.0 || !t.is_finite() {
        return Err(Error::Validation(format!("the half-period probe needs a finite t != 0, got {t}")));
    }
    let lambda0 = cfg.chi.lambda0;
    let base = lambda0 / cfg.n_lambda.max(1) as f64;
    let shift = PI / t.abs();
    let disjoint = shift >= 2.0 * lambda0;
    let (step, m) = if disjoint {
        (base, 0)
    } else {
        let m = ((shift / base).ceil() as usize).max(4);
        (shift / m as f64, m)
    };
    let reach = if disjoint { 0.0 } else { shift };
    let points = ((2.0 * lambda0 + reach) / step).ceil() as usize + 3;
    if points > MAX_PROBE_POINTS {
        return Err(Error::Resolution { t, spacing: step, needed: shift / 4.0 });
    }
    // Lattice λ_k = -λ₀ - step + k·step covering the support and its shift.
    let origin = -lambda0 - step;
    let lattice: Vec<f64> = (0..points).map(|k| origin + k as f64 * step).collect();
    let values: Vec<Mat4> = lattice
        .par_iter()
        .map(|&l| {
            let c = cfg.chi.chi(l);
            if l.abs() >= lambda0 || c == 0.0 {
                Mat4::zero()
            } else {
                density(l).scale_re(c)
            }
        })
        .collect();
    let deriv: Vec<Mat4> = (0..points)
        .map(|k| {
            if k == 0 || k + 1 == points {
                Mat4::zero()
            } else {
                (values[k + 1] - values[k - 1]).scale_re(0.5 / step)
            }
        })
        .collect();
    let bound = if disjoint {
        2.0 * step * deriv.iter().map(Mat4::spectral_norm).sum::<f64>() / t.abs()
    } else {
        // 𝓔'(λ_k - π/|t|) is the sample m steps earlier; zero before the lattice.
        let total: f64 = (0..points)
            .map(|k| {
                let earlier = if k >= m { deriv[k - m] } else { Mat4::zero() };
                (deriv[k] - earlier).spectral_norm()
            })
            .sum();
        step * total / t.abs()
    };
    let integral = lattice
        .iter()
        .zip(&values)
        .fold(Mat4::zero(), |acc, (l, v)| acc + v.scale((I * (-t * l)).exp() * step))
        .spectral_norm();
    Ok(HalfPeriodProbe { t, bound, integral, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridScheme};
    use crate::kernels::spectral_density_free;
    use crate::potential::{sample_potential, PotentialFamily};
    use crate::resolvent::spectral_density;
    use crate::threshold::{classify_threshold, DEFAULT_TOL};

    fn small_case(g: f64) -> (SpatialGrid, FactorizedPotential, ThresholdReport) {
        let grid = build_grid(GridScheme::UniformTensor, 4, 2.0).unwrap();
        let pot = sample_potential(&PotentialFamily::isotropic(g, 6.0), &grid).unwrap();
        let report = classify_threshold(&pot, &grid, DEFAULT_TOL).unwrap();
        (grid, pot, report)
    }

    #[test]
    fn filon_weights_reduce_to_gauss_and_integrate_quadratics() {
        let w = filon_weights(0.0);
        for j in 0..3 {
            assert!((w[j] - C64::new(GL3_WEIGHTS[j], 0.0)).norm() < 1e-15);
        }
        for omega in [0.3, 0.49, 0.51, 7.0, 60.0] {
            let w = filon_weights(omega);
            let p = |u: f64| 1.0 + 2.0 * u + 3.0 * u * u;
            let got: C64 = (0..3).map(|j| w[j] * p(GL3_NODES[j])).sum();
            let n = 200_000;
            let want: C64 = (0..n)
                .map(|k| {
                    let u = -1.0 + (k as f64 + 0.5) * 2.0 / n as f64;
                    (I * (-omega * u)).exp() * p(u) * (2.0 / n as f64)
                })
                .sum();
            assert!((got - want).norm() < 1e-8, "omega = {omega}: {got} vs {want}");
        }
    }

    #[test]
    fn composite_rule_integrates_oscillatory_cosine() {
        let a = 3.0;
        for t in [0.5, 5.0, 40.0] {
            let exact = ((a - t) as f64).sin() / (a - t) + (a + t).sin() / (a + t);
            let n = 256;
            let h = 2.0 / n as f64;
            let mut got = ZERO;
            for p in 0..n {
                let c = -1.0 + (p as f64 + 0.5) * h;
                let w = panel_weights(t, c, h);
                for j in 0..3 {
                    got += w[j] * (a * (c + 0.5 * h * GL3_NODES[j])).cos();
                }
            }
            assert!((got - C64::new(exact, 0.0)).norm() < 1e-7, "t = {t}: {got} vs {exact}");
        }
    }

    #[test]
    fn config_validation_and_lattices() {
        let cfg = EvolutionConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.times.len(), 11);
        assert_eq!(cfg.times[0], 1.0);
        assert_eq!(*cfg.times.last().unwrap(), 64.0);
        let lattice = cfg.density_lattice();
        assert!(!lattice.contains(&0.0));
        assert!(lattice.windows(2).all(|w| w[0] < w[1]));
        for k in 0..=cfg.dyadic_levels {
            let l = 0.5 * 2f64.powi(-(k as i32));
            assert!(lattice.iter().any(|x| (x - l).abs() < 1e-15) && lattice.iter().any(|x| (x + l).abs() < 1e-15));
        }
        assert!(cfg.quadrature_nodes().iter().all(|l| *l != 0.0 && l.abs() < 0.5));
        let bad = [
            EvolutionConfig { s: 3.0, mode: EvolutionMode::FullRange, ..cfg.clone() },
            EvolutionConfig { lambda_max: 4.0, ..cfg.clone() },
            EvolutionConfig { n_lambda: 7, ..cfg.clone() },
            EvolutionConfig { times: vec![2.0, 1.0], ..cfg.clone() },
            EvolutionConfig { times: vec![0.0, 1.0], ..cfg.clone() },
            EvolutionConfig { gamma: 1.5, ..cfg.clone() },
        ];
        for b in bad {
            assert!(matches!(b.validate(), Err(Error::Validation(_))), "{b:?}");
        }
    }

    #[test]
    fn free_cache_is_closed_form_density() {
        let ys = [[0.1, 0.2, -0.3], [1.0, -1.0, 0.5]];
        let xs = [[2.0, 0.0, 0.0], [-0.4, 0.7, 1.1]];
        let cache = DensityCache::free(&ys);
        for lambda in [-0.4, 0.03, 0.3] {
            let d = cache.density(lambda, &xs).unwrap();
            for (a, x) in xs.iter().enumerate() {
                for (b, y) in ys.iter().enumerate() {
                    let want = spectral_density_free(lambda, *x, *y).unwrap().scale(C64::new(0.0, -0.5 / PI));
                    assert!((d[a * 2 + b] - want).max_abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn free_kernel_is_bounded_at_zero_time_and_time_reversible() {
        let pts = [[0.25, 0.25, 0.25], [3.0, -1.0, 0.5], [-2.0, 4.0, 1.0]];
        let cfg = EvolutionConfig { n_lambda: 128, ..Default::default() };
        let cache = DensityCache::free(&pts);
        let times = [-8.0, -1.0, 0.0, 1.0, 8.0];
        let sweep = stone_sweep(&cache, &cfg, &pts, &times).unwrap();
        let bound: f64 = cfg.quadrature_nodes().iter().map(|l| cfg.chi.chi(*l) * l * l).sum::<f64>() * cfg.panel_width() / 3.0;
        assert!(sweep.sup_weighted(2, 0.0) <= bound);
        for (k, mirror) in [(3, 1), (4, 0)] {
            for a in 0..3 {
                for b in 0..3 {
                    let defect = (sweep.get(k, a, b) - sweep.get(mirror, b, a).adjoint()).max_abs();
                    assert!(defect < 1e-12, "t = {}: {defect}", times[k]);
                }
            }
        }
    }

    #[test]
    fn cache_reproduces_direct_density_at_its_nodes() {
        let (grid, pot, report) = small_case(1.0);
        let ys = [[0.3, -0.2, 0.1], [1.7, 0.4, -0.9]];
        let xs = [[2.5, 0.0, 0.0], [-0.6, 0.8, 0.2], grid.points[5]];
        let nodes = [-0.5, -0.125, 0.01, 0.25, 0.5];
        let cache = build_density_cache(&pot, &grid, &report, &nodes, &ys).unwrap();
        assert_eq!(cache.potential_hash, pot.content_hash());
        for &l in &nodes {
            let got = cache.density(l, &xs).unwrap();
            let want = spectral_density(&pot, &grid, &report, l, &xs, &ys).unwrap();
            for a in 0..xs.len() {
                for b in 0..ys.len() {
                    let scale = want.kernel[a][b].max_abs().max(1e-12);
                    assert!((got[a * 2 + b] - want.kernel[a][b]).max_abs() < 1e-10 * scale.max(1.0), "lambda = {l}");
                }
            }
        }
        assert!(cache.density(0.6, &xs).is_err());
        assert!(build_density_cache(&pot, &grid, &report, &[0.0, 0.1], &ys).is_err());
    }

    #[test]
    fn persisted_cache_nodes_are_reused_bitwise() {
        let (grid, pot, report) = small_case(1.0);
        let ys = [[0.3, -0.2, 0.1]];
        let xs = [[2.5, 0.0, 0.0], [-0.6, 0.8, 0.2]];
        let dir = tempfile::tempdir().unwrap();
        let first = build_density_cache_in(&pot, &grid, &report, &[-0.25, 0.1, 0.25], &ys, Some(dir.path())).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 6);
        let second = build_density_cache_in(&pot, &grid, &report, &[-0.25, 0.25, 0.1], &ys, Some(dir.path())).unwrap();
        assert_eq!(first.q_s, second.q_s);
        assert_eq!(first.q_z, second.q_z);
        assert_eq!(first.density(0.2, &xs).unwrap(), second.density(0.2, &xs).unwrap());
        let other = sample_potential(&PotentialFamily::isotropic(1.5, 6.0), &grid).unwrap();
        let third = build_density_cache_in(&other, &grid, &report, &[0.25], &ys, Some(dir.path())).unwrap();
        assert_ne!(third.q_s[0], first.q_s[2]);
    }

    #[test]
    fn perturbed_kernel_is_time_reversible_on_exact_nodes() {
        let (grid, pot, report) = small_case(1.5);
        let cfg = EvolutionConfig { n_lambda: 16, ..Default::default() };
        let pts = [[0.3, -0.2, 0.1], [2.5, 0.5, 0.0], [-1.1, 0.9, 0.4]];
        let cache = build_density_cache(&pot, &grid, &report, &cfg.quadrature_nodes(), &pts).unwrap();
        let sweep = stone_sweep(&cache, &cfg, &pts, &[-3.0, 3.0]).unwrap();
        let scale = sweep.sup_weighted(1, 0.0);
        for a in 0..3 {
            for b in 0..3 {
                let defect = (sweep.get(1, a, b) - sweep.get(0, b, a).adjoint()).max_abs();
                assert!(defect < 1e-8 * scale.max(1.0), "{defect}");
            }
        }
        let free = stone_sweep(&DensityCache::free(&pts), &cfg, &pts, &[3.0]).unwrap();
        assert!((sweep.get(0, 0, 1) - free.get(0, 0, 1)).max_abs() > 0.0);
    }

    #[test]
    fn oracle_trivial_cases() {
        let grid = build_grid(GridScheme::UniformTensor, 8, 3.0).unwrap();
        let f = SpinorField::from_fn(&grid, |x| {
            let g = (-(x[0] * x[0] + 2.0 * x[1] * x[1] + x[2] * x[2])).exp();
            [C64::new(g, 0.0), C64::new(0.5 * g * x[0], 0.0), C64::new(0.0, 0.0), C64::new(0.2 * g, 0.0)]
        });
        let same = free_propagator_oracle(&grid, &f, 0.0, 0.0).unwrap();
        assert!(relative_l2_mismatch(&same, &f, &grid) < 1e-13);
        for t in [0.7, 3.0, 20.0] {
            let u = free_propagator_oracle(&grid, &f, t, 0.0).unwrap();
            assert!((u.l2_norm(&grid) - f.l2_norm(&grid)).abs() < 1e-10 * f.l2_norm(&grid));
        }
        let smooth = free_propagator_oracle(&grid, &f, 0.0, DEFAULT_S).unwrap();
        assert!(smooth.values.iter().flatten().all(|z| z.im.abs() < 1e-13));
        assert!(smooth.l2_norm(&grid) < f.l2_norm(&grid));
        let radial = build_grid(GridScheme::RadialSpherical, 4, 2.0).unwrap();
        let g = SpinorField::zeros(&radial);
        assert!(free_propagator_oracle(&radial, &g, 1.0, 0.0).is_err());
    }

    #[test]
    fn stone_field_matches_padded_oracle() {
        let grid = build_grid(GridScheme::UniformTensor, 16, 4.0).unwrap();
        let f = SpinorField::from_fn(&grid, |x| {
            let g = (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / 1.62).exp();
            [C64::new(g, 0.0), ZERO, C64::new(0.0, 0.4 * g), ZERO]
        });
        let cfg = EvolutionConfig { mode: EvolutionMode::FullRange, n_lambda: 200, ..Default::default() };
        let times = [0.0, 1.5];
        let us = stone_evolve_field(&grid, &f, &cfg, &times).unwrap();
        for (t, u) in times.iter().zip(&us) {
            let o = free_propagator_oracle_padded(&grid, &f, *t, cfg.s, 2).unwrap();
            let mismatch = relative_l2_mismatch(u, &o, &grid);
            assert!(mismatch < 1e-3, "t = {t}: {mismatch}");
        }
    }

    #[test]
    fn probe_bounds_the_oscillatory_integral() {
        let cfg = EvolutionConfig { n_lambda: 256, ..Default::default() };
        for (x, y) in [([0.0, 0.0, 0.0], [1.0, 0.5, 0.0]), ([6.0, 0.0, 0.0], [0.0, -1.0, 2.0])] {
            for t in [0.5, 2.0, 9.0, 30.0, -30.0] {
                let probe = half_period_probe(&cfg, |l| free_density(l, sub3(x, y)), t).unwrap();
                assert!(probe.integral <= probe.bound, "t = {t}: {probe:?}");
            }
        }
        // A density constant in λ: only the cutoff edges contribute.
        let c = Mat4::identity().scale_re(2.0);
        for t in [0.5, 1.0, 3.0] {
            let probe = half_period_probe(&cfg, |_| c, t).unwrap();
            assert!((probe.bound * t - 8.0).abs() < 1e-3, "{probe:?}");
        }
        assert!(matches!(half_period_probe(&cfg, |_| c, 1e7), Err(Error::Resolution { .. })));
        assert!(half_period_probe(&cfg, |_| c, 0.0).is_err());
    }

    #[test]
    fn slope_fit_recovers_power_laws() {
        let times = default_times();
        let values: Vec<f64> = times.iter().map(|t| 3.0 * t.powf(-1.5)).collect();
        let (slope, residual) = fit_log_slope(&times, &values, DEFAULT_FIT_WINDOW).unwrap();
        assert!((slope + 1.5).abs() < 1e-12 && residual < 1e-12);
        assert!(fit_log_slope(&times, &values, [100.0, 200.0]).is_err());
    }

    #[test]
    fn design_has_enough_pairs_and_is_deterministic() {
        let grid = build_grid(GridScheme::UniformTensor, 8, 2.0).unwrap();
        let a = SampleDesign::standard(&grid, 7);
        assert!(a.pairs() >= 25);
        assert_eq!(a, SampleDesign::standard(&grid, 7));
        assert_ne!(a, SampleDesign::standard(&grid, 8));
        let cfg = EvolutionConfig { mode: EvolutionMode::FullRange, ..Default::default() };
        let (g, pot, report) = small_case(1.0);
        let cache = build_density_cache(&pot, &g, &report, &[-0.5, 0.5], &a.sources).unwrap();
        assert!(stone_sweep(&cache, &cfg, &a.targets, &[1.0]).is_err());
    }
}
