//! Closed-form free Dirac resolvent kernels and their low-energy expansion.
//!
//! For `r = |x - y| > 0`, `e = (x - y)/r` and `A = α·e` the outgoing (`+`) and
//! incoming (`-`) kernels are
//!
//! ```text
//! R0±(λ)(x, y) = e^{±iλr}/(4πr) · [ A(±λ + i/r) + λ ]
//! ```
//!
//! and expand around zero energy as `R0± = G0 + λ G1 + iλ² G2± + …` with
//!
//! ```text
//! G0 = iA/(4πr²),  G1 = I/(4πr),  G2± = ±I/(4π) + A/(8π).
//! ```
//!
//! All λ-derivatives used by quadrature are closed forms. Every evaluator rejects
//! `x = y`; diagonal blocks are handled by the grid module.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::algebra::{alpha_dot, norm3, sub3, Mat4, I};
use crate::error::{Error, Result};

/// Branch selector for the limiting resolvents `R0±`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    /// `+1` for the outgoing branch, `-1` for the incoming one.
    pub fn sign(self) -> f64 {
        match self {
            Branch::Plus => 1.0,
            Branch::Minus => -1.0,
        }
    }

    /// The other branch.
    pub fn flip(self) -> Branch {
        match self {
            Branch::Plus => Branch::Minus,
            Branch::Minus => Branch::Plus,
        }
    }
}

/// A real spectral parameter together with a branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralPoint {
    pub lambda: f64,
    pub branch: Branch,
}

impl SpectralPoint {
    pub fn new(lambda: f64, branch: Branch) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::Validation(format!("spectral parameter {lambda} is not finite")));
        }
        Ok(Self { lambda, branch })
    }

    pub fn plus(lambda: f64) -> Self {
        Self { lambda, branch: Branch::Plus }
    }

    pub fn minus(lambda: f64) -> Self {
        Self { lambda, branch: Branch::Minus }
    }
}

/// A unit 3-vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitVector3 {
    e: [f64; 3],
}

impl UnitVector3 {
    /// Normalizes `v`; fails for the zero vector.
    pub fn new(v: [f64; 3]) -> Result<Self> {
        let n = norm3(v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Validation(format!("cannot normalize {v:?}")));
        }
        Ok(Self { e: v.map(|c| c / n) })
    }

    pub fn get(&self) -> [f64; 3] {
        self.e
    }
}

/// A kernel value attached to a point pair and spectral parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSample {
    pub x: [f64; 3],
    pub y: [f64; 3],
    pub lambda: f64,
    pub value: Mat4,
}

/// Smooth even cutoff profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CutoffProfile {
    /// `1 - (10s³ - 15s⁴ + 6s⁵)` on the transition band, C² overall.
    #[default]
    QuinticSmoothstep,
}

/// Even cutoff `χ` with plateau `|λ| ≤ λ₀/2` and support `|λ| ≤ λ₀`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub lambda0: f64,
    #[serde(default)]
    pub profile: CutoffProfile,
}

impl Default for CutoffSpec {
    fn default() -> Self {
        Self { lambda0: 0.5, profile: CutoffProfile::QuinticSmoothstep }
    }
}

impl CutoffSpec {
    pub fn new(lambda0: f64) -> Result<Self> {
        if !(lambda0 > 0.0 && lambda0.is_finite()) {
            return Err(Error::Validation(format!("cutoff radius must be positive, got {lambda0}")));
        }
        Ok(Self { lambda0, profile: CutoffProfile::QuinticSmoothstep })
    }

    fn band(&self, lambda: f64) -> f64 {
        let half = 0.5 * self.lambda0;
        ((lambda.abs() - half) / half).clamp(0.0, 1.0)
    }

    /// `χ(λ)`.
    pub fn chi(&self, lambda: f64) -> f64 {
        let s = self.band(lambda);
        1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }

    /// `χ'(λ)`.
    pub fn chi_d1(&self, lambda: f64) -> f64 {
        let s = self.band(lambda);
        let half = 0.5 * self.lambda0;
        -30.0 * s * s * (1.0 - s) * (1.0 - s) * lambda.signum() / half
    }

    /// `χ''(λ)`.
    pub fn chi_d2(&self, lambda: f64) -> f64 {
        let s = self.band(lambda);
        let half = 0.5 * self.lambda0;
        -60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (half * half)
    }
}

/// Distance and `α·e` for the displacement `d = x - y`.
fn geometry(d: [f64; 3]) -> Option<(f64, Mat4)> {
    let r = norm3(d);
    if r == 0.0 {
        return None;
    }
    Some((r, alpha_dot(d.map(|c| c / r))))
}

fn displacement(x: [f64; 3], y: [f64; 3]) -> Result<[f64; 3]> {
    let d = sub3(x, y);
    if d == [0.0; 3] {
        return Err(Error::CoincidentPoints { x });
    }
    Ok(d)
}

/// `R0±(λ)` and its first two λ-derivatives as a function of the displacement `x - y`.
///
/// `order` selects the derivative (0, 1 or 2). Returns `None` at zero displacement.
pub fn resolvent_free_disp(lambda: f64, branch: Branch, d: [f64; 3], order: u8) -> Option<Mat4> {
    let (r, a) = geometry(d)?;
    let s = branch.sign();
    let isr = I * (s * r);
    let phase = (isr * lambda).exp() / (4.0 * PI * r);
    let sa_plus_i = a.scale_re(s) + Mat4::identity();
    let p = sa_plus_i.scale_re(lambda) + a.scale(I / r);
    let body = match order {
        0 => p,
        1 => p.scale(isr) + sa_plus_i,
        2 => p.scale(isr * isr) + sa_plus_i.scale(isr * 2.0),
        _ => panic!("derivative order {order} not supported"),
    };
    Some(body.scale(phase))
}

/// Free limiting resolvent kernel `R0±(λ)(x, y)`.
pub fn resolvent_free(p: SpectralPoint, x: [f64; 3], y: [f64; 3]) -> Result<Mat4> {
    let d = displacement(x, y)?;
    Ok(resolvent_free_disp(p.lambda, p.branch, d, 0).expect("nonzero displacement"))
}

/// λ-derivative of order 1 or 2 of `R0±(λ)(x, y)`.
pub fn resolvent_free_dlambda(p: SpectralPoint, x: [f64; 3], y: [f64; 3], order: u8) -> Result<Mat4> {
    if !(1..=2).contains(&order) {
        return Err(Error::Validation(format!("derivative order must be 1 or 2, got {order}")));
    }
    let d = displacement(x, y)?;
    Ok(resolvent_free_disp(p.lambda, p.branch, d, order).expect("nonzero displacement"))
}

/// Zero-energy expansion kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GTerms {
    pub g0: Mat4,
    pub g1: Mat4,
    pub g2_plus: Mat4,
    pub g2_minus: Mat4,
}

impl GTerms {
    pub fn g2(&self, branch: Branch) -> Mat4 {
        match branch {
            Branch::Plus => self.g2_plus,
            Branch::Minus => self.g2_minus,
        }
    }
}

/// `G0`, `G1`, `G2±` as a function of the displacement.
pub fn g_terms_disp(d: [f64; 3]) -> Option<GTerms> {
    let (r, a) = geometry(d)?;
    let id = Mat4::identity();
    let half_a = a.scale_re(1.0 / (8.0 * PI));
    Some(GTerms {
        g0: a.scale(I / r).scale_re(1.0 / (4.0 * PI * r)),
        g1: id.scale_re(1.0 / (4.0 * PI * r)),
        g2_plus: id.scale_re(1.0 / (4.0 * PI)) + half_a,
        g2_minus: id.scale_re(-1.0 / (4.0 * PI)) + half_a,
    })
}

/// `G0`, `G1`, `G2±` at `(x, y)`.
pub fn g_terms(x: [f64; 3], y: [f64; 3]) -> Result<GTerms> {
    let d = displacement(x, y)?;
    Ok(g_terms_disp(d).expect("nonzero displacement"))
}

/// `G0(x, y) = iα·e/(4π|x-y|²)` by displacement.
///
/// The arithmetic follows [`resolvent_free_disp`] so that `R0±(0)` and `G0` agree bitwise.
pub fn g0_disp(d: [f64; 3]) -> Option<Mat4> {
    let (r, a) = geometry(d)?;
    Some(a.scale(I / r).scale_re(1.0 / (4.0 * PI * r)))
}

/// `G1(x, y) = I/(4π|x-y|)` by displacement.
pub fn g1_disp(d: [f64; 3]) -> Option<Mat4> {
    let r = norm3(d);
    (r > 0.0).then(|| Mat4::identity().scale_re(1.0 / (4.0 * PI * r)))
}

/// Remainder after subtracting the zero-energy expansion.
///
/// Order 1 gives `E1± = R0± - G0 - λG1`; order 2 gives `E2± = E1± - iλ²G2±`.
pub fn expansion_error(order: u8, p: SpectralPoint, x: [f64; 3], y: [f64; 3]) -> Result<Mat4> {
    let d = displacement(x, y)?;
    expansion_error_disp(order, p, d).ok_or_else(|| Error::Validation(format!("expansion order must be 1 or 2, got {order}")))
}

/// [`expansion_error`] by displacement; `None` for an unsupported order.
pub fn expansion_error_disp(order: u8, p: SpectralPoint, d: [f64; 3]) -> Option<Mat4> {
    let g = g_terms_disp(d)?;
    let r0 = resolvent_free_disp(p.lambda, p.branch, d, 0)?;
    let e1 = r0 - g.g0 - g.g1.scale_re(p.lambda);
    match order {
        1 => Some(e1),
        2 => Some(e1 - g.g2(p.branch).scale(I * p.lambda * p.lambda)),
        _ => None,
    }
}

/// `cos x - sin(x)/x`, accurate near zero.
pub(crate) fn cos_minus_sinc(x: f64) -> f64 {
    if x.abs() < 0.1 {
        let x2 = x * x;
        // Σ (-1)^n 2n x^{2n} / (2n+1)! for n = 1..5.
        x2 * (-1.0 / 3.0 + x2 * (1.0 / 30.0 + x2 * (-1.0 / 840.0 + x2 * (1.0 / 45360.0 - x2 / 3991680.0))))
    } else {
        x.cos() - x.sin() / x
    }
}

/// Free spectral density `μ(λ) = R0⁺(λ) - R0⁻(λ)` by displacement, with derivatives.
///
/// ```text
/// μ   = [A(λr cos λr - sin λr)/r + iλ sin(λr)] / (2πr)
/// ∂μ  = [-Aλ sin λr + i(sin(λr)/r + λ cos λr)] / (2π)
/// ∂²μ = [-A(sin λr + λr cos λr) + i(2cos λr - λr sin λr)] / (2π)
/// ```
pub fn spectral_density_free_disp(lambda: f64, d: [f64; 3], order: u8) -> Option<Mat4> {
    let (r, a) = geometry(d)?;
    let x = lambda * r;
    let (sa, si) = match order {
        0 => (lambda * cos_minus_sinc(x) / (2.0 * PI * r), lambda * x.sin() / (2.0 * PI * r)),
        1 => (-lambda * x.sin() / (2.0 * PI), (x.sin() / r + lambda * x.cos()) / (2.0 * PI)),
        2 => (-(x.sin() + x * x.cos()) / (2.0 * PI), (2.0 * x.cos() - x * x.sin()) / (2.0 * PI)),
        _ => panic!("derivative order {order} not supported"),
    };
    Some(a.scale_re(sa) + Mat4::identity().scale(I * si))
}

/// Free spectral density `μ(λ, x, y)`.
pub fn spectral_density_free(lambda: f64, x: [f64; 3], y: [f64; 3]) -> Result<Mat4> {
    let d = displacement(x, y)?;
    Ok(spectral_density_free_disp(lambda, d, 0).expect("nonzero displacement"))
}

/// λ-derivative of order 1 or 2 of `μ(λ, x, y)`.
pub fn spectral_density_free_dlambda(lambda: f64, x: [f64; 3], y: [f64; 3], order: u8) -> Result<Mat4> {
    if !(1..=2).contains(&order) {
        return Err(Error::Validation(format!("derivative order must be 1 or 2, got {order}")));
    }
    let d = displacement(x, y)?;
    Ok(spectral_density_free_disp(lambda, d, order).expect("nonzero displacement"))
}

/// `μ₁(λ) = χ(λ) μ(λ)/λ`, evaluated without division so that `λ = 0` is regular.
pub fn mu1(lambda: f64, x: [f64; 3], y: [f64; 3], chi: &CutoffSpec) -> Result<Mat4> {
    let d = displacement(x, y)?;
    let (r, a) = geometry(d).expect("nonzero displacement");
    let z = lambda * r;
    let m = a.scale_re(cos_minus_sinc(z)) + Mat4::identity().scale(I * z.sin());
    Ok(m.scale_re(chi.chi(lambda) / (2.0 * PI * r)))
}

/// Low/high energy split `R_L = χ(λr) R0±`, `R_H = (1 - χ(λr)) R0±`.
pub fn split_low_high(p: SpectralPoint, x: [f64; 3], y: [f64; 3], chi: &CutoffSpec) -> Result<(Mat4, Mat4)> {
    let d = displacement(x, y)?;
    let r = norm3(d);
    let r0 = resolvent_free_disp(p.lambda, p.branch, d, 0).expect("nonzero displacement");
    let c = chi.chi(p.lambda * r);
    Ok((r0.scale_re(c), r0.scale_re(1.0 - c)))
}

/// λ-derivative of the high-energy part `R_H`.
pub fn split_high_dlambda(p: SpectralPoint, x: [f64; 3], y: [f64; 3], chi: &CutoffSpec) -> Result<Mat4> {
    let d = displacement(x, y)?;
    let r = norm3(d);
    let r0 = resolvent_free_disp(p.lambda, p.branch, d, 0).expect("nonzero displacement");
    let r1 = resolvent_free_disp(p.lambda, p.branch, d, 1).expect("nonzero displacement");
    let z = p.lambda * r;
    Ok(r1.scale_re(1.0 - chi.chi(z)) - r0.scale_re(r * chi.chi_d1(z)))
}

/// Outcome of fitting one constant `C` in `value ≤ C · bound` over a sample set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundFit {
    /// Smallest `C` with `value ≤ C · bound` at every sample.
    pub constant: f64,
    /// Number of samples used.
    pub samples: usize,
    /// Samples where the bound vanished but the value did not.
    pub violations: usize,
}

impl BoundFit {
    /// True when a finite constant covers every sample.
    pub fn holds(&self) -> bool {
        self.violations == 0 && self.constant.is_finite()
    }
}

/// Fits the smallest constant `C` with `value ≤ C · bound` over `(value, bound)` pairs.
///
/// Pairs whose bound is zero must have a value below `zero_tol`, otherwise they are
/// counted as violations.
pub fn fit_bound_constant(pairs: impl IntoIterator<Item = (f64, f64)>, zero_tol: f64) -> BoundFit {
    let mut constant = 0.0_f64;
    let mut samples = 0;
    let mut violations = 0;
    for (value, bound) in pairs {
        samples += 1;
        if bound > 0.0 {
            constant = constant.max(value / bound);
        } else if value > zero_tol {
            violations += 1;
        }
    }
    BoundFit { constant, samples, violations }
}
