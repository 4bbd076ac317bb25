use std::sync::OnceLock;

use dirac_disperse::grid::{build_grid, GridScheme, SpatialGrid};
use dirac_disperse::kernels::SpectralPoint;
use dirac_disperse::linalg::{hermiticity_defect, rel_diff};
use dirac_disperse::potential::{sample_potential, FactorizedPotential, PotentialFamily};
use dirac_disperse::resolvent::{assemble_m, invert_m_with, spectral_density, InversionRoute};
use dirac_disperse::threshold::{
    classify_threshold, coupling_scan, coupling_scan_with, project_p0, Classification, ThresholdReport,
    BISECTION_REL_WIDTH, DEFAULT_TOL,
};
use dirac_disperse::Error;
use faer::Mat;

struct Critical {
    grid: SpatialGrid,
    pot: FactorizedPotential,
    report: ThresholdReport,
    g_star: f64,
}

fn small_grid() -> SpatialGrid {
    build_grid(GridScheme::UniformTensor, 6, 2.0).unwrap()
}

fn critical() -> &'static Critical {
    static CELL: OnceLock<Critical> = OnceLock::new();
    CELL.get_or_init(|| {
        let grid = small_grid();
        let scan = coupling_scan(&PotentialFamily::gaussian_well(0.0), &grid, (0.0, 10.0), 11).unwrap();
        let family = scan.critical_family().expect("the well binds a zero mode below depth 10");
        let pot = sample_potential(&family, &grid).unwrap();
        let report = classify_threshold(&pot, &grid, DEFAULT_TOL).unwrap();
        Critical { g_star: scan.critical_coupling().unwrap(), grid, pot, report }
    })
}

#[test]
fn zero_potential_gives_the_identity_block() {
    let grid = small_grid();
    let pot = sample_potential(&PotentialFamily::zero(), &grid).unwrap();
    let report = classify_threshold(&pot, &grid, DEFAULT_TOL).unwrap();
    assert_eq!(report.classification, Classification::Regular);
    assert!((report.sigma_min() - 1.0).abs() < 1e-12);
    let order = report.t0.order();
    assert!(rel_diff(report.t0.matrix.as_ref(), Mat::identity(order, order).as_ref()) < 1e-14);
    assert!(matches!(project_p0(&report, &grid), Err(Error::RegularThreshold)));
}

#[test]
fn shallow_well_is_regular() {
    let grid = small_grid();
    let pot = sample_potential(&PotentialFamily::gaussian_well(1.0), &grid).unwrap();
    let report = classify_threshold(&pot, &grid, DEFAULT_TOL).unwrap();
    assert!(report.is_regular());
    assert!(report.sigma_min() > 10.0 * DEFAULT_TOL);
    assert!(report.d2().is_none());
}

#[test]
fn scan_starts_at_unit_singular_value_and_brackets_tightly() {
    let grid = small_grid();
    let scan = coupling_scan(&PotentialFamily::gaussian_well(0.0), &grid, (0.0, 10.0), 11).unwrap();
    assert!((scan.min_singular[0] - 1.0).abs() < 1e-12);
    let [a, b] = scan.critical_g.unwrap();
    assert!(b - a <= BISECTION_REL_WIDTH * b * 1.0001);
    let g = scan.critical_coupling().unwrap();
    assert!((g - critical().g_star).abs() < 1e-12);
}

#[test]
fn critical_well_has_a_zero_eigenvalue() {
    let c = critical();
    assert_eq!(c.report.classification, Classification::Eigenvalue);
    assert!(c.report.rank() >= 1);
    assert_eq!(c.report.kernel_basis.len(), c.report.rank());
    assert!(c.report.sigma_min() <= DEFAULT_TOL * c.report.sigma_max);
}

#[test]
fn kernel_projection_and_reduced_inverse_are_consistent() {
    let r = &critical().report;
    let s1 = r.s1().matrix;
    let d1 = &r.d1.matrix;
    assert!(rel_diff((&s1 * &s1).as_ref(), s1.as_ref()) < 1e-10);
    assert!(hermiticity_defect(s1.as_ref()) < 1e-12);
    assert!(rel_diff((&s1 * d1).as_ref(), s1.as_ref()) < 1e-8);
    assert!(rel_diff((d1 * &s1).as_ref(), s1.as_ref()) < 1e-8);
    let d2 = r.d2().expect("eigenvalue reports carry D2").matrix;
    assert!(hermiticity_defect(d2.as_ref()) <= 1e-8 * d2.norm_l2());
}

#[test]
fn reconstructed_eigenfunctions_pass_their_checks() {
    let r = &critical().report;
    assert_eq!(r.eigenfunctions.len(), r.rank());
    for check in &r.checks {
        assert!(check.norm > 0.0);
        assert!(check.round_trip <= 5.0 * r.tol, "round trip {}", check.round_trip);
        assert!(check.shell_fraction < 0.5, "shell fraction {}", check.shell_fraction);
    }
}

#[test]
fn g0_g1_identity_holds_with_nonnegative_sides() {
    let r = &critical().report;
    assert_eq!(r.identity.len(), r.rank());
    for check in &r.identity {
        assert!(check.lhs >= 0.0);
        assert!(check.rhs >= 0.0);
        assert!(check.relative_error <= 0.1, "identity error {}", check.relative_error);
        assert!(check.relative_error_negated > 1.0);
    }
}

#[test]
fn p0_is_a_projection_of_kernel_rank() {
    let c = critical();
    let p0 = project_p0(&c.report, &c.grid).unwrap();
    assert_eq!(p0.rank, c.report.rank());
    assert!(p0.idempotency_defect <= 0.1, "idempotency {}", p0.idempotency_defect);
    assert!(hermiticity_defect(p0.operator.matrix.as_ref()) <= 1e-10 * p0.operator.matrix.norm_l2());
}

#[test]
fn zero_energy_is_excluded_in_the_eigenvalue_case() {
    let c = critical();
    let m = assemble_m(&c.pot, &c.grid, SpectralPoint::plus(0.0)).unwrap();
    assert!(matches!(invert_m_with(m, &c.report, InversionRoute::JensenNenciu), Err(Error::ZeroEnergyExcluded)));
    let xs = [[0.3, 0.0, 0.0]];
    assert!(matches!(spectral_density(&c.pot, &c.grid, &c.report, 0.0, &xs, &xs), Err(Error::ZeroEnergyExcluded)));
}

#[test]
fn jensen_nenciu_matches_tikhonov_near_threshold() {
    let c = critical();
    let m = assemble_m(&c.pot, &c.grid, SpectralPoint::plus(0.1)).unwrap();
    let jn = invert_m_with(m.clone(), &c.report, InversionRoute::JensenNenciu).unwrap();
    let tk = invert_m_with(m, &c.report, InversionRoute::Tikhonov { epsilon: 1e-12 }).unwrap();
    let (a, b) = (jn.inverse.unwrap().matrix, tk.inverse.unwrap().matrix);
    assert!(rel_diff(a.as_ref(), b.as_ref()) <= 1e-6);
}

#[test]
fn leading_singularity_of_the_inverse_is_d2() {
    let c = critical();
    let d2 = c.report.d2().unwrap().matrix;
    let ratios: Vec<f64> = (4..=8)
        .map(|k| {
            let lambda = 0.5f64.powi(k);
            let m = assemble_m(&c.pot, &c.grid, SpectralPoint::plus(lambda)).unwrap();
            let inv = invert_m_with(m, &c.report, InversionRoute::JensenNenciu).unwrap().inverse.unwrap().matrix;
            let scaled = &inv * faer::Scale(faer::c64::new(lambda, 0.0));
            rel_diff(scaled.as_ref(), d2.as_ref())
        })
        .collect();
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
    assert!(*ratios.last().unwrap() <= 0.1, "{ratios:?}");
}

#[test]
fn density_stays_bounded_approaching_the_threshold() {
    let c = critical();
    let xs = [[0.5, 0.0, 0.0], [0.0, 0.25, -0.5]];
    let norms: Vec<f64> = (1..=8)
        .map(|k| spectral_density(&c.pot, &c.grid, &c.report, 0.5f64.powi(k), &xs, &xs).unwrap().max_abs())
        .collect();
    let first = norms[0];
    assert!(norms.iter().all(|n| n.is_finite() && *n <= 10.0 * first), "{norms:?}");
}

#[test]
fn critical_coupling_and_shell_mass_converge_under_refinement() {
    let family = PotentialFamily::gaussian_well(0.0);
    let grid8 = build_grid(GridScheme::UniformTensor, 8, 2.0).unwrap();
    let grid10 = build_grid(GridScheme::UniformTensor, 10, 2.0).unwrap();
    let scan8 = coupling_scan_with(&family, &grid8, (3.0, 7.0), 3, DEFAULT_TOL, BISECTION_REL_WIDTH).unwrap();
    let scan10 = coupling_scan_with(&family, &grid10, (3.0, 7.0), 3, DEFAULT_TOL, 1e-4).unwrap();
    let (g8, g10) = (scan8.critical_coupling().unwrap(), scan10.critical_coupling().unwrap());
    assert!((g8 - g10).abs() / g8 < 0.05, "g*(8) = {g8}, g*(10) = {g10}");

    let pot8 = sample_potential(&scan8.critical_family().unwrap(), &grid8).unwrap();
    let report8 = classify_threshold(&pot8, &grid8, DEFAULT_TOL).unwrap();
    assert!(!report8.is_regular());
    let coarse = critical().report.checks[0].shell_fraction;
    for check in &report8.checks {
        assert!(check.shell_fraction < 0.2, "shell fraction {}", check.shell_fraction);
        assert!(check.shell_fraction < coarse);
    }
    for check in &report8.identity {
        assert!(check.relative_error <= 0.05, "identity error {}", check.relative_error);
    }
}
