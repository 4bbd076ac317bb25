//! Command-line driver: configuration, orchestration of the pipeline and output files.
//!
//! A run is described by an [`ExperimentConfig`] assembled from an optional preset,
//! an optional JSON document and flag overrides, in that order. Every JSON output
//! carries the config verbatim together with its hash, every CSV row carries the
//! hash, and floats in results are rounded to 12 significant digits so that equal
//! configs produce byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::algebra::{sub3, Mat4, C64, ZERO};
use crate::error::Error;
use crate::evolution::{
    build_density_cache_in, check_span, decay_curve, free_density, free_propagator_oracle_padded, relative_l2_mismatch,
    stone_evolve_field, stone_sweep, DecayCurve, DensityCache, EvolutionConfig, EvolutionMode, SampleDesign,
};
use crate::grid::{build_grid, GridScheme, SpatialGrid, SpinorField};
use crate::io::{hash_json, round_json, round_sig};
use crate::potential::{sample_potential, verify_decay, DecayCheck, FactorizedPotential, FamilyKind, PotentialFamily};
use crate::resolvent::spectral_density;
use crate::threshold::{
    classify_threshold, coupling_scan, Classification, CouplingScanResult, ThresholdReport, ThresholdSummary, DEFAULT_TOL,
};

/// Exit status for I/O failures.
pub const EXIT_IO: i32 = 1;
/// Exit status for invalid configuration or input.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;

/// Spatial grid parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub scheme: GridScheme,
    pub n: usize,
    pub box_radius: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { scheme: GridScheme::UniformTensor, n: 8, box_radius: 2.0 }
    }
}

/// Potential family parameters; the seed lives on [`ExperimentConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialSpec {
    pub family: FamilyKind,
    pub g: f64,
    pub delta: f64,
}

impl Default for PotentialSpec {
    fn default() -> Self {
        Self { family: FamilyKind::Zero, g: 0.0, delta: 6.0 }
    }
}

/// Coupling scan range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSpec {
    pub g_min: f64,
    pub g_max: f64,
    pub steps: usize,
    /// Replace the configured coupling by the bisected critical coupling.
    pub use_critical: bool,
}

impl Default for ScanSpec {
    fn default() -> Self {
        Self { g_min: 0.0, g_max: 20.0, steps: 21, use_critical: false }
    }
}

/// Points and energies of a density dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySpec {
    pub lambdas: Vec<f64>,
    pub xs: Vec<[f64; 3]>,
    pub ys: Vec<[f64; 3]>,
}

impl Default for DensitySpec {
    fn default() -> Self {
        Self {
            lambdas: (0..=10).map(|k| 0.5 * 0.5f64.powi(k)).collect(),
            xs: vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.5]],
            ys: vec![[0.25, 0.25, 0.25]],
        }
    }
}

/// Test field and times of the oracle comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    /// Width of the Gaussian test spinor `e^{-|x|²/(2σ²)}`.
    pub sigma: f64,
    /// Zero-padding factor of the Fourier route.
    pub pad: usize,
    pub times: Vec<f64>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self { sigma: 1.2, pad: 2, times: vec![0.0, 1.0, 2.0, 4.0] }
    }
}

/// Everything that determines the numbers a command produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub potential: PotentialSpec,
    /// Seed of the random potential family and of the random design points.
    pub seed: u64,
    /// Kernel detection tolerance of the threshold classification.
    pub tol: f64,
    pub scan: Option<ScanSpec>,
    pub evolution: EvolutionConfig,
    /// Weight exponents of the decay curves; empty means `evolution.gamma`.
    pub gammas: Vec<f64>,
    pub density: DensitySpec,
    pub oracle: OracleSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            potential: PotentialSpec::default(),
            seed: 0,
            tol: DEFAULT_TOL,
            scan: None,
            evolution: EvolutionConfig::default(),
            gammas: Vec::new(),
            density: DensitySpec::default(),
            oracle: OracleSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn family(&self) -> crate::Result<PotentialFamily> {
        PotentialFamily::new(self.potential.family, self.potential.g, self.potential.delta, self.seed)
    }

    pub fn build_grid(&self) -> crate::Result<SpatialGrid> {
        build_grid(self.grid.scheme, self.grid.n, self.grid.box_radius)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Checks every field without building any operator.
    pub fn validate(&self) -> crate::Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.grid.n < 2 || !(self.grid.box_radius > 0.0 && self.grid.box_radius.is_finite()) {
            return fail(format!("invalid grid n = {}, box_radius = {}", self.grid.n, self.grid.box_radius));
        }
        self.family()?;
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return fail(format!("tol must lie in (0, 1), got {}", self.tol));
        }
        if let Some(s) = &self.scan {
            if !(s.g_min.is_finite() && s.g_max.is_finite() && s.g_min < s.g_max) || s.steps < 2 {
                return fail(format!("invalid scan range [{}, {}] with {} steps", s.g_min, s.g_max, s.steps));
            }
        }
        self.evolution.validate()?;
        if let Some(g) = self.gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return fail(format!("gamma must lie in [0, 1], got {g}"));
        }
        let d = &self.density;
        if d.lambdas.is_empty() || d.xs.is_empty() || d.ys.is_empty() {
            return fail("density needs at least one energy and one point on each side".into());
        }
        if d.lambdas.iter().any(|l| !l.is_finite()) || d.xs.iter().chain(&d.ys).flatten().any(|c| !c.is_finite()) {
            return fail("density energies and points must be finite".into());
        }
        let o = &self.oracle;
        if !(o.sigma > 0.0 && o.sigma.is_finite()) || o.pad == 0 {
            return fail(format!("invalid oracle field sigma = {}, pad = {}", o.sigma, o.pad));
        }
        if o.times.is_empty() || o.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return fail("oracle times must be finite and non-negative".into());
        }
        Ok(())
    }

    fn gammas(&self) -> Vec<f64> {
        if self.gammas.is_empty() {
            vec![self.evolution.gamma]
        } else {
            self.gammas.clone()
        }
    }
}

/// Built-in configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// `V ≡ 0` on `N = 16`, `R = 6`, weights `γ ∈ {0, ½, 1}`.
    FreeDecay,
    /// Isotropic `δ = 6` potential at `g = 2` on `N = 8`, `R = 2`.
    RegularDecay,
    /// Gaussian well at its first critical depth on `N = 8`, `R = 2`.
    EigenvalueDecay,
    /// Coupling scan of the Gaussian well over `g ∈ [0, 20]`.
    GaussianScan,
    /// Free Stone quadrature against the Fourier multiplier on `N = 16`, `R = 6`.
    Oracle,
}

impl Preset {
    pub fn config(self) -> ExperimentConfig {
        let base = ExperimentConfig::default();
        match self {
            Preset::FreeDecay => ExperimentConfig {
                grid: GridSpec { n: 16, box_radius: 6.0, ..GridSpec::default() },
                gammas: vec![0.0, 0.5, 1.0],
                ..base
            },
            Preset::RegularDecay => ExperimentConfig {
                potential: PotentialSpec { family: FamilyKind::IsotropicScalar, g: 2.0, delta: 6.0 },
                gammas: vec![0.0, 0.5, 1.0],
                ..base
            },
            Preset::EigenvalueDecay => ExperimentConfig {
                potential: PotentialSpec { family: FamilyKind::GaussianWell, g: 0.0, delta: 6.0 },
                scan: Some(ScanSpec { g_min: 0.0, g_max: 10.0, steps: 11, use_critical: true }),
                gammas: vec![0.0, 0.4],
                ..base
            },
            Preset::GaussianScan => ExperimentConfig {
                potential: PotentialSpec { family: FamilyKind::GaussianWell, g: 0.0, delta: 6.0 },
                scan: Some(ScanSpec::default()),
                ..base
            },
            Preset::Oracle => ExperimentConfig {
                grid: GridSpec { n: 16, box_radius: 6.0, ..GridSpec::default() },
                evolution: EvolutionConfig { mode: EvolutionMode::FullRange, n_lambda: 500, ..EvolutionConfig::default() },
                ..base
            },
        }
    }
}

/// Reproducible experiments for the massless Dirac operator `H = -iα·∇ + V`.
#[derive(Debug, Parser)]
#[command(name = "dirac-disperse", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify zero energy and write the threshold report and field files.
    Classify(RunArgs),
    /// Scan the coupling and bracket the first critical coupling.
    Scan(RunArgs),
    /// Dump the spectral density on a list of energies and point pairs.
    Density(RunArgs),
    /// Measure dispersive decay curves and fitted exponents.
    Decay(RunArgs),
    /// Compare the free Stone quadrature with the Fourier multiplier.
    OracleCompare(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Classify(_) => "classify",
            Command::Scan(_) => "scan",
            Command::Density(_) => "density",
            Command::Decay(_) => "decay",
            Command::OracleCompare(_) => "oracle-compare",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Classify(a) | Command::Scan(a) | Command::Density(a) | Command::Decay(a) | Command::OracleCompare(a) => a,
        }
    }
}

/// Flags shared by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON config; its fields override the preset.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Built-in base configuration.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Grid points per axis.
    #[arg(long)]
    pub n: Option<usize>,
    /// Half-width of the computational box.
    #[arg(long = "box", value_name = "R")]
    pub box_radius: Option<f64>,
    /// Potential family (zero, isotropic-scalar, diagonal-signature, off-diagonal-coupling, random-hermitian, gaussian-well).
    #[arg(long, value_parser = parse_family)]
    pub family: Option<FamilyKind>,
    /// Envelope decay exponent.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Weight exponent; repeat for several curves.
    #[arg(long = "gamma", action = clap::ArgAction::Append)]
    pub gamma: Vec<f64>,
    /// Coupling.
    #[arg(long)]
    pub g: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Low-energy cutoff radius.
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// Smoothing exponent of the full-range weight.
    #[arg(long)]
    pub s: Option<f64>,
    /// Worker threads (default: available cores).
    #[arg(long, env = "DIRAC_DISPERSE_THREADS")]
    pub threads: Option<usize>,
    /// Threshold report written by `classify` for the same potential and grid.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Directory for reusable density-cache nodes.
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
}

fn parse_family(s: &str) -> Result<FamilyKind, String> {
    serde_json::from_value(Value::String(s.to_owned())).map_err(|_| format!("unknown potential family `{s}`"))
}

/// Failure of a command, carrying its exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Library(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Library(e) => match e {
                Error::Validation(_)
                | Error::ZeroEnergyExcluded
                | Error::RegularThreshold
                | Error::CoincidentPoints { .. }
                | Error::Json(_) => EXIT_VALIDATION,
                Error::Io(_) | Error::Csv(_) => EXIT_IO,
                Error::Singular { .. } | Error::NonHermitian { .. } | Error::Resolution { .. } | Error::Assembly { .. } => {
                    EXIT_NUMERICAL
                }
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_VALIDATION => "validation",
            EXIT_NUMERICAL => "numerical",
            _ => "io",
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Overlays `top` onto `base`, recursing into objects.
fn merge_json(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, t) => *slot = t,
    }
}

/// Preset, then JSON file, then flags; validated.
pub fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let base = args.preset.map(Preset::config).unwrap_or_default();
    let mut cfg = match &args.config {
        None => base,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
            let top: Value =
                serde_json::from_str(&text).map_err(|e| invalid(format!("malformed config {}: {e}", path.display())))?;
            let mut merged = serde_json::to_value(&base).map_err(Error::from)?;
            merge_json(&mut merged, top);
            serde_json::from_value(merged).map_err(|e| invalid(format!("invalid config {}: {e}", path.display())))?
        }
    };
    if let Some(n) = args.n {
        cfg.grid.n = n;
    }
    if let Some(r) = args.box_radius {
        cfg.grid.box_radius = r;
    }
    if let Some(f) = args.family {
        cfg.potential.family = f;
    }
    if let Some(d) = args.delta {
        cfg.potential.delta = d;
    }
    if let Some(g) = args.g {
        cfg.potential.g = g;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(l) = args.lambda0 {
        cfg.evolution.chi.lambda0 = l;
    }
    if let Some(s) = args.s {
        cfg.evolution.s = s;
    }
    if !args.gamma.is_empty() {
        cfg.gammas = args.gamma.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes output files tagged with the config and its hash.
struct Output {
    dir: PathBuf,
    config: Value,
    hash: String,
    files: Vec<PathBuf>,
}

impl Output {
    fn new(dir: &Path, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(Error::from)?;
        Ok(Self { dir: dir.to_path_buf(), config: serde_json::to_value(cfg).map_err(Error::from)?, hash: cfg.hash(), files: Vec::new() })
    }

    fn json<T: Serialize>(&mut self, name: &str, command: &str, result: &T) -> Result<(), CliError> {
        let mut result = serde_json::to_value(result).map_err(Error::from)?;
        round_json(&mut result, 12);
        let mut doc = Map::new();
        doc.insert("command".into(), Value::String(command.into()));
        doc.insert("config_hash".into(), Value::String(self.hash.clone()));
        doc.insert("config".into(), self.config.clone());
        doc.insert("result".into(), result);
        let mut text = serde_json::to_string_pretty(&Value::Object(doc)).map_err(Error::from)?;
        text.push('\n');
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(Error::from)?;
        self.files.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
        w.write_record(std::iter::once("config_hash").chain(header.iter().map(String::as_str))).map_err(Error::from)?;
        for row in rows {
            w.write_record(std::iter::once(self.hash.as_str()).chain(row.iter().map(String::as_str))).map_err(Error::from)?;
        }
        w.flush().map_err(Error::from)?;
        self.files.push(path);
        Ok(())
    }
}

fn num(x: f64) -> String {
    format!("{}", round_sig(x, 12))
}

/// Grid, potential and, when requested, the coupling scan that fixed it.
struct Setup {
    grid: SpatialGrid,
    family: PotentialFamily,
    pot: FactorizedPotential,
    scan: Option<CouplingScanResult>,
}

fn setup(cfg: &ExperimentConfig, run_scan: bool) -> Result<Setup, CliError> {
    let grid = cfg.build_grid()?;
    let mut family = cfg.family()?;
    let mut scan = None;
    if let Some(spec) = cfg.scan.filter(|s| run_scan || s.use_critical) {
        let start = Instant::now();
        let result = coupling_scan(&family, &grid, (spec.g_min, spec.g_max), spec.steps)?;
        log::info!("coupling scan finished in {:.1?}", start.elapsed());
        if spec.use_critical {
            family = result.critical_family().ok_or_else(|| {
                invalid(format!("no critical coupling in [{}, {}]; widen the scan range", spec.g_min, spec.g_max))
            })?;
        }
        scan = Some(result);
    }
    let pot = sample_potential(&family, &grid)?;
    Ok(Setup { grid, family, pot, scan })
}

/// `T₀ = I` for `V ≡ 0`, so the report is known without factorizing.
fn free_summary(tol: f64) -> ThresholdSummary {
    ThresholdSummary {
        classification: Classification::Regular,
        tol,
        sigma_max: 1.0,
        smallest_singular_values: vec![1.0],
        kernel_dimension: 0,
        eigenfunctions: Vec::new(),
        identity: Vec::new(),
        d2_hermiticity_defect: None,
        inconsistency: None,
    }
}

fn classify(cfg: &ExperimentConfig, s: &Setup) -> Result<(Option<ThresholdReport>, ThresholdSummary), CliError> {
    if s.pot.is_zero() {
        return Ok((None, free_summary(cfg.tol)));
    }
    let start = Instant::now();
    let report = classify_threshold(&s.pot, &s.grid, cfg.tol)?;
    log::info!("threshold classification finished in {:.1?}", start.elapsed());
    let summary = report.summary();
    Ok((Some(report), summary))
}

/// Checks that a stored report belongs to this potential and grid and agrees with the recomputed classification.
fn check_report(path: &Path, s: &Setup, summary: &ThresholdSummary) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read report {}: {e}", path.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("malformed report {}: {e}", path.display())))?;
    let field = |k: &str| doc["result"][k].as_str().map(str::to_owned);
    if field("potential_hash") != Some(s.pot.content_hash()) || field("grid_hash") != Some(s.grid.descriptor_hash()) {
        return Err(invalid(format!("report {} was computed for a different potential or grid", path.display())));
    }
    let stored: Classification = serde_json::from_value(doc["result"]["threshold"]["classification"].clone())
        .map_err(|e| invalid(format!("report {} has no classification: {e}", path.display())))?;
    if stored != summary.classification {
        return Err(CliError::Library(Error::Validation(format!(
            "report {} says {stored:?} but the recomputed classification is {:?}",
            path.display(),
            summary.classification
        ))));
    }
    Ok(())
}

#[derive(Serialize)]
struct ClassifyResult<'a> {
    family: PotentialFamily,
    potential_hash: String,
    grid_hash: String,
    decay: DecayCheck,
    threshold: &'a ThresholdSummary,
    scan: Option<&'a CouplingScanResult>,
}

#[derive(Serialize)]
struct ScanResult<'a> {
    family: PotentialFamily,
    grid_hash: String,
    critical_coupling: Option<f64>,
    scan: &'a CouplingScanResult,
}

#[derive(Serialize)]
struct DensityResult {
    family: PotentialFamily,
    potential_hash: String,
    grid_hash: String,
    classification: Classification,
    xs: Vec<[f64; 3]>,
    ys: Vec<[f64; 3]>,
    lambdas: Vec<f64>,
    /// Largest spectral norm over the pairs at each energy.
    max_norm: Vec<f64>,
}

#[derive(Serialize)]
struct DecayResult {
    family: PotentialFamily,
    potential_hash: String,
    grid_hash: String,
    threshold: ThresholdSummary,
    design: SampleDesign,
    lattice_nodes: usize,
    curves: Vec<DecayCurve>,
}

#[derive(Serialize)]
struct OracleRow {
    t: f64,
    mismatch: f64,
    oracle_norm: f64,
    stone_norm: f64,
}

#[derive(Serialize)]
struct OracleResult {
    sigma: f64,
    pad: usize,
    mode: EvolutionMode,
    rows: Vec<OracleRow>,
}

fn cmd_classify(cfg: &ExperimentConfig, args: &RunArgs) -> Result<Output, CliError> {
    let s = setup(cfg, true)?;
    let (report, summary) = classify(cfg, &s)?;
    let mut out = Output::new(&args.out, cfg)?;
    let result = ClassifyResult {
        family: s.family,
        potential_hash: s.pot.content_hash(),
        grid_hash: s.grid.descriptor_hash(),
        decay: verify_decay(&s.pot, &s.grid),
        threshold: &summary,
        scan: s.scan.as_ref(),
    };
    out.json("threshold.json", "classify", &result)?;
    if let Some(r) = &report {
        let dir = args.out.join("fields");
        fs::create_dir_all(&dir).map_err(Error::from)?;
        r.save_fields(&dir, &out.hash)?;
    }
    println!("classification: {:?}, sigma_min = {:.6e}", summary.classification, summary.smallest_singular_values[0]);
    Ok(out)
}

fn cmd_scan(cfg: &ExperimentConfig, args: &RunArgs) -> Result<Output, CliError> {
    let cfg = ExperimentConfig { scan: Some(cfg.scan.unwrap_or_default()), ..cfg.clone() };
    let s = setup(&cfg, true)?;
    let scan = s.scan.as_ref().expect("scan requested");
    let mut out = Output::new(&args.out, &cfg)?;
    let result = ScanResult {
        family: cfg.family()?,
        grid_hash: s.grid.descriptor_hash(),
        critical_coupling: scan.critical_coupling(),
        scan,
    };
    out.json("scan.json", "scan", &result)?;
    match scan.critical_g {
        Some([lo, hi]) => println!("critical coupling in [{lo:.9}, {hi:.9}]"),
        None => println!("no critical coupling in the scanned range"),
    }
    Ok(out)
}

fn cmd_density(cfg: &ExperimentConfig, args: &RunArgs) -> Result<Output, CliError> {
    let s = setup(cfg, false)?;
    let (report, summary) = classify(cfg, &s)?;
    match &args.report {
        Some(path) => check_report(path, &s, &summary)?,
        None if summary.classification != Classification::Regular => {
            return Err(invalid(
                "zero energy is not regular for this potential; run `classify` with the same config and pass its \
                 threshold.json with --report",
            ))
        }
        None => {}
    }
    let d = &cfg.density;
    if summary.classification != Classification::Regular && d.lambdas.contains(&0.0) {
        return Err(Error::ZeroEnergyExcluded.into());
    }
    let mut samples = Vec::with_capacity(d.lambdas.len());
    for &lambda in &d.lambdas {
        let kernel: Vec<Vec<Mat4>> = match &report {
            None => d.xs.iter().map(|x| d.ys.iter().map(|y| free_density(lambda, sub3(*x, *y))).collect()).collect(),
            Some(r) => spectral_density(&s.pot, &s.grid, r, lambda, &d.xs, &d.ys)?.kernel,
        };
        samples.push(kernel);
    }
    let mut out = Output::new(&args.out, cfg)?;
    let mut header: Vec<String> = ["lambda", "x_index", "y_index"].map(String::from).to_vec();
    for r in 0..4 {
        for c in 0..4 {
            header.push(format!("re_{r}{c}"));
            header.push(format!("im_{r}{c}"));
        }
    }
    let mut rows = Vec::new();
    let mut max_norm = Vec::new();
    for (lambda, kernel) in d.lambdas.iter().zip(&samples) {
        let mut worst = 0.0_f64;
        for (a, line) in kernel.iter().enumerate() {
            for (b, m) in line.iter().enumerate() {
                worst = worst.max(m.spectral_norm());
                let mut row = vec![num(*lambda), a.to_string(), b.to_string()];
                row.extend(m.to_floats().iter().map(|v| num(*v)));
                rows.push(row);
            }
        }
        max_norm.push(worst);
    }
    out.csv("density.csv", &header, &rows)?;
    let result = DensityResult {
        family: s.family,
        potential_hash: s.pot.content_hash(),
        grid_hash: s.grid.descriptor_hash(),
        classification: summary.classification,
        xs: d.xs.clone(),
        ys: d.ys.clone(),
        lambdas: d.lambdas.clone(),
        max_norm,
    };
    out.json("density.json", "density", &result)?;
    println!("density at {} energies on {} pairs", d.lambdas.len(), d.xs.len() * d.ys.len());
    Ok(out)
}

fn cmd_decay(cfg: &ExperimentConfig, args: &RunArgs) -> Result<Output, CliError> {
    check_span(&cfg.evolution.times)?;
    let s = setup(cfg, false)?;
    let (report, summary) = classify(cfg, &s)?;
    if let Some(path) = &args.report {
        check_report(path, &s, &summary)?;
    }
    let evo = &cfg.evolution;
    let design = SampleDesign::standard(&s.grid, cfg.seed);
    let lattice = evo.density_lattice();
    let start = Instant::now();
    let cache = match &report {
        None => DensityCache::free(&design.sources),
        Some(r) => build_density_cache_in(&s.pot, &s.grid, r, &lattice, &design.sources, args.cache_dir.as_deref())?,
    };
    log::info!("density cache with {} nodes ready in {:.1?}", cache.lambdas.len(), start.elapsed());
    let start = Instant::now();
    let sweep = stone_sweep(&cache, evo, &design.targets, &evo.times)?;
    log::info!("Stone sweep over {} pairs finished in {:.1?}", design.pairs(), start.elapsed());
    let curves = cfg.gammas().iter().map(|g| decay_curve(&sweep, *g, evo.fit_window)).collect::<crate::Result<Vec<_>>>()?;
    let mut out = Output::new(&args.out, cfg)?;
    let mut header = vec!["t".to_owned(), "unweighted".to_owned()];
    header.extend(curves.iter().map(|c| format!("weighted_gamma_{}", c.gamma)));
    let rows: Vec<Vec<String>> = evo
        .times
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut row = vec![num(*t), num(curves[0].unweighted[k])];
            row.extend(curves.iter().map(|c| num(c.values[k])));
            row
        })
        .collect();
    out.csv("decay.csv", &header, &rows)?;
    for c in &curves {
        println!("gamma = {}: fitted exponent {:.4} (residual {:.3})", c.gamma, c.fitted_exponent, c.fit_residual);
    }
    let result = DecayResult {
        family: s.family,
        potential_hash: s.pot.content_hash(),
        grid_hash: s.grid.descriptor_hash(),
        threshold: summary,
        design,
        lattice_nodes: cache.lambdas.len(),
        curves,
    };
    out.json("decay.json", "decay", &result)?;
    Ok(out)
}

/// Gaussian test spinor used by the oracle comparison.
pub fn oracle_field(grid: &SpatialGrid, sigma: f64) -> SpinorField {
    SpinorField::from_fn(grid, |x| {
        let g = (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / (2.0 * sigma * sigma)).exp();
        [C64::new(g, 0.0), C64::new(0.0, 0.5 * g), ZERO, C64::new(-0.25 * g, 0.0)]
    })
}

fn cmd_oracle(cfg: &ExperimentConfig, args: &RunArgs) -> Result<Output, CliError> {
    let s = setup(cfg, false)?;
    if !s.pot.is_zero() {
        return Err(invalid("oracle-compare needs V = 0; set the potential family to zero or g = 0"));
    }
    if s.grid.descriptor.scheme != GridScheme::UniformTensor {
        return Err(invalid("oracle-compare needs the uniform-tensor grid"));
    }
    let evo = EvolutionConfig { mode: EvolutionMode::FullRange, ..cfg.evolution.clone() };
    evo.validate()?;
    let o = &cfg.oracle;
    let field = oracle_field(&s.grid, o.sigma);
    let start = Instant::now();
    let stone = stone_evolve_field(&s.grid, &field, &evo, &o.times)?;
    log::info!("Stone evolution at {} times finished in {:.1?}", o.times.len(), start.elapsed());
    let mut rows = Vec::new();
    for (t, st) in o.times.iter().zip(&stone) {
        let oracle = free_propagator_oracle_padded(&s.grid, &field, *t, evo.s, o.pad)?;
        rows.push(OracleRow {
            t: *t,
            mismatch: relative_l2_mismatch(st, &oracle, &s.grid),
            oracle_norm: oracle.l2_norm(&s.grid),
            stone_norm: st.l2_norm(&s.grid),
        });
    }
    let mut out = Output::new(&args.out, cfg)?;
    for r in &rows {
        println!("t = {}: relative L2 mismatch {:.3e}", r.t, r.mismatch);
    }
    out.json("oracle.json", "oracle-compare", &OracleResult { sigma: o.sigma, pad: o.pad, mode: evo.mode, rows })?;
    Ok(out)
}

/// Runs a parsed command and returns the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let args = cli.command.args();
    let cfg = resolve_config(args)?;
    let threads = match args.threads {
        Some(0) => return Err(invalid("--threads must be positive")),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(format!("cannot start {threads} worker threads: {e}")))?;
    let out = pool.install(|| match &cli.command {
        Command::Classify(_) => cmd_classify(&cfg, args),
        Command::Scan(_) => cmd_scan(&cfg, args),
        Command::Density(_) => cmd_density(&cfg, args),
        Command::Decay(_) => cmd_decay(&cfg, args),
        Command::OracleCompare(_) => cmd_oracle(&cfg, args),
    })?;
    Ok(out.files)
}

/// Parses arguments, runs the command and reports failures on stderr as one JSON line.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            let line = serde_json::json!({
                "status": "error",
                "command": cli.command.name(),
                "kind": e.kind(),
                "exit_code": e.exit_code(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> RunArgs {
        RunArgs { out: PathBuf::from("out"), ..RunArgs::default() }
    }

    #[test]
    fn flags_override_config_file_which_overrides_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"grid": {"n": 12}, "potential": {"g": 3.0}}"#).unwrap();
        let a = RunArgs { preset: Some(Preset::RegularDecay), config: Some(path), g: Some(1.5), ..args() };
        let cfg = resolve_config(&a).unwrap();
        assert_eq!(cfg.grid.n, 12);
        assert_eq!(cfg.grid.box_radius, 2.0);
        assert_eq!(cfg.potential.family, FamilyKind::IsotropicScalar);
        assert_eq!(cfg.potential.g, 1.5);
        assert_eq!(cfg.gammas, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn malformed_and_unknown_fields_are_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in [("bad.json", "{\"grid\": "), ("unknown.json", r#"{"gird": {}}"#), ("range.json", r#"{"gammas": [2.0]}"#)] {
            let path = dir.path().join(name);
            fs::write(&path, body).unwrap();
            let err = resolve_config(&RunArgs { config: Some(path), ..args() }).unwrap_err();
            assert_eq!(err.exit_code(), EXIT_VALIDATION, "{name}");
        }
    }

    #[test]
    fn hash_survives_a_json_round_trip() {
        for p in [Preset::FreeDecay, Preset::RegularDecay, Preset::EigenvalueDecay, Preset::GaussianScan, Preset::Oracle] {
            let cfg = p.config();
            cfg.validate().unwrap();
            let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(back.hash(), cfg.hash());
        }
        assert_ne!(Preset::FreeDecay.config().hash(), Preset::Oracle.config().hash());
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::Singular { lambda: 0.0, sigma_min: 0.0 }).exit_code(), EXIT_NUMERICAL);
        assert_eq!(CliError::from(Error::Validation("x".into())).exit_code(), EXIT_VALIDATION);
        assert_eq!(CliError::from(Error::Io(std::io::Error::other("x"))).exit_code(), EXIT_IO);
        assert_eq!(invalid("x").exit_code(), EXIT_VALIDATION);
    }
}
