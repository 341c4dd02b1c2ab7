//! Command-line entry point: JSON config ingestion, run orchestration and
//! result files.
//!
//! Exit codes: 0 success, 1 config or I/O failure, 2 a checked invariant failed.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use nalgebra::Matrix2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cq_generator::{
    assemble, cnm_rule_violations, d_matrices, h_eff, ho_argument, ho_closed_forms, ho_closed_forms_exact,
    lindblad_ops, qcle_matrices, tradeoff_check, CnmTable, DMatrices, HeffOptions, TradeoffReport, CNM_MAX_ORDER,
};
use crate::cq_hamiltonian::{sample_points, CoupledOscillators, CqHamiltonian, ModelKind, ModelParams};
use crate::error::{CqError, Result};
use crate::evolvers::{
    convergence_study, evolve, observers_to_csv, EvolveOptions, Generator, GeneratorKind, GeneratorTag, ObserverRow,
    Ordering,
};
use crate::operator_algebra::{c, pauli_x, pauli_y, pauli_z, Op, StateVec};
use crate::par::{self, ExecPolicy};
use crate::phase_space::{coherent_product_state, write_marginal_csv, Boundary, PhaseGrid};
use crate::unravelling::{run_ensemble, EnsembleConfig, EnsembleReport, GeneratorSource, LatticeSpec};

/// Conservation tolerances checked after `evolve`.
pub const EVOLVE_TRACE_TOL: f64 = 1e-6;
pub const EVOLVE_HERMITICITY_TOL: f64 = 1e-9;
/// min eigenvalue must stay above −this × peak density
pub const EVOLVE_POSITIVITY_TOL: f64 = 1e-4;

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "CQLIMIT_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Evolve,
    Unravel,
    CheckPositivity,
    TrotterConvergence,
    CnmTable,
    HoOracle,
}

impl Mode {
    pub fn tag(&self) -> &'static str {
        match self {
            Mode::Evolve => "evolve",
            Mode::Unravel => "unravel",
            Mode::CheckPositivity => "check-positivity",
            Mode::TrotterConvergence => "trotter-convergence",
            Mode::CnmTable => "cnm-table",
            Mode::HoOracle => "ho-oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSpec {
    pub t_final: f64,
    /// step size; evolve defaults to the stability bound, unravel to 1e-3
    pub dt: Option<f64>,
    /// observation interval; must divide t_final
    pub observe_every: Option<f64>,
}

impl Default for TimeSpec {
    fn default() -> Self {
        Self {
            t_final: 1.0,
            dt: None,
            observe_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialState {
    pub q0: f64,
    pub p0: f64,
    /// amplitudes as [re, im] pairs; defaults to the first basis vector
    pub psi: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnravelSpec {
    pub n_traj: usize,
    /// recorded times; defaults to the multiples of time.observe_every
    pub checkpoints: Option<Vec<f64>>,
    pub lattice: Option<LatticeSpec>,
    pub track_conditional_state: bool,
    pub save_trajectories: usize,
    /// per-trajectory purity defect must stay below this × dt
    pub purity_factor: f64,
}

impl Default for UnravelSpec {
    fn default() -> Self {
        Self {
            n_traj: 1000,
            checkpoints: None,
            lattice: None,
            track_conditional_state: true,
            save_trajectories: 0,
            purity_factor: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrotterSpec {
    /// decreasing step sizes; defaults to t_final/{64, 128, 256}
    pub taus: Option<Vec<f64>>,
    pub ordering: Ordering,
    pub min_slope: f64,
}

impl Default for TrotterSpec {
    fn default() -> Self {
        Self {
            taus: None,
            ordering: Ordering::Sym,
            min_slope: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PositivitySpec {
    pub tol: f64,
    /// pointwise generator checks on an n × n sample of the grid
    pub points: usize,
}

impl Default for PositivitySpec {
    fn default() -> Self {
        Self { tol: 1e-10, points: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnmSpec {
    pub n_max: u32,
}

impl Default for CnmSpec {
    fn default() -> Self {
        Self { n_max: 6 }
    }
}

/// Which closed forms the oscillator oracle compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedForm {
    Printed,
    Derived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoOracleSpec {
    pub closed_form: ClosedForm,
    pub lambda: Vec<f64>,
    pub m_q: Vec<f64>,
    #[serde(rename = "E")]
    pub e: Vec<f64>,
    pub hbar: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    /// combinations with √λℏ/(E√m_Q) above this are skipped
    pub max_argument: f64,
    pub tol_l: f64,
    pub tol_heff: f64,
    /// leading Fock block compared; defaults to fock_dim / 2
    pub block: Option<usize>,
}

impl Default for HoOracleSpec {
    fn default() -> Self {
        Self {
            closed_form: ClosedForm::Printed,
            lambda: vec![0.5, 1.0, 2.0],
            m_q: vec![0.5, 1.0, 2.0],
            e: vec![1.0, 2.0, 4.0],
            hbar: vec![0.2],
            points: vec![[0.3, 0.7]],
            max_argument: 0.5,
            tol_l: 1e-8,
            tol_heff: 1e-6,
            block: None,
        }
    }
}

fn default_grid() -> PhaseGrid {
    PhaseGrid {
        q_min: -8.0,
        q_max: 8.0,
        p_min: -8.0,
        p_max: 8.0,
        n_q: 128,
        n_p: 128,
        boundary: Boundary::Periodic,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// optional; must agree with the command-line mode when present
    pub mode: Option<Mode>,
    pub model: ModelKind,
    pub generator: GeneratorTag,
    pub params: ModelParams,
    pub grid: PhaseGrid,
    pub time: TimeSpec,
    pub initial: InitialState,
    pub heff: HeffOptions,
    pub unravel: UnravelSpec,
    pub trotter: TrotterSpec,
    pub positivity: PositivitySpec,
    pub cnm: CnmSpec,
    pub ho_oracle: HoOracleSpec,
    pub seed: u64,
    /// write binary field snapshots at every observation
    pub snapshots: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: None,
            model: ModelKind::QubitTransverse,
            generator: GeneratorTag::MainCq,
            params: ModelParams::default(),
            grid: default_grid(),
            time: TimeSpec::default(),
            initial: InitialState::default(),
            heff: HeffOptions::default(),
            unravel: UnravelSpec::default(),
            trotter: TrotterSpec::default(),
            positivity: PositivitySpec::default(),
            cnm: CnmSpec::default(),
            ho_oracle: HoOracleSpec::default(),
            seed: 0,
            snapshots: false,
            output_dir: None,
        }
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl RunConfig {
    /// Hilbert-space dimension of the configured model.
    pub fn model_dim(&self) -> usize {
        match self.model {
            ModelKind::SingleSystem => self.params.dim,
            ModelKind::QubitLinear | ModelKind::QubitTransverse => 2,
            ModelKind::CoupledOscillators => self.params.fock_dim,
        }
    }

    /// Every constraint violation, named by JSON path.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(self.params.violations().into_iter().map(|m| format!("params.{m}")));
        v.extend(self.grid.violations().into_iter().map(|m| format!("grid.{m}")));
        let t = &self.time;
        if !positive(t.t_final) {
            v.push("time.t_final must be > 0".into());
        }
        if let Some(dt) = t.dt {
            if !positive(dt) {
                v.push("time.dt must be > 0".into());
            }
        }
        if let Some(o) = t.observe_every {
            if !positive(o) {
                v.push("time.observe_every must be > 0".into());
            } else if positive(t.t_final) {
                let n = (t.t_final / o).round();
                if n < 1.0 || (n * o - t.t_final).abs() > 1e-9 * t.t_final.max(1.0) {
                    v.push("time.observe_every must divide time.t_final".into());
                }
            }
        }
        if !(self.initial.q0.is_finite() && self.initial.p0.is_finite()) {
            v.push("initial.q0 and initial.p0 must be finite".into());
        }
        if let Some(psi) = &self.initial.psi {
            if psi.len() != self.model_dim() {
                v.push(format!(
                    "initial.psi has length {}, model dimension is {}",
                    psi.len(),
                    self.model_dim()
                ));
            }
            let n2: f64 = psi.iter().map(|z| z[0] * z[0] + z[1] * z[1]).sum();
            if !positive(n2) {
                v.push("initial.psi must have nonzero finite norm".into());
            }
        }
        if self.heff.n_max < 1 {
            v.push("heff.n_max must be >= 1".into());
        }
        if !positive(self.heff.tol) {
            v.push("heff.tol must be > 0".into());
        }
        let u = &self.unravel;
        if u.n_traj < 1 {
            v.push("unravel.n_traj must be >= 1".into());
        }
        if let Some(l) = &u.lattice {
            v.extend(l.violations().into_iter().map(|m| format!("unravel.lattice: {m}")));
        }
        if let Some(cp) = &u.checkpoints {
            if cp.iter().any(|&x| !(x.is_finite() && x >= 0.0 && x <= t.t_final)) {
                v.push("unravel.checkpoints must lie in [0, time.t_final]".into());
            }
            if cp.windows(2).any(|w| w[1] <= w[0]) {
                v.push("unravel.checkpoints must increase".into());
            }
        }
        if !positive(u.purity_factor) {
            v.push("unravel.purity_factor must be > 0".into());
        }
        if let Some(taus) = &self.trotter.taus {
            if taus.len() < 2 {
                v.push("trotter.taus needs at least two values".into());
            }
            if taus.iter().any(|&x| !positive(x)) {
                v.push("trotter.taus must be > 0".into());
            }
            if taus.windows(2).any(|w| w[1] >= w[0]) {
                v.push("trotter.taus must decrease".into());
            }
        }
        if !self.trotter.min_slope.is_finite() {
            v.push("trotter.min_slope must be finite".into());
        }
        if !positive(self.positivity.tol) {
            v.push("positivity.tol must be > 0".into());
        }
        if self.cnm.n_max > CNM_MAX_ORDER {
            v.push(format!("cnm.n_max must be <= {CNM_MAX_ORDER}"));
        }
        let ho = &self.ho_oracle;
        for (name, list) in [("lambda", &ho.lambda), ("m_q", &ho.m_q), ("E", &ho.e), ("hbar", &ho.hbar)] {
            if list.is_empty() {
                v.push(format!("ho_oracle.{name} must not be empty"));
            }
            if list.iter().any(|&x| !positive(x)) {
                v.push(format!("ho_oracle.{name} entries must be > 0"));
            }
        }
        if ho.points.is_empty() {
            v.push("ho_oracle.points must not be empty".into());
        }
        for (name, x) in [
            ("max_argument", ho.max_argument),
            ("tol_l", ho.tol_l),
            ("tol_heff", ho.tol_heff),
        ] {
            if !positive(x) {
                v.push(format!("ho_oracle.{name} must be > 0"));
            }
        }
        if let Some(b) = ho.block {
            if b < 1 || b > self.params.fock_dim {
                v.push("ho_oracle.block must lie in [1, params.fock_dim]".into());
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CqError::Config(v.join("\n")))
        }
    }

    fn hamiltonian(&self) -> Result<CqHamiltonian> {
        CqHamiltonian::builtin(self.model, &self.params)
    }

    fn generator_kind(&self, tag: GeneratorTag) -> Result<GeneratorKind> {
        let mut k = GeneratorKind::new(tag, self.params, self.hamiltonian()?)?;
        k.heff = self.heff;
        Ok(k)
    }

    fn psi0(&self) -> StateVec {
        let d = self.model_dim();
        match &self.initial.psi {
            Some(v) => StateVec::from_iterator(d, v.iter().map(|z| c(z[0], z[1]))),
            None => {
                let mut e = StateVec::zeros(d);
                e[0] = c(1.0, 0.0);
                e
            }
        }
    }

    fn checkpoints(&self) -> Vec<f64> {
        if let Some(cp) = &self.unravel.checkpoints {
            return cp.clone();
        }
        let t = self.time.t_final;
        match self.time.observe_every {
            Some(o) => {
                let n = (t / o).round() as usize;
                (1..=n).map(|k| k as f64 * o).collect()
            }
            None => vec![t],
        }
    }
}

/// Parses and validates a JSON config. Schema errors name their JSON path.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            CqError::Config(e.inner().to_string())
        } else {
            CqError::Config(format!("{path}: {}", e.inner()))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CqError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &CqError) -> i32 {
    match e {
        CqError::Invariant(_) | CqError::Instability(_) => 2,
        _ => 1,
    }
}

/// What a run produced.
#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub mode: Mode,
    /// false when a checked invariant failed
    pub passed: bool,
    pub summary: String,
    /// file names relative to the output directory, manifest excluded
    pub files: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            2
        }
    }
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        fs::write(self.dir.join(name), body)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v).map_err(|e| CqError::Config(e.to_string()))?;
        s.push('\n');
        self.text(name, &s)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    program: &'static str,
    version: &'static str,
    parallel_feature: bool,
    mode: Mode,
    passed: bool,
    config: &'a RunConfig,
    outputs: &'a [String],
}

/// Runs `mode` and writes its artifacts plus `manifest.json` into `out`.
pub fn run(mode: Mode, cfg: &RunConfig, out: &Path, policy: ExecPolicy) -> Result<Outcome> {
    cfg.validate()?;
    if let Some(m) = cfg.mode {
        if m != mode {
            return Err(CqError::Config(format!(
                "mode: config says {}, command line says {}",
                m.tag(),
                mode.tag()
            )));
        }
    }
    let mut w = Writer::new(out)?;
    let (passed, summary) = match mode {
        Mode::Evolve => run_evolve(cfg, &mut w, policy)?,
        Mode::Unravel => run_unravel(cfg, &mut w, policy)?,
        Mode::CheckPositivity => run_positivity(cfg, &mut w)?,
        Mode::TrotterConvergence => run_trotter(cfg, &mut w, policy)?,
        Mode::CnmTable => run_cnm(cfg, &mut w)?,
        Mode::HoOracle => run_ho_oracle(cfg, &mut w)?,
    };
    let mut resolved = cfg.clone();
    resolved.mode = Some(mode);
    let files = w.files.clone();
    w.json(
        "manifest.json",
        &Manifest {
            program: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            parallel_feature: cfg!(feature = "parallel"),
            mode,
            passed,
            config: &resolved,
            outputs: &files,
        },
    )?;
    Ok(Outcome {
        mode,
        passed,
        summary,
        files,
    })
}

#[derive(Serialize)]
struct EvolveSummary<'a> {
    model: ModelKind,
    generator: GeneratorTag,
    steps: usize,
    dt: f64,
    split_step: bool,
    trace_drift: f64,
    max_anti_hermitian: f64,
    /// min over observations of min_eig / peak_density
    min_eig_over_peak: f64,
    trace_ok: bool,
    hermiticity_ok: bool,
    positivity_ok: bool,
    final_row: &'a ObserverRow,
}

fn pauli_csv(rows: &[ObserverRow]) -> String {
    let mut s = String::from("t,sigma_x,sigma_y,sigma_z\n");
    let (x, y, z) = (pauli_x(), pauli_y(), pauli_z());
    for r in rows {
        s.push_str(&format!(
            "{:.10e},{:.12e},{:.12e},{:.12e}\n",
            r.t,
            r.quantum_expectation(&x),
            r.quantum_expectation(&y),
            r.quantum_expectation(&z)
        ));
    }
    s
}

fn run_evolve(cfg: &RunConfig, w: &mut Writer, policy: ExecPolicy) -> Result<(bool, String)> {
    let kind = cfg.generator_kind(cfg.generator)?;
    let gen = Generator::build(&kind, &cfg.grid, policy)?;
    let field = coherent_product_state(
        &cfg.grid,
        cfg.initial.q0,
        cfg.initial.p0,
        cfg.params.hbar,
        cfg.params.s,
        &cfg.psi0(),
    )?;
    let snapshot_dir = if cfg.snapshots {
        w.files.push("snapshots/".into());
        Some(w.dir.join("snapshots"))
    } else {
        None
    };
    let opts = EvolveOptions {
        t_final: cfg.time.t_final,
        dt: cfg.time.dt,
        observe_every: cfg.time.observe_every,
        snapshot_dir,
    };
    let rep = evolve(&gen, &field, &opts)?;
    w.text("observers.csv", &observers_to_csv(&rep.series))?;
    if field.d == 2 {
        w.text("pauli.csv", &pauli_csv(&rep.series))?;
    }
    write_marginal_csv(&rep.field, &w.path("marginal_final.csv"))?;
    let drift = rep.trace_drift();
    let anti = rep.series.iter().map(|r| r.max_anti_hermitian).fold(0.0, f64::max);
    let min_rel = rep
        .series
        .iter()
        .map(|r| r.min_eig / r.peak_density)
        .fold(f64::INFINITY, f64::min);
    let s = EvolveSummary {
        model: cfg.model,
        generator: cfg.generator,
        steps: rep.steps,
        dt: rep.dt,
        split_step: rep.split_step,
        trace_drift: drift,
        max_anti_hermitian: anti,
        min_eig_over_peak: min_rel,
        trace_ok: drift <= EVOLVE_TRACE_TOL,
        hermiticity_ok: anti <= EVOLVE_HERMITICITY_TOL,
        positivity_ok: min_rel >= -EVOLVE_POSITIVITY_TOL,
        final_row: rep.series.last().expect("series holds t = 0"),
    };
    w.json("evolve_summary.json", &s)?;
    let ok = s.trace_ok && s.hermiticity_ok && s.positivity_ok;
    Ok((
        ok,
        format!(
            "evolve {}: {} steps, trace drift {:.2e}, anti-Hermitian {:.2e}, min eig/peak {:.2e}",
            cfg.generator.tag(),
            rep.steps,
            drift,
            anti,
            min_rel
        ),
    ))
}

#[derive(Serialize)]
struct UnravelSummary<'a> {
    purity_bound: f64,
    purity_ok: bool,
    report: &'a EnsembleReport,
}

fn run_unravel(cfg: &RunConfig, w: &mut Writer, policy: ExecPolicy) -> Result<(bool, String)> {
    if cfg.generator != GeneratorTag::MainCq {
        return Err(CqError::Unsupported(format!(
            "unravel needs generator main_cq, got {}",
            cfg.generator.tag()
        )));
    }
    let h = cfg.hamiltonian()?;
    let src = match cfg.unravel.lattice {
        Some(spec) => GeneratorSource::with_lattice(h, cfg.params, cfg.heff, spec, policy)?,
        None => GeneratorSource::direct(h, cfg.params, cfg.heff)?,
    };
    let dt = cfg.time.dt.unwrap_or(1e-3);
    let mut ec = EnsembleConfig::new(cfg.unravel.n_traj, cfg.time.t_final, dt, cfg.seed, cfg.psi0());
    ec.q0 = cfg.initial.q0;
    ec.p0 = cfg.initial.p0;
    ec.checkpoints = cfg.checkpoints();
    ec.track_conditional_state = cfg.unravel.track_conditional_state;
    ec.save_trajectories = cfg.unravel.save_trajectories;
    if src.dim() == 2 {
        ec.observables = vec![
            ("sigma_x".into(), pauli_x()),
            ("sigma_y".into(), pauli_y()),
            ("sigma_z".into(), pauli_z()),
        ];
    }
    let rep = run_ensemble(&src, &ec, policy)?;
    w.text("ensemble.csv", &rep.to_csv())?;
    if ec.save_trajectories > 0 {
        w.text("trajectories.csv", &rep.trajectories_csv())?;
    }
    let bound = cfg.unravel.purity_factor * dt;
    let purity_ok = !ec.track_conditional_state || rep.max_purity_defect <= bound;
    w.json(
        "unravel_summary.json",
        &UnravelSummary {
            purity_bound: bound,
            purity_ok,
            report: &rep,
        },
    )?;
    Ok((
        purity_ok,
        format!(
            "unravel: {} trajectories, {} steps, max purity defect {:.2e} (bound {:.2e})",
            ec.n_traj, rep.settings.steps, rep.max_purity_defect, bound
        ),
    ))
}

fn complex_rows(m: &Matrix2<Complex64>) -> [[[f64; 2]; 2]; 2] {
    let e = |i, j| [m[(i, j)].re, m[(i, j)].im];
    [[e(0, 0), e(0, 1)], [e(1, 0), e(1, 1)]]
}

fn real_rows(m: &Matrix2<f64>) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

/// D-matrices of the generator named by `tag` at the configured E and s.
pub fn generator_d_matrices(tag: GeneratorTag, params: &ModelParams) -> Result<DMatrices> {
    Ok(match tag {
        GeneratorTag::Qcle => qcle_matrices(),
        GeneratorTag::Liouville => DMatrices {
            d0: Matrix2::zeros(),
            d1: Matrix2::zeros(),
            d2: Matrix2::zeros(),
        },
        _ => d_matrices(params.e, params.s)?,
    })
}

#[derive(Serialize)]
struct PositivityReport {
    generator: GeneratorTag,
    d0: [[[f64; 2]; 2]; 2],
    d1: [[[f64; 2]; 2]; 2],
    d2: [[f64; 2]; 2],
    tradeoff: TradeoffReport,
    pointwise_points: usize,
    pointwise_failures: Vec<String>,
    passes: bool,
}

fn run_positivity(cfg: &RunConfig, w: &mut Writer) -> Result<(bool, String)> {
    let d = generator_d_matrices(cfg.generator, &cfg.params)?;
    let report = tradeoff_check(&d, cfg.positivity.tol);
    let mut failures = Vec::new();
    let mut n_points = 0;
    if matches!(cfg.generator, GeneratorTag::MainCq | GeneratorTag::SelfCommuting) && cfg.positivity.points > 0 {
        let h = cfg.hamiltonian()?;
        let g = &cfg.grid;
        let pts = sample_points((g.q_min, g.q_max), (g.p_min, g.p_max), cfg.positivity.points);
        n_points = pts.len();
        for (q, p) in pts {
            let r = assemble(&h, &cfg.params, q, p, &cfg.heff).and_then(|data| data.check());
            if let Err(e) = r {
                failures.push(format!("({q:.4}, {p:.4}): {e}"));
            }
        }
    }
    let passes = report.passes() && failures.is_empty();
    w.json(
        "positivity.json",
        &PositivityReport {
            generator: cfg.generator,
            d0: complex_rows(&d.d0),
            d1: complex_rows(&d.d1),
            d2: real_rows(&d.d2),
            tradeoff: report,
            pointwise_points: n_points,
            pointwise_failures: failures.clone(),
            passes,
        },
    )?;
    Ok((
        passes,
        format!(
            "check-positivity {}: range {} tradeoff {} saturated {} residual {:.2e}, {} pointwise failures",
            cfg.generator.tag(),
            report.range_condition,
            report.tradeoff_holds,
            report.saturated,
            report.saturation_residual,
            failures.len()
        ),
    ))
}

fn run_trotter(cfg: &RunConfig, w: &mut Writer, policy: ExecPolicy) -> Result<(bool, String)> {
    let t = cfg.time.t_final;
    let taus = cfg
        .trotter
        .taus
        .clone()
        .unwrap_or_else(|| vec![t / 64.0, t / 128.0, t / 256.0]);
    let kind = cfg.generator_kind(GeneratorTag::MainCq)?;
    let field = coherent_product_state(
        &cfg.grid,
        cfg.initial.q0,
        cfg.initial.p0,
        cfg.params.hbar,
        cfg.params.s,
        &cfg.psi0(),
    )?;
    let study = convergence_study(&kind, &field, t, &taus, cfg.trotter.ordering, policy)?;
    w.text("trotter_convergence.csv", &study.to_csv())?;
    let passes = study.monotone && study.slope >= cfg.trotter.min_slope;
    #[derive(Serialize)]
    struct S<'a> {
        min_slope: f64,
        passes: bool,
        study: &'a crate::evolvers::ConvergenceStudy,
    }
    w.json(
        "trotter_summary.json",
        &S {
            min_slope: cfg.trotter.min_slope,
            passes,
            study: &study,
        },
    )?;
    Ok((
        passes,
        format!(
            "trotter-convergence: slope {:.3}, monotone {}",
            study.slope, study.monotone
        ),
    ))
}

fn run_cnm(cfg: &RunConfig, w: &mut Writer) -> Result<(bool, String)> {
    let n = cfg.cnm.n_max;
    let table = CnmTable::new(n)?;
    w.text("cnm_table.csv", &table.to_csv())?;
    let order = n.min(CNM_MAX_ORDER / 2);
    let violations = cnm_rule_violations(order)?;
    let rows: Vec<Vec<i64>> = (0..=n).map(|k| table.row(k)).collect();
    #[derive(Serialize)]
    struct S {
        n_max: u32,
        rows: Vec<Vec<i64>>,
        rule_check_order: u32,
        violations: Vec<String>,
    }
    let passes = violations.is_empty();
    w.json(
        "cnm_summary.json",
        &S {
            n_max: n,
            rows,
            rule_check_order: order,
            violations,
        },
    )?;
    Ok((passes, format!("cnm-table: rows 0..={n}, rules checked to {order}")))
}

/// One parameter combination of the oscillator oracle.
#[derive(Debug, Clone, Serialize)]
pub struct HoOracleRow {
    pub lambda: f64,
    pub m_q: f64,
    pub e: f64,
    pub hbar: f64,
    pub argument: f64,
    pub q: f64,
    pub p: f64,
    pub rel_err_lq: f64,
    pub rel_err_lp: f64,
    pub rel_err_heff: f64,
    pub passes: bool,
}

fn block_max(a: &Op, k: usize) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            m = m.max(a[(i, j)].norm());
        }
    }
    m
}

fn block_rel(a: &Op, b: &Op, k: usize) -> f64 {
    let diff = block_max(&(a - b), k);
    let scale = block_max(b, k);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Compares the series L_q, L_p, H_eff of the coupled oscillators with the
/// closed forms on the leading `block` Fock states, over the parameter grid.
pub fn ho_oracle_sweep(base: &ModelParams, spec: &HoOracleSpec, heff: &HeffOptions) -> Result<Vec<HoOracleRow>> {
    let block = spec.block.unwrap_or(base.fock_dim / 2).max(1);
    let mut rows = Vec::new();
    for &lambda in &spec.lambda {
        for &m_q in &spec.m_q {
            for &e in &spec.e {
                for &hbar in &spec.hbar {
                    let params = ModelParams {
                        lambda,
                        m_q,
                        e,
                        hbar,
                        ..*base
                    };
                    let argument = ho_argument(&params);
                    if argument > spec.max_argument {
                        continue;
                    }
                    let h = CqHamiltonian::builtin(ModelKind::CoupledOscillators, &params)?;
                    let co = CoupledOscillators::new(params.m_c, m_q, lambda, hbar, params.fock_dim);
                    for &[q, p] in &spec.points {
                        let (lq, lp) = lindblad_ops(&h, q, p, e)?;
                        let he = h_eff(&h, q, p, e, hbar, params.s, heff)?.op;
                        let cf = match spec.closed_form {
                            ClosedForm::Printed => ho_closed_forms(&params, q, p, &co.q_op, &co.p_op),
                            ClosedForm::Derived => ho_closed_forms_exact(&params, q, p, &co.q_op, &co.p_op),
                        };
                        let rel_err_lq = block_rel(&lq, &cf.lq, block);
                        let rel_err_lp = block_rel(&lp, &cf.lp, block);
                        let rel_err_heff = block_rel(&he, &cf.h_eff, block);
                        rows.push(HoOracleRow {
                            lambda,
                            m_q,
                            e,
                            hbar,
                            argument,
                            q,
                            p,
                            rel_err_lq,
                            rel_err_lp,
                            rel_err_heff,
                            passes: rel_err_lq <= spec.tol_l
                                && rel_err_lp <= spec.tol_l
                                && rel_err_heff <= spec.tol_heff,
                        });
                    }
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(CqError::Config(format!(
            "ho_oracle: no parameter combination has argument <= {}",
            spec.max_argument
        )));
    }
    Ok(rows)
}

fn run_ho_oracle(cfg: &RunConfig, w: &mut Writer) -> Result<(bool, String)> {
    let rows = ho_oracle_sweep(&cfg.params, &cfg.ho_oracle, &cfg.heff)?;
    let mut s = String::from("lambda,m_q,E,hbar,argument,q,p,rel_err_lq,rel_err_lp,rel_err_heff,passes\n");
    for r in &rows {
        s.push_str(&format!(
            "{},{},{},{},{:.12e},{},{},{:.6e},{:.6e},{:.6e},{}\n",
            r.lambda, r.m_q, r.e, r.hbar, r.argument, r.q, r.p, r.rel_err_lq, r.rel_err_lp, r.rel_err_heff, r.passes
        ));
    }
    w.text("ho_oracle.csv", &s)?;
    let max = |f: fn(&HoOracleRow) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    let (ml, mp, mh) = (max(|r| r.rel_err_lq), max(|r| r.rel_err_lp), max(|r| r.rel_err_heff));
    let passes = rows.iter().all(|r| r.passes);
    #[derive(Serialize)]
    struct S {
        closed_form: ClosedForm,
        combinations: usize,
        max_rel_err_lq: f64,
        max_rel_err_lp: f64,
        max_rel_err_heff: f64,
        tol_l: f64,
        tol_heff: f64,
        passes: bool,
    }
    w.json(
        "ho_oracle_summary.json",
        &S {
            closed_form: cfg.ho_oracle.closed_form,
            combinations: rows.len(),
            max_rel_err_lq: ml,
            max_rel_err_lp: mp,
            max_rel_err_heff: mh,
            tol_l: cfg.ho_oracle.tol_l,
            tol_heff: cfg.ho_oracle.tol_heff,
            passes,
        },
    )?;
    Ok((
        passes,
        format!(
            "ho-oracle ({:?}): {} combinations, max rel err L_q {:.2e} L_p {:.2e} H_eff {:.2e}",
            cfg.ho_oracle.closed_form,
            rows.len(),
            ml,
            mp,
            mh
        ),
    ))
}

/// Command-line arguments.
#[derive(Debug, Parser)]
#[command(name = "cqlimit", version, about = "Classical-quantum double-scaling limit simulator")]
pub struct Args {
    #[arg(value_enum)]
    pub mode: Mode,
    /// JSON run configuration
    #[arg(long)]
    pub config: PathBuf,
    /// output directory (overrides CQLIMIT_OUT and the config)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// cap on worker threads
    #[arg(long)]
    pub threads: Option<usize>,
    /// RNG seed (overrides the config)
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Runs the CLI and returns the process exit code.
pub fn main_with_args(args: Args) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let mut cfg = match parse_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cqlimit: {e}");
            return 1;
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let policy = match args.threads {
        Some(0) => {
            eprintln!("cqlimit: --threads must be >= 1");
            return 1;
        }
        Some(1) => ExecPolicy::Sequential,
        Some(n) => {
            if !par::init_threads(n) {
                log::warn!("worker pool already initialised; --threads {n} ignored");
            }
            ExecPolicy::default()
        }
        None => ExecPolicy::default(),
    };
    let out = args
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("cqlimit_out"));
    match run(args.mode, &cfg, &out, policy) {
        Ok(o) => {
            println!("{}", o.summary);
            if !o.passed {
                eprintln!("cqlimit: {} found a violated invariant", o.mode.tag());
            }
            o.exit_code()
        }
        Err(e) => {
            eprintln!("cqlimit: {e}");
            exit_code(&e)
        }
    }
}
