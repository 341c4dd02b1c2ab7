//! Operator-valued Hamiltonians H(q, p) on the quantum subsystem, with their
//! phase-space derivatives and the built-in models.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CqError, Result};
use crate::operator_algebra::{self as oa, c, frobenius, Op};

/// Classical phase-space coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coord {
    Q,
    P,
}

/// Source of an operator-valued H(q, p).
pub trait HamiltonianModel: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, q: f64, p: f64) -> Op;
    /// Analytic ∂ⁿH/∂zⁿ, n ∈ {1, 2}, when the model knows it.
    fn analytic_deriv(&self, _q: f64, _p: f64, _which: Coord, _order: u8) -> Option<Op> {
        None
    }
    fn name(&self) -> String;
}

/// Physical parameters shared by the models and the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// classical mass
    pub m_c: f64,
    /// quantum oscillator mass
    pub m_q: f64,
    /// oscillator coupling λ
    pub lambda: f64,
    /// qubit coupling g
    pub g: f64,
    /// qubit transverse splitting Δ
    pub delta: f64,
    /// single-system harmonic frequency, 0 for a free particle
    pub omega: f64,
    /// squeeze parameter s
    pub s: f64,
    /// energy scale E = ℏ/τ
    #[serde(rename = "E")]
    pub e: f64,
    pub hbar: f64,
    pub fock_dim: usize,
    /// Hilbert-space dimension of the single-system model
    pub dim: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            m_c: 1.0,
            m_q: 1.0,
            lambda: 1.0,
            g: 1.0,
            delta: 1.0,
            omega: 0.0,
            s: 1.0,
            e: 1.0,
            hbar: 1.0,
            fock_dim: 20,
            dim: 2,
        }
    }
}

impl ModelParams {
    /// All constraint violations, each named by its field.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut pos = |name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{name} must be > 0"));
            }
        };
        pos("m_c", self.m_c);
        pos("m_q", self.m_q);
        pos("s", self.s);
        pos("E", self.e);
        pos("hbar", self.hbar);
        let mut nonneg = |name: &str, v: f64| {
            if !(v.is_finite() && v >= 0.0) {
                out.push(format!("{name} must be >= 0"));
            }
        };
        nonneg("lambda", self.lambda);
        nonneg("omega", self.omega);
        for (name, v) in [("g", self.g), ("delta", self.delta)] {
            if !v.is_finite() {
                out.push(format!("{name} must be finite"));
            }
        }
        if self.fock_dim < 2 {
            out.push("fock_dim must be >= 2".into());
        }
        if self.dim < 1 {
            out.push("dim must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CqError::InvalidParameter(v.join("; ")))
        }
    }
}

/// The built-in models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SingleSystem,
    QubitLinear,
    QubitTransverse,
    CoupledOscillators,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::SingleSystem,
        ModelKind::QubitLinear,
        ModelKind::QubitTransverse,
        ModelKind::CoupledOscillators,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::SingleSystem => "single_system",
            ModelKind::QubitLinear => "qubit_linear",
            ModelKind::QubitTransverse => "qubit_transverse",
            ModelKind::CoupledOscillators => "coupled_oscillators",
        }
    }
}

/// H = (p²/2m + ½mω²q²)·I_d
#[derive(Debug, Clone)]
pub struct SingleSystem {
    pub mass: f64,
    pub omega: f64,
    pub dim: usize,
}

impl SingleSystem {
    pub fn potential(&self, q: f64) -> f64 {
        0.5 * self.mass * self.omega * self.omega * q * q
    }
    pub fn force_gradient(&self, q: f64) -> f64 {
        self.mass * self.omega * self.omega * q
    }
}

impl HamiltonianModel for SingleSystem {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, q: f64, p: f64) -> Op {
        oa::identity(self.dim) * c(p * p / (2.0 * self.mass) + self.potential(q), 0.0)
    }
    fn analytic_deriv(&self, q: f64, p: f64, which: Coord, order: u8) -> Option<Op> {
        let v = match (which, order) {
            (Coord::Q, 1) => self.force_gradient(q),
            (Coord::Q, 2) => self.mass * self.omega * self.omega,
            (Coord::P, 1) => p / self.mass,
            (Coord::P, 2) => 1.0 / self.mass,
            _ => return None,
        };
        Some(oa::identity(self.dim) * c(v, 0.0))
    }
    fn name(&self) -> String {
        "single_system".into()
    }
}

/// H = p²/2m + g q σ_z + (Δ/2) σ_x. Δ = 0 gives the self-commuting linear model.
#[derive(Debug, Clone)]
pub struct Qubit {
    pub mass: f64,
    pub g: f64,
    pub delta: f64,
}

impl HamiltonianModel for Qubit {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, q: f64, p: f64) -> Op {
        oa::identity(2) * c(p * p / (2.0 * self.mass), 0.0)
            + oa::pauli_z() * c(self.g * q, 0.0)
            + oa::pauli_x() * c(0.5 * self.delta, 0.0)
    }
    fn analytic_deriv(&self, _q: f64, p: f64, which: Coord, order: u8) -> Option<Op> {
        match (which, order) {
            (Coord::Q, 1) => Some(oa::pauli_z() * c(self.g, 0.0)),
            (Coord::Q, 2) => Some(oa::zeros(2)),
            (Coord::P, 1) => Some(oa::identity(2) * c(p / self.mass, 0.0)),
            (Coord::P, 2) => Some(oa::identity(2) * c(1.0 / self.mass, 0.0)),
            _ => None,
        }
    }
    fn name(&self) -> String {
        if self.delta == 0.0 {
            "qubit_linear".into()
        } else {
            "qubit_transverse".into()
        }
    }
}

/// Truncated Fock-space position and momentum for an oscillator of mass m and
/// reference frequency ω: Q = √(ℏ/2mω)(a + a†), P = i√(ℏmω/2)(a† − a).
pub fn fock_ops(n: usize, hbar: f64, mass: f64, omega: f64) -> (Op, Op) {
    let mut a = oa::zeros(n);
    for k in 1..n {
        a[(k - 1, k)] = c((k as f64).sqrt(), 0.0);
    }
    let ad = a.adjoint();
    let q = (&a + &ad) * c((hbar / (2.0 * mass * omega)).sqrt(), 0.0);
    let p = (&ad - &a) * c(0.0, (hbar * mass * omega / 2.0).sqrt());
    (q, p)
}

/// H = p²/2m_C + P²/2m_Q + λ(q − Q)² on a truncated Fock basis.
#[derive(Clone)]
pub struct CoupledOscillators {
    pub m_c: f64,
    pub m_q: f64,
    pub lambda: f64,
    pub q_op: Op,
    pub p_op: Op,
    kinetic_q: Op,
    q_sq: Op,
}

impl CoupledOscillators {
    /// Fock basis of the oscillator with frequency √(2λ/m_Q) (or 1 when λ = 0).
    pub fn new(m_c: f64, m_q: f64, lambda: f64, hbar: f64, fock_dim: usize) -> Self {
        let w = if lambda > 0.0 {
            (2.0 * lambda / m_q).sqrt()
        } else {
            1.0
        };
        let (q_op, p_op) = fock_ops(fock_dim, hbar, m_q, w);
        let kinetic_q = &p_op * &p_op * c(0.5 / m_q, 0.0);
        let q_sq = &q_op * &q_op;
        Self {
            m_c,
            m_q,
            lambda,
            q_op,
            p_op,
            kinetic_q,
            q_sq,
        }
    }
}

impl fmt::Debug for CoupledOscillators {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoupledOscillators")
            .field("m_c", &self.m_c)
            .field("m_q", &self.m_q)
            .field("lambda", &self.lambda)
            .field("fock_dim", &self.q_op.nrows())
            .finish()
    }
}

impl HamiltonianModel for CoupledOscillators {
    fn dim(&self) -> usize {
        self.q_op.nrows()
    }
    fn eval(&self, q: f64, p: f64) -> Op {
        let n = self.dim();
        // λ(q − Q)² = λ(q² − 2qQ + Q²)
        oa::identity(n) * c(p * p / (2.0 * self.m_c) + self.lambda * q * q, 0.0) + &self.kinetic_q
            - &self.q_op * c(2.0 * self.lambda * q, 0.0)
            + &self.q_sq * c(self.lambda, 0.0)
    }
    fn analytic_deriv(&self, q: f64, p: f64, which: Coord, order: u8) -> Option<Op> {
        let n = self.dim();
        match (which, order) {
            (Coord::Q, 1) => Some(
                (oa::identity(n) * c(q, 0.0) - &self.q_op) * c(2.0 * self.lambda, 0.0),
            ),
            (Coord::Q, 2) => Some(oa::identity(n) * c(2.0 * self.lambda, 0.0)),
            (Coord::P, 1) => Some(oa::identity(n) * c(p / self.m_c, 0.0)),
            (Coord::P, 2) => Some(oa::identity(n) * c(1.0 / self.m_c, 0.0)),
            _ => None,
        }
    }
    fn name(&self) -> String {
        "coupled_oscillators".into()
    }
}

/// Closure-backed model, handy for tests and one-off Hamiltonians.
pub struct FnModel<F> {
    dim: usize,
    name: String,
    f: F,
}

impl<F> HamiltonianModel for FnModel<F>
where
    F: Fn(f64, f64) -> Op + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, q: f64, p: f64) -> Op {
        (self.f)(q, p)
    }
    fn name(&self) -> String {
        self.name.clone()
    }
}

/// H(q, p) plus derivative policy and the optional O(ℏ) part H¹.
#[derive(Clone)]
pub struct CqHamiltonian {
    model: Arc<dyn HamiltonianModel>,
    h1: Option<Op>,
    fd_step: f64,
    force_fd: bool,
}

impl fmt::Debug for CqHamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CqHamiltonian")
            .field("model", &self.model.name())
            .field("dim", &self.model.dim())
            .field("fd_step", &self.fd_step)
            .field("force_fd", &self.force_fd)
            .field("h1", &self.h1.is_some())
            .finish()
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;

impl CqHamiltonian {
    pub fn new(model: Arc<dyn HamiltonianModel>) -> Self {
        Self {
            model,
            h1: None,
            fd_step: DEFAULT_FD_STEP,
            force_fd: false,
        }
    }

    pub fn from_fn<F>(dim: usize, name: &str, f: F) -> Self
    where
        F: Fn(f64, f64) -> Op + Send + Sync + 'static,
    {
        Self::new(Arc::new(FnModel {
            dim,
            name: name.to_string(),
            f,
        }))
    }

    /// Builds a built-in model.
    pub fn builtin(kind: ModelKind, params: &ModelParams) -> Result<Self> {
        params.validate()?;
        let model: Arc<dyn HamiltonianModel> = match kind {
            ModelKind::SingleSystem => Arc::new(SingleSystem {
                mass: params.m_c,
                omega: params.omega,
                dim: params.dim,
            }),
            ModelKind::QubitLinear => Arc::new(Qubit {
                mass: params.m_c,
                g: params.g,
                delta: 0.0,
            }),
            ModelKind::QubitTransverse => Arc::new(Qubit {
                mass: params.m_c,
                g: params.g,
                delta: params.delta,
            }),
            ModelKind::CoupledOscillators => Arc::new(CoupledOscillators::new(
                params.m_c,
                params.m_q,
                params.lambda,
                params.hbar,
                params.fock_dim,
            )),
        };
        Ok(Self::new(model))
    }

    pub fn with_h1(mut self, h1: Op) -> Result<Self> {
        if h1.nrows() != self.dim() || !h1.is_square() {
            return Err(CqError::DimensionMismatch("H¹ dimension".into()));
        }
        self.h1 = Some(h1);
        Ok(self)
    }

    pub fn with_fd_step(mut self, h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(CqError::InvalidParameter(format!("fd_step {h}")));
        }
        self.fd_step = h;
        Ok(self)
    }

    pub fn without_h1(mut self) -> Self {
        self.h1 = None;
        self
    }

    /// Ignore analytic derivatives and always difference numerically.
    pub fn with_forced_fd(mut self, yes: bool) -> Self {
        self.force_fd = yes;
        self
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn name(&self) -> String {
        self.model.name()
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    pub fn h1(&self) -> Option<&Op> {
        self.h1.as_ref()
    }

    pub fn eval(&self, q: f64, p: f64) -> Result<Op> {
        if !(q.is_finite() && p.is_finite()) {
            return Err(CqError::NonFinite(format!("H({q}, {p})")));
        }
        Ok(self.model.eval(q, p))
    }

    pub fn deriv(&self, q: f64, p: f64, which: Coord, order: u8) -> Result<Op> {
        if order == 0 || order > 2 {
            return Err(CqError::Unsupported(format!("derivative order {order}")));
        }
        if !(q.is_finite() && p.is_finite()) {
            return Err(CqError::NonFinite(format!("∂H at ({q}, {p})")));
        }
        if !self.force_fd {
            if let Some(d) = self.model.analytic_deriv(q, p, which, order) {
                return Ok(d);
            }
        }
        Ok(self.fd_deriv(q, p, which, order))
    }

    fn fd_deriv(&self, q: f64, p: f64, which: Coord, order: u8) -> Op {
        let h = self.fd_step;
        let at = |t: f64| match which {
            Coord::Q => self.model.eval(q + t, p),
            Coord::P => self.model.eval(q, p + t),
        };
        if order == 1 {
            (at(h) - at(-h)) * c(0.5 / h, 0.0)
        } else {
            (at(h) - at(0.0) * c(2.0, 0.0) + at(-h)) * c(1.0 / (h * h), 0.0)
        }
    }
}

/// Outcome of a sampled self-commutativity test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelfCommuting {
    pub holds: bool,
    pub max_commutator_norm: f64,
}

/// Checks [H(z), H(z′)] = 0 over all sampled pairs (Frobenius norm ≤ tol).
pub fn is_self_commuting(h: &CqHamiltonian, pts: &[(f64, f64)], tol: f64) -> Result<SelfCommuting> {
    if pts.len() < 2 {
        return Err(CqError::InvalidParameter(
            "self-commutativity needs at least two sample points".into(),
        ));
    }
    let ops = pts
        .iter()
        .map(|&(q, p)| h.eval(q, p))
        .collect::<Result<Vec<_>>>()?;
    let mut worst: f64 = 0.0;
    for i in 0..ops.len() {
        for j in i + 1..ops.len() {
            worst = worst.max(frobenius(&(&ops[i] * &ops[j] - &ops[j] * &ops[i])));
        }
    }
    Ok(SelfCommuting {
        holds: worst <= tol,
        max_commutator_norm: worst,
    })
}

/// n×n lattice of sample points over a window.
pub fn sample_points(q: (f64, f64), p: (f64, f64), n: usize) -> Vec<(f64, f64)> {
    let n = n.max(2);
    let step = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / (n - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push((step(q.0, q.1, i), step(p.0, p.1, j)));
        }
    }
    out
}

/// Weight of a density matrix carried by its top `top` basis levels, relative to its trace.
pub fn fock_tail_weight(rho: &Op, top: usize) -> f64 {
    let n = rho.nrows();
    let tr: f64 = (0..n).map(|k| rho[(k, k)].re).sum();
    let tail: f64 = (n.saturating_sub(top)..n).map(|k| rho[(k, k)].re.abs()).sum();
    if tr.abs() > 0.0 {
        tail / tr.abs()
    } else {
        0.0
    }
}

/// Above this tail weight a Fock-truncated result is flagged.
pub const FOCK_TAIL_LIMIT: f64 = 1e-6;
