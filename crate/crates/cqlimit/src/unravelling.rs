//! Stochastic unravelling: coupled classical SDE and quantum state SDE,
//! Euler–Maruyama stepping and ensemble statistics.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cq_generator::{assemble, pinv_sym2, DMatrices, GeneratorData, HeffOptions};
use crate::cq_hamiltonian::{CqHamiltonian, ModelParams};
use crate::error::{CqError, Result};
use crate::operator_algebra::{self as oa, c, Op, StateVec};
use crate::par::{self, ExecPolicy};

/// Principal square root of a positive semi-definite D2.
pub fn sigma_from_d2(d2: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    if d2.iter().any(|v| !v.is_finite()) {
        return Err(CqError::NonFinite("D2".into()));
    }
    if (d2[(0, 1)] - d2[(1, 0)]).abs() > 1e-12 * d2.abs().max().max(1.0) {
        return Err(CqError::InvalidParameter("D2 is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(*d2);
    let scale = eig.eigenvalues.abs().max().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(CqError::InvalidParameter(format!(
            "D2 is not positive semi-definite: eigenvalues {:?}",
            eig.eigenvalues.as_slice()
        )));
    }
    if d2[(0, 1)] == 0.0 {
        return Ok(Matrix2::new(d2[(0, 0)].max(0.0).sqrt(), 0.0, 0.0, d2[(1, 1)].max(0.0).sqrt()));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(eig.eigenvectors * Matrix2::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Noise amplitudes with σσᵀ = D2, and the map dW ↦ σ^{−T} dW feeding the quantum update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma: Matrix2<f64>,
    sigma_inv_t: Matrix2<f64>,
    pub seed: u64,
}

fn c2_norm(m: &Matrix2<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

impl NoiseModel {
    pub fn new(d: &DMatrices, seed: u64) -> Result<Self> {
        let sigma = sigma_from_d2(&d.d2)?;
        let sigma_inv_t = match sigma.try_inverse() {
            Some(inv) if sigma.determinant().abs() > 1e-14 * sigma.abs().max().powi(2) => inv.transpose(),
            _ => {
                if c2_norm(&d.d1) == 0.0 {
                    Matrix2::zeros()
                } else {
                    let pinv = pinv_sym2(&sigma);
                    let proj = Matrix2::identity() - sigma * pinv;
                    let resid = c2_norm(&(proj.map(|v| c(v, 0.0)) * d.d1));
                    if resid > 1e-12 * c2_norm(&d.d1) {
                        return Err(CqError::InvalidParameter(
                            "σ is singular while back-reaction D1 lies outside its range".into(),
                        ));
                    }
                    pinv.transpose()
                }
            }
        };
        Ok(Self {
            sigma,
            sigma_inv_t,
            seed,
        })
    }

    pub fn sigma_inv_t(&self) -> Matrix2<f64> {
        self.sigma_inv_t
    }

    /// Independent stream for one trajectory.
    pub fn stream(&self, stream_id: u64) -> NoiseStream {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(stream_id);
        NoiseStream { rng }
    }
}

/// Deterministic normal draws keyed by (seed, stream); successive draws advance the counter.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha20Rng,
}

impl NoiseStream {
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// √dt · (two independent standard normals)
    pub fn dw(&mut self, dt: f64) -> [f64; 2] {
        let sq = dt.sqrt();
        [sq * self.normal(), sq * self.normal()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub q: f64,
    pub p: f64,
    pub psi: StateVec,
    pub t: f64,
    /// Conditional density matrix, tracked when present.
    pub rho: Option<Op>,
}

impl TrajectoryState {
    pub fn new(q: f64, p: f64, psi: StateVec) -> Result<Self> {
        let n = psi.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(CqError::InvalidParameter("state vector has zero norm".into()));
        }
        Ok(Self {
            q,
            p,
            psi: psi / c(n, 0.0),
            t: 0.0,
            rho: None,
        })
    }

    pub fn with_conditional_state(mut self) -> Self {
        self.rho = Some(&self.psi * self.psi.adjoint());
        self
    }

    /// tr(ρ²) of the tracked conditional state, 1 when untracked.
    pub fn purity(&self) -> f64 {
        match &self.rho {
            Some(r) => (r * r).trace().re,
            None => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: TrajectoryState,
    /// ‖Mψ‖² before renormalization
    pub norm_sq: f64,
    /// classical drift ⟨D1*L + D1 L⟩ used in the step
    pub drift: [f64; 2],
}

fn real_checked(z: Complex64, what: &str) -> Result<f64> {
    if z.im.abs() > 1e-10 * z.re.abs().max(1.0) {
        return Err(CqError::Invariant(format!("{what} has imaginary part {:.3e}", z.im)));
    }
    Ok(z.re)
}

/// ⟨D1*L + D1 L⟩ for the state ψ.
pub fn classical_drift(gen: &GeneratorData, psi: &StateVec) -> Result<[f64; 2]> {
    let ell = [oa::expectation(psi, &gen.lq)?, oa::expectation(psi, &gen.lp)?];
    let d1 = gen.d.d1;
    let mut out = [0.0; 2];
    for (i, o) in out.iter_mut().enumerate() {
        let z: Complex64 = (0..2).map(|a| (d1[(i, a)].conj() + d1[(i, a)]) * ell[a]).sum();
        *o = real_checked(z, "classical drift")?;
    }
    Ok(out)
}

/// D0 − D1† D2⁺ D1: decoherence the classical noise does not reveal.
pub fn excess_decoherence(d: &DMatrices) -> Matrix2<Complex64> {
    let pinv = pinv_sym2(&d.d2).map(|v| c(v, 0.0));
    d.d0 - d.d1.adjoint() * pinv * d.d1
}

/// Euler–Maruyama step of the coupled SDEs for the increment `dw`.
pub fn em_step(
    state: &TrajectoryState,
    dt: f64,
    gen: &GeneratorData,
    noise: &NoiseModel,
    dw: [f64; 2],
) -> Result<StepOutcome> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(CqError::InvalidParameter(format!("dt = {dt}")));
    }
    let d = state.psi.len();
    if gen.lq.nrows() != d {
        return Err(CqError::DimensionMismatch(format!(
            "state of length {d} with generator of dimension {}",
            gen.lq.nrows()
        )));
    }
    let psi = &state.psi;
    let l = [&gen.lq, &gen.lp];
    let ell = [oa::expectation(psi, l[0])?, oa::expectation(psi, l[1])?];
    let drift = classical_drift(gen, psi)?;
    let dwv = Vector2::new(dw[0], dw[1]);
    let dz = noise.sigma * dwv;
    let xi = noise.sigma_inv_t() * dwv;
    let d0 = gen.d.d0;
    let d1 = gen.d.d1;
    let cc: [Complex64; 2] = [0, 1].map(|a| (0..2).map(|i| d1[(i, a)].conj() * xi[i]).sum());
    let id = oa::identity(d);
    let lam = [l[0] - &id * ell[0], l[1] - &id * ell[1]];
    let mut m = &id - gen.unitary_part() * c(0.0, dt / gen.hbar);
    for a in 0..2 {
        m += &lam[a] * cc[a];
        let inner = l[0] * d0[(0, a)] + l[1] * d0[(1, a)] - &id * (d0[(a, 0)] * ell[0] + d0[(a, 1)] * ell[1]);
        m -= &lam[a] * inner * c(0.5 * dt, 0.0);
    }
    let next = &m * psi;
    let norm_sq = next.norm_squared();
    if !norm_sq.is_finite() || norm_sq == 0.0 {
        return Err(CqError::NonFinite("state vector after step".into()));
    }
    let rho = match &state.rho {
        None => None,
        Some(r) => {
            let mut nr = &m * r * m.adjoint();
            let extra = excess_decoherence(&gen.d);
            for a in 0..2 {
                for b in 0..2 {
                    if extra[(a, b)] != c(0.0, 0.0) {
                        nr += &lam[a] * r * &lam[b] * (extra[(a, b)] * dt);
                    }
                }
            }
            let tr = nr.trace().re;
            Some(oa::symmetrize(&(nr / c(tr, 0.0))))
        }
    };
    let q = state.q + drift[0] * dt + dz[0];
    let p = state.p + drift[1] * dt + dz[1];
    if !(q.is_finite() && p.is_finite()) {
        return Err(CqError::NonFinite(format!("classical state ({q}, {p})")));
    }
    Ok(StepOutcome {
        state: TrajectoryState {
            q,
            p,
            psi: next / c(norm_sq.sqrt(), 0.0),
            t: state.t + dt,
            rho,
        },
        norm_sq,
        drift,
    })
}

/// Rectangular lattice of nodes, both ends included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub q_min: f64,
    pub q_max: f64,
    pub n_q: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub n_p: usize,
}

impl LatticeSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_q < 2 || self.n_p < 2 {
            v.push("lattice needs at least 2 nodes per axis".to_string());
        }
        if !(self.q_max > self.q_min) || !(self.p_max > self.p_min) {
            v.push("lattice bounds must be increasing".to_string());
        }
        v
    }
}

const LQ: usize = 0;
const LP: usize = 1;
const HE: usize = 2;
const H1: usize = 3;
const NSLOT: usize = 4;

/// Generator data at arbitrary phase points: bilinear interpolation over a
/// precomputed lattice, direct evaluation outside it.
#[derive(Debug, Clone)]
pub struct GeneratorSource {
    h: CqHamiltonian,
    params: ModelParams,
    opts: HeffOptions,
    lattice: Option<(LatticeSpec, Vec<Complex64>, Vec<bool>)>,
    template: GeneratorData,
}

impl GeneratorSource {
    pub fn direct(h: CqHamiltonian, params: ModelParams, opts: HeffOptions) -> Result<Self> {
        let template = assemble(&h, &params, 0.0, 0.0, &opts)?;
        Ok(Self {
            h,
            params,
            opts,
            lattice: None,
            template,
        })
    }

    pub fn with_lattice(
        h: CqHamiltonian,
        params: ModelParams,
        opts: HeffOptions,
        spec: LatticeSpec,
        policy: ExecPolicy,
    ) -> Result<Self> {
        let v = spec.violations();
        if !v.is_empty() {
            return Err(CqError::InvalidParameter(v.join("; ")));
        }
        let mut src = Self::direct(h, params, opts)?;
        let d = src.h.dim();
        let dd = d * d;
        let n = spec.n_q * spec.n_p;
        let nodes: Vec<Result<(Vec<Complex64>, bool)>> = par::map_indices(policy, n, |k| {
            let (i, j) = (k / spec.n_p, k % spec.n_p);
            let q = spec.q_min + (spec.q_max - spec.q_min) * i as f64 / (spec.n_q - 1) as f64;
            let p = spec.p_min + (spec.p_max - spec.p_min) * j as f64 / (spec.n_p - 1) as f64;
            let g = assemble(&src.h, &src.params, q, p, &src.opts)?;
            let mut v = Vec::with_capacity(NSLOT * dd);
            let zero = oa::zeros(d);
            for m in [&g.lq, &g.lp, &g.h_eff, g.h1_corr.as_ref().unwrap_or(&zero)] {
                v.extend(m.iter().cloned());
            }
            Ok((v, g.heff_converged))
        });
        let mut data = Vec::with_capacity(n * NSLOT * dd);
        let mut conv = Vec::with_capacity(n);
        for r in nodes {
            let (v, ok) = r?;
            data.extend(v);
            conv.push(ok);
        }
        src.lattice = Some((spec, data, conv));
        Ok(src)
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn hamiltonian(&self) -> &CqHamiltonian {
        &self.h
    }

    pub fn at(&self, q: f64, p: f64) -> Result<GeneratorData> {
        let Some((spec, data, conv)) = &self.lattice else {
            return assemble(&self.h, &self.params, q, p, &self.opts);
        };
        let x = (q - spec.q_min) / (spec.q_max - spec.q_min) * (spec.n_q - 1) as f64;
        let y = (p - spec.p_min) / (spec.p_max - spec.p_min) * (spec.n_p - 1) as f64;
        if !(x >= 0.0 && y >= 0.0 && x <= (spec.n_q - 1) as f64 && y <= (spec.n_p - 1) as f64) {
            return assemble(&self.h, &self.params, q, p, &self.opts);
        }
        let i = (x.floor() as usize).min(spec.n_q - 2);
        let j = (y.floor() as usize).min(spec.n_p - 2);
        let (wx, wy) = (x - i as f64, y - j as f64);
        let d = self.dim();
        let dd = d * d;
        let corners = [
            (i, j, (1.0 - wx) * (1.0 - wy)),
            (i + 1, j, wx * (1.0 - wy)),
            (i, j + 1, (1.0 - wx) * wy),
            (i + 1, j + 1, wx * wy),
        ];
        let mut ops: Vec<Op> = (0..NSLOT).map(|_| oa::zeros(d)).collect();
        let mut converged = true;
        for (ci, cj, w) in corners {
            let k = ci * spec.n_p + cj;
            converged &= conv[k];
            if w == 0.0 {
                continue;
            }
            for (s, op) in ops.iter_mut().enumerate() {
                let o = (k * NSLOT + s) * dd;
                for (dst, src) in op.as_mut_slice().iter_mut().zip(&data[o..o + dd]) {
                    *dst += src * w;
                }
            }
        }
        let t = &self.template;
        Ok(GeneratorData {
            point: (q, p),
            h: self.h.eval(q, p)?,
            lq: ops[LQ].clone(),
            lp: ops[LP].clone(),
            h_eff: ops[HE].clone(),
            h1_corr: self.h.h1().map(|_| ops[H1].clone()),
            d: t.d,
            hbar: t.hbar,
            e: t.e,
            s: t.s,
            heff_converged: converged,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub n_traj: usize,
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    /// centre of the Gaussian initial classical distribution
    pub q0: f64,
    pub p0: f64,
    pub psi0: StateVec,
    /// recorded times, multiples of dt
    pub checkpoints: Vec<f64>,
    /// Hermitian observables averaged at the checkpoints
    pub observables: Vec<(String, Op)>,
    pub track_conditional_state: bool,
    /// number of leading trajectories kept for CSV output
    pub save_trajectories: usize,
}

impl EnsembleConfig {
    pub fn new(n_traj: usize, t_final: f64, dt: f64, seed: u64, psi0: StateVec) -> Self {
        Self {
            n_traj,
            t_final,
            dt,
            seed,
            q0: 0.0,
            p0: 0.0,
            psi0,
            checkpoints: vec![t_final],
            observables: Vec::new(),
            track_conditional_state: true,
            save_trajectories: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Moment {
    pub name: String,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleRow {
    pub t: f64,
    pub mean_q: f64,
    pub se_q: f64,
    pub var_q: f64,
    pub mean_p: f64,
    pub se_p: f64,
    pub var_p: f64,
    pub observables: Vec<Moment>,
    /// mean of tr(ρ_cond²)
    pub mean_purity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRecord {
    pub index: usize,
    /// (t, q, p, ψ) per checkpoint, t = 0 included
    pub samples: Vec<(f64, f64, f64, Vec<(f64, f64)>)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSettings {
    pub n_traj: usize,
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    pub q0: f64,
    pub p0: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleReport {
    pub settings: EnsembleSettings,
    pub rows: Vec<EnsembleRow>,
    /// max over trajectories and steps of 1 − tr(ρ_cond²)
    pub max_purity_defect: f64,
    /// mean over steps of |‖Mψ‖² − 1|
    pub mean_norm_defect: f64,
    /// mean over steps of ‖Mψ‖² − 1
    pub mean_signed_norm_defect: f64,
    /// lattice nodes or direct evaluations whose H_eff series was unconverged
    pub heff_unconverged_steps: usize,
    #[serde(skip)]
    pub trajectories: Vec<TrajectoryRecord>,
}

impl EnsembleReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,mean_q,se_q,var_q,mean_p,se_p,var_p");
        if let Some(r) = self.rows.first() {
            for m in &r.observables {
                s.push_str(&format!(",mean_{0},se_{0}", m.name));
            }
        }
        s.push_str(",mean_purity\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.10e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                r.t, r.mean_q, r.se_q, r.var_q, r.mean_p, r.se_p, r.var_p
            ));
            for m in &r.observables {
                s.push_str(&format!(",{:.12e},{:.12e}", m.mean, m.se));
            }
            s.push_str(&format!(",{:.15e}\n", r.mean_purity));
        }
        s
    }

    pub fn trajectories_csv(&self) -> String {
        let d = self
            .trajectories
            .first()
            .and_then(|t| t.samples.first())
            .map(|s| s.3.len())
            .unwrap_or(0);
        let mut s = String::from("trajectory,t,q,p");
        for k in 0..d {
            s.push_str(&format!(",re_psi{k},im_psi{k}"));
        }
        s.push('\n');
        for tr in &self.trajectories {
            for (t, q, p, psi) in &tr.samples {
                s.push_str(&format!("{},{:.10e},{:.15e},{:.15e}", tr.index, t, q, p));
                for (re, im) in psi {
                    s.push_str(&format!(",{re:.15e},{im:.15e}"));
                }
                s.push('\n');
            }
        }
        s
    }
}

struct TrajectoryResult {
    // per checkpoint: q, p, observables..., purity
    samples: Vec<Vec<f64>>,
    max_purity_defect: f64,
    abs_norm: f64,
    signed_norm: f64,
    unconverged: usize,
    record: Option<TrajectoryRecord>,
}

fn checkpoint_steps(cfg: &EnsembleConfig) -> Result<(usize, Vec<usize>)> {
    let on_grid = |t: f64, what: &str| -> Result<usize> {
        let k = (t / cfg.dt).round();
        if !(t >= 0.0) || (k * cfg.dt - t).abs() > 1e-9 * t.max(1.0) {
            return Err(CqError::InvalidParameter(format!("{what} {t} is not a multiple of dt = {}", cfg.dt)));
        }
        Ok(k as usize)
    };
    let total = on_grid(cfg.t_final, "t_final")?;
    let mut ks = Vec::new();
    for &t in &cfg.checkpoints {
        let k = on_grid(t, "checkpoint")?;
        if k > total {
            return Err(CqError::InvalidParameter(format!("checkpoint {t} beyond t_final")));
        }
        ks.push(k);
    }
    if ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CqError::InvalidParameter("checkpoints must increase".into()));
    }
    Ok((total, ks))
}

fn run_trajectory(
    src: &GeneratorSource,
    cfg: &EnsembleConfig,
    noise: &NoiseModel,
    idx: usize,
    total: usize,
    ks: &[usize],
) -> Result<TrajectoryResult> {
    let pr = src.params();
    let mut rng = noise.stream(idx as u64);
    let sq = (pr.hbar * pr.s * pr.s / 2.0).sqrt();
    let sp = (pr.hbar / (2.0 * pr.s * pr.s)).sqrt();
    let q = cfg.q0 + sq * rng.normal();
    let p = cfg.p0 + sp * rng.normal();
    let mut st = TrajectoryState::new(q, p, cfg.psi0.clone())?;
    if cfg.track_conditional_state {
        st = st.with_conditional_state();
    }
    let keep = idx < cfg.save_trajectories;
    let snap = |st: &TrajectoryState| (st.t, st.q, st.p, st.psi.iter().map(|z| (z.re, z.im)).collect::<Vec<_>>());
    let mut record = keep.then(|| TrajectoryRecord {
        index: idx,
        samples: vec![snap(&st)],
    });
    let mut samples = Vec::with_capacity(ks.len());
    let (mut worst, mut abs_norm, mut signed_norm, mut unconverged) = (0.0f64, 0.0, 0.0, 0);
    let mut next_k = 0;
    let sample = |st: &TrajectoryState| -> Result<Vec<f64>> {
        let mut v = vec![st.q, st.p];
        for (_, a) in &cfg.observables {
            v.push(oa::expectation(&st.psi, a)?.re);
        }
        v.push(st.purity());
        Ok(v)
    };
    while next_k < ks.len() && ks[next_k] == 0 {
        samples.push(sample(&st)?);
        next_k += 1;
    }
    for step in 1..=total {
        let gen = src.at(st.q, st.p)?;
        if !gen.heff_converged {
            unconverged += 1;
        }
        let dw = rng.dw(cfg.dt);
        let out = em_step(&st, cfg.dt, &gen, noise, dw)?;
        abs_norm += (out.norm_sq - 1.0).abs();
        signed_norm += out.norm_sq - 1.0;
        st = out.state;
        // the step counter avoids accumulated rounding in t
        st.t = step as f64 * cfg.dt;
        worst = worst.max(1.0 - st.purity());
        if next_k < ks.len() && ks[next_k] == step {
            samples.push(sample(&st)?);
            if let Some(r) = record.as_mut() {
                r.samples.push(snap(&st));
            }
            next_k += 1;
        }
    }
    Ok(TrajectoryResult {
        samples,
        max_purity_defect: worst,
        abs_norm: abs_norm / total.max(1) as f64,
        signed_norm: signed_norm / total.max(1) as f64,
        unconverged,
        record,
    })
}

/// Runs independent trajectories and reduces them in index order, so the
/// result does not depend on the thread count.
pub fn run_ensemble(src: &GeneratorSource, cfg: &EnsembleConfig, policy: ExecPolicy) -> Result<EnsembleReport> {
    if cfg.n_traj == 0 {
        return Err(CqError::InvalidParameter("n_traj must be >= 1".into()));
    }
    if !(cfg.dt.is_finite() && cfg.dt > 0.0) {
        return Err(CqError::InvalidParameter(format!("dt = {}", cfg.dt)));
    }
    if cfg.psi0.len() != src.dim() {
        return Err(CqError::DimensionMismatch(format!(
            "psi0 of length {} for dimension {}",
            cfg.psi0.len(),
            src.dim()
        )));
    }
    for (name, a) in &cfg.observables {
        if a.nrows() != src.dim() || !oa::is_hermitian(a, 1e-12) {
            return Err(CqError::InvalidParameter(format!("observable {name} must be Hermitian of dimension {}", src.dim())));
        }
    }
    let (total, ks) = checkpoint_steps(cfg)?;
    let noise = NoiseModel::new(&src.template.d, cfg.seed)?;
    let results: Vec<Result<TrajectoryResult>> =
        par::map_indices(policy, cfg.n_traj, |i| run_trajectory(src, cfg, &noise, i, total, &ks));
    let n = cfg.n_traj as f64;
    let width = 3 + cfg.observables.len();
    let mut sum = vec![vec![0.0; width]; ks.len()];
    let mut sum2 = vec![vec![0.0; width]; ks.len()];
    let (mut worst, mut abs_norm, mut signed_norm, mut unconverged) = (0.0f64, 0.0, 0.0, 0);
    let mut trajectories = Vec::new();
    for r in results {
        let r = r?;
        for (c_idx, v) in r.samples.iter().enumerate() {
            for (k, x) in v.iter().enumerate() {
                sum[c_idx][k] += x;
                sum2[c_idx][k] += x * x;
            }
        }
        worst = worst.max(r.max_purity_defect);
        abs_norm += r.abs_norm;
        signed_norm += r.signed_norm;
        unconverged += r.unconverged;
        if let Some(rec) = r.record {
            trajectories.push(rec);
        }
    }
    let stat = |s: f64, s2: f64| {
        let mean = s / n;
        let var = if cfg.n_traj > 1 { ((s2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        (mean, var, (var / n).sqrt())
    };
    let rows = ks
        .iter()
        .enumerate()
        .map(|(ci, &k)| {
            let (mq, vq, eq) = stat(sum[ci][0], sum2[ci][0]);
            let (mp, vp, ep) = stat(sum[ci][1], sum2[ci][1]);
            let observables = cfg
                .observables
                .iter()
                .enumerate()
                .map(|(o, (name, _))| {
                    let (m, _, e) = stat(sum[ci][2 + o], sum2[ci][2 + o]);
                    Moment {
                        name: name.clone(),
                        mean: m,
                        se: e,
                    }
                })
                .collect();
            EnsembleRow {
                t: k as f64 * cfg.dt,
                mean_q: mq,
                se_q: eq,
                var_q: vq,
                mean_p: mp,
                se_p: ep,
                var_p: vp,
                observables,
                mean_purity: sum[ci][width - 1] / n,
            }
        })
        .collect();
    Ok(EnsembleReport {
        settings: EnsembleSettings {
            n_traj: cfg.n_traj,
            t_final: cfg.t_final,
            dt: cfg.dt,
            seed: cfg.seed,
            q0: cfg.q0,
            p0: cfg.p0,
            steps: total,
        },
        rows,
        max_purity_defect: worst,
        mean_norm_defect: abs_norm / n,
        mean_signed_norm_defect: signed_norm / n,
        heff_unconverged_steps: unconverged,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cq_generator::d_matrices;
    use crate::cq_hamiltonian::ModelKind;
    use crate::operator_algebra::{pauli_x, pauli_z};

    fn qubit(kind: ModelKind) -> (CqHamiltonian, ModelParams) {
        let p = ModelParams::default();
        (CqHamiltonian::builtin(kind, &p).unwrap(), p)
    }

    fn psi0() -> StateVec {
        StateVec::from_vec(vec![c(0.4f64.cos(), 0.0), c(0.4f64.sin(), 0.0)])
    }

    #[test]
    fn sigma_examples() {
        let s = sigma_from_d2(&Matrix2::new(4.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(s, Matrix2::new(2.0, 0.0, 0.0, 1.0));
        assert_eq!(sigma_from_d2(&Matrix2::zeros()).unwrap(), Matrix2::zeros());
        assert!(sigma_from_d2(&Matrix2::new(1.0, 0.0, 0.0, -1.0)).is_err());
        let dm = d_matrices(0.3, 1.7).unwrap();
        let s = sigma_from_d2(&dm.d2).unwrap();
        assert!((s[(0, 0)] - (0.3f64).sqrt() * 1.7).abs() < 1e-15);
        assert!((s[(1, 1)] - (0.3f64).sqrt() / 1.7).abs() < 1e-15);
    }

    #[test]
    fn noise_rejects_singular_sigma_with_back_reaction() {
        let mut dm = d_matrices(1.0, 1.0).unwrap();
        dm.d2 = Matrix2::new(1.0, 0.0, 0.0, 0.0);
        assert!(NoiseModel::new(&dm, 1).is_err());
        dm.d1 = Matrix2::new(c(1.0, 0.0), c(0.5, 0.0), c(0.0, 0.0), c(0.0, 0.0));
        assert!(NoiseModel::new(&dm, 1).is_ok());
    }

    #[test]
    fn free_particle_drift_is_hamiltonian_flow() {
        let mut p = ModelParams::default();
        p.dim = 1;
        p.m_c = 2.0;
        p.s = 1.5;
        p.e = 0.7;
        let h = CqHamiltonian::builtin(ModelKind::SingleSystem, &p).unwrap();
        let gen = assemble(&h, &p, 0.3, 1.2, &HeffOptions::default()).unwrap();
        let noise = NoiseModel::new(&gen.d, 0).unwrap();
        let st = TrajectoryState::new(0.3, 1.2, StateVec::from_vec(vec![c(1.0, 0.0)])).unwrap();
        let dt = 0.01;
        let dw = [0.05, -0.02];
        let out = em_step(&st, dt, &gen, &noise, dw).unwrap();
        let want_q = 0.3 + 1.2 / 2.0 * dt + (0.7f64).sqrt() * 1.5 * dw[0];
        let want_p = 1.2 + (0.7f64).sqrt() / 1.5 * dw[1];
        assert!((out.state.q - want_q).abs() < 1e-14);
        assert!((out.state.p - want_p).abs() < 1e-14);
    }

    #[test]
    fn identity_lindblads_give_unitary_motion() {
        let mut p = ModelParams::default();
        p.dim = 2;
        let h = CqHamiltonian::from_fn(2, "sx + q p", |q, pp| pauli_x() * c(0.7, 0.0) + oa::identity(2) * c(q * pp, 0.0));
        let gen = assemble(&h, &p, 0.4, -0.2, &HeffOptions::default()).unwrap();
        let noise = NoiseModel::new(&gen.d, 0).unwrap();
        let st = TrajectoryState::new(0.4, -0.2, psi0()).unwrap();
        let dt = 1e-3;
        let a = em_step(&st, dt, &gen, &noise, [0.03, 0.01]).unwrap();
        let b = em_step(&st, dt, &gen, &noise, [-0.02, 0.04]).unwrap();
        // ψ does not see the noise when every L is a multiple of the identity
        assert!((&a.state.psi - &b.state.psi).norm() < 1e-15);
        let want = (&oa::identity(2) - gen.unitary_part() * c(0.0, dt / p.hbar)) * &st.psi;
        let want = &want / c(want.norm(), 0.0);
        assert!((&a.state.psi - want).norm() < 1e-15);
    }

    /// Straight-line transcription of the two SDEs, term by term.
    fn reference_step(q: f64, p: f64, psi: &StateVec, dt: f64, dw: [f64; 2], g: &GeneratorData) -> (f64, f64, StateVec) {
        let e = g.e;
        let s = g.s;
        let hbar = g.hbar;
        let ex = |a: &Op| (psi.adjoint() * a * psi)[(0, 0)];
        let (lq, lp) = (&g.lq, &g.lp);
        let (eq, ep) = (ex(lq), ex(lp));
        // D1 = [[i s²/2, 1/2], [−1/2, i/2s²]], so D1* + D1 = [[0, 1], [−1, 0]]
        let qn = q + ep.re * dt + e.sqrt() * s * dw[0];
        let pn = p - eq.re * dt + e.sqrt() / s * dw[1];
        // c = D1† σ^{−T} dW with σ = diag(√E s, √E/s)
        let x1 = dw[0] / (e.sqrt() * s);
        let x2 = dw[1] * s / e.sqrt();
        let c_q = c(0.0, -s * s / 2.0) * x1 + c(-0.5, 0.0) * x2;
        let c_p = c(0.5, 0.0) * x1 + c(0.0, -1.0 / (2.0 * s * s)) * x2;
        let id = oa::identity(psi.len());
        let lam_q = lq - &id * eq;
        let lam_p = lp - &id * ep;
        let k = &g.h + &g.h_eff;
        let d0qq = c(s * s / (2.0 * e), 0.0);
        let d0qp = c(0.0, -1.0 / (2.0 * e));
        let d0pq = c(0.0, 1.0 / (2.0 * e));
        let d0pp = c(1.0 / (2.0 * e * s * s), 0.0);
        let mut dpsi = -(&k * psi) * c(0.0, dt / hbar);
        dpsi += &lam_q * psi * c_q + &lam_p * psi * c_p;
        let in_q = lq * d0qq + lp * d0pq - &id * (d0qq * eq + d0qp * ep);
        let in_p = lq * d0qp + lp * d0pp - &id * (d0pq * eq + d0pp * ep);
        dpsi -= (&lam_q * in_q * psi + &lam_p * in_p * psi) * c(0.5 * dt, 0.0);
        let next = psi + dpsi;
        let n = next.norm();
        (qn, pn, next / c(n, 0.0))
    }

    #[test]
    fn single_step_matches_transcription() {
        let (h, p) = qubit(ModelKind::QubitTransverse);
        let gen = assemble(&h, &p, 0.35, -0.6, &HeffOptions::default()).unwrap();
        let noise = NoiseModel::new(&gen.d, 42).unwrap();
        let st = TrajectoryState::new(0.35, -0.6, psi0()).unwrap();
        let mut rng = noise.stream(3);
        let dt = 2e-3;
        let dw = rng.dw(dt);
        let out = em_step(&st, dt, &gen, &noise, dw).unwrap();
        let (q, pp, psi) = reference_step(0.35, -0.6, &st.psi, dt, dw, &gen);
        assert!((out.state.q - q).abs() < 1e-12);
        assert!((out.state.p - pp).abs() < 1e-12);
        assert!((&out.state.psi - psi).norm() < 1e-12);
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let dm = d_matrices(1.0, 1.0).unwrap();
        let noise = NoiseModel::new(&dm, 9).unwrap();
        let a: Vec<f64> = (0..8).map({
            let mut r = noise.stream(1);
            move |_| r.normal()
        }).collect();
        let b: Vec<f64> = (0..8).map({
            let mut r = noise.stream(1);
            move |_| r.normal()
        }).collect();
        let other: Vec<f64> = (0..8).map({
            let mut r = noise.stream(2);
            move |_| r.normal()
        }).collect();
        assert_eq!(a, b);
        assert_ne!(a, other);
    }

    #[test]
    fn conditional_state_stays_pure_at_saturation_and_mixes_when_inflated() {
        let (h, p) = qubit(ModelKind::QubitTransverse);
        let dt = 1e-3;
        let run = |inflate: f64| {
            let mut st = TrajectoryState::new(0.2, 0.1, psi0()).unwrap().with_conditional_state();
            let noise = NoiseModel::new(&d_matrices(p.e, p.s).unwrap(), 5).unwrap();
            let mut rng = noise.stream(0);
            let mut worst: f64 = 0.0;
            for _ in 0..500 {
                let mut gen = assemble(&h, &p, st.q, st.p, &HeffOptions::default()).unwrap();
                gen.d.d0 *= c(inflate, 0.0);
                st = em_step(&st, dt, &gen, &noise, rng.dw(dt)).unwrap().state;
                worst = worst.max(1.0 - st.purity());
            }
            worst
        };
        assert!(run(1.0) <= 5.0 * dt, "{}", run(1.0));
        assert!(run(2.0) > 5.0 * dt, "{}", run(2.0));
    }

    #[test]
    fn norm_defect_scales_with_dt() {
        let (h, p) = qubit(ModelKind::QubitTransverse);
        let src = GeneratorSource::direct(h, p, HeffOptions::default()).unwrap();
        let defect = |dt: f64| {
            let mut cfg = EnsembleConfig::new(8, 0.1, dt, 11, psi0());
            cfg.track_conditional_state = false;
            run_ensemble(&src, &cfg, ExecPolicy::default()).unwrap().mean_norm_defect
        };
        let dts = [1e-3, 5e-4, 2.5e-4];
        let ys: Vec<f64> = dts.iter().map(|&d| defect(d)).collect();
        let slope = crate::evolvers::log_log_slope(&dts, &ys);
        assert!((slope - 1.0).abs() < 0.2, "slope {slope}, {ys:?}");
    }

    #[test]
    fn lattice_matches_direct_evaluation() {
        let (h, p) = qubit(ModelKind::QubitTransverse);
        let spec = LatticeSpec {
            q_min: -4.0,
            q_max: 4.0,
            n_q: 401,
            p_min: -4.0,
            p_max: 4.0,
            n_p: 3,
        };
        let lat = GeneratorSource::with_lattice(h.clone(), p, HeffOptions::default(), spec, ExecPolicy::default()).unwrap();
        let dir = GeneratorSource::direct(h, p, HeffOptions::default()).unwrap();
        for (q, pp) in [(0.123, 0.77), (-3.31, -2.2), (5.0, 0.0)] {
            let a = lat.at(q, pp).unwrap();
            let b = dir.at(q, pp).unwrap();
            assert!(oa::max_abs(&(&a.lq - &b.lq)) < 1e-4);
            // L_p and H_eff are affine in p for this model
            assert!(oa::max_abs(&(&a.lp - &b.lp)) < 1e-4);
            assert!(oa::max_abs(&(&a.h_eff - &b.h_eff)) < 1e-4);
            assert_eq!(a.h, b.h);
        }
    }

    #[test]
    fn ensemble_is_reproducible_across_policies() {
        let (h, p) = qubit(ModelKind::QubitTransverse);
        let src = GeneratorSource::direct(h, p, HeffOptions::default()).unwrap();
        let mut cfg = EnsembleConfig::new(6, 0.05, 1e-2, 7, psi0());
        cfg.observables = vec![("sz".into(), pauli_z())];
        cfg.checkpoints = vec![0.0, 0.02, 0.05];
        cfg.save_trajectories = 2;
        let a = run_ensemble(&src, &cfg, ExecPolicy::Sequential).unwrap();
        let b = run_ensemble(&src, &cfg, ExecPolicy::default()).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.trajectories_csv(), b.trajectories_csv());
        assert_eq!(a.rows.len(), 3);
        assert_eq!(a.trajectories_csv().lines().count(), 1 + 2 * 3);
        cfg.checkpoints = vec![0.015];
        assert!(run_ensemble(&src, &cfg, ExecPolicy::default()).is_err());
    }

    #[test]
    fn free_particle_momentum_variance_law() {
        let mut p = ModelParams::default();
        p.dim = 1;
        p.e = 0.5;
        let h = CqHamiltonian::builtin(ModelKind::SingleSystem, &p).unwrap();
        let src = GeneratorSource::direct(h, p, HeffOptions::default()).unwrap();
        let mut cfg = EnsembleConfig::new(4000, 1.0, 0.05, 3, StateVec::from_vec(vec![c(1.0, 0.0)]));
        cfg.checkpoints = vec![0.0, 1.0];
        let r = run_ensemble(&src, &cfg, ExecPolicy::default()).unwrap();
        let (v0, v1) = (r.rows[0].var_p, r.rows[1].var_p);
        let want = v0 + p.e / (p.s * p.s);
        // standard error of a sample variance ≈ var √(2/n)
        assert!((v1 - want).abs() < 3.0 * want * (2.0 / 4000.0f64).sqrt(), "{v1} vs {want}");
    }

    #[test]
    fn back_reaction_vanishes_as_e_decreases() {
        let mut prev = f64::INFINITY;
        for e in [1.0, 0.1, 0.01, 0.001] {
            let mut p = ModelParams::default();
            p.e = e;
            p.fock_dim = 16;
            let h = CqHamiltonian::builtin(ModelKind::CoupledOscillators, &p).unwrap();
            let gen = assemble(&h, &p, 0.3, 0.0, &HeffOptions::default()).unwrap();
            let mut psi = StateVec::zeros(16);
            psi[0] = c(0.8, 0.0);
            psi[1] = c(0.6, 0.0);
            let ell_q = oa::expectation(&psi, &gen.lq).unwrap().re.abs();
            let drift = classical_drift(&gen, &psi).unwrap();
            assert!((drift[1] + oa::expectation(&psi, &gen.lq).unwrap().re).abs() < 1e-12);
            assert!(ell_q < prev, "E = {e}: {ell_q} vs {prev}");
            prev = ell_q;
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn streams_replay_bitwise(seed in any::<u64>(), id in any::<u64>()) {
                let noise = NoiseModel::new(&d_matrices(1.0, 1.0).unwrap(), seed).unwrap();
                let (mut a, mut b) = (noise.stream(id), noise.stream(id));
                for _ in 0..16 {
                    prop_assert_eq!(a.dw(1e-3), b.dw(1e-3));
                }
            }

            #[test]
            fn em_step_keeps_state_normalized(q in -3.0f64..3.0, p in -3.0f64..3.0, w0 in -3.0f64..3.0, w1 in -3.0f64..3.0) {
                let (h, params) = qubit(ModelKind::QubitTransverse);
                let src = GeneratorSource::direct(h, params, HeffOptions::default()).unwrap();
                let gen = src.at(q, p).unwrap();
                let noise = NoiseModel::new(&gen.d, 1).unwrap();
                let dt = 1e-3;
                let st = TrajectoryState::new(q, p, psi0()).unwrap().with_conditional_state();
                let out = em_step(&st, dt, &gen, &noise, [w0 * dt.sqrt(), w1 * dt.sqrt()]).unwrap();
                prop_assert!((out.state.psi.norm() - 1.0).abs() < 1e-12);
                prop_assert!(1.0 - out.state.purity() < 5.0 * dt);
            }
        }
    }
}
