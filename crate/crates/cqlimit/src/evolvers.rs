//! Time evolution of operator fields under the CQ generators, the trotterized
//! decoherence channel and convergence studies.

use std::path::PathBuf;

use nalgebra::Matrix2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cq_generator::{assemble, d_matrices, DMatrices, HeffOptions};
use crate::cq_hamiltonian::{is_self_commuting, sample_points, Coord, CqHamiltonian, ModelParams};
use crate::error::{CqError, Result};
use crate::operator_algebra::{self as oa, c, herm_eigen, Op};
use crate::par::{self, ExecPolicy};
use crate::phase_space::{
    self, diagnostics, heat_multiply, stencil, support_leak, DiffusionSymbol, OperatorField, PhaseGrid,
    SUPPORT_LEAK_LIMIT,
};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorTag {
    MainCq,
    Liouville,
    Qcle,
    HusimiH0,
    GlauberH0,
    SelfCommuting,
    FokkerPlanck,
}

impl GeneratorTag {
    pub const ALL: [GeneratorTag; 7] = [
        GeneratorTag::MainCq,
        GeneratorTag::Liouville,
        GeneratorTag::Qcle,
        GeneratorTag::HusimiH0,
        GeneratorTag::GlauberH0,
        GeneratorTag::SelfCommuting,
        GeneratorTag::FokkerPlanck,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            GeneratorTag::MainCq => "main_cq",
            GeneratorTag::Liouville => "liouville",
            GeneratorTag::Qcle => "qcle",
            GeneratorTag::HusimiH0 => "husimi_h0",
            GeneratorTag::GlauberH0 => "glauber_h0",
            GeneratorTag::SelfCommuting => "self_commuting",
            GeneratorTag::FokkerPlanck => "fokker_planck",
        }
    }
}

/// A generator tag bound to a Hamiltonian and parameters.
#[derive(Debug, Clone)]
pub struct GeneratorKind {
    pub tag: GeneratorTag,
    pub params: ModelParams,
    pub h: CqHamiltonian,
    pub heff: HeffOptions,
}

fn is_scalar_op(m: &Op) -> bool {
    let d = m.nrows();
    let tr = m.trace() / d as f64;
    let scale = oa::max_abs(m).max(1.0);
    oa::max_abs(&(m - oa::identity(d) * tr)) <= 1e-12 * scale
}

impl GeneratorKind {
    pub fn new(tag: GeneratorTag, params: ModelParams, h: CqHamiltonian) -> Result<Self> {
        params.validate()?;
        let pts = sample_points((-2.0, 2.0), (-2.0, 2.0), 5);
        match tag {
            GeneratorTag::SelfCommuting => {
                let sc = is_self_commuting(&h, &pts, 1e-10)?;
                if !sc.holds {
                    return Err(CqError::InvalidParameter(format!(
                        "self_commuting needs [H(z), H(z')] = 0; found norm {:.3e}",
                        sc.max_commutator_norm
                    )));
                }
            }
            GeneratorTag::Liouville | GeneratorTag::FokkerPlanck => {
                for &(q, p) in &pts {
                    if !is_scalar_op(&h.eval(q, p)?) {
                        return Err(CqError::InvalidParameter(format!(
                            "{} needs a Hamiltonian proportional to the identity",
                            tag.tag()
                        )));
                    }
                }
            }
            _ => {}
        }
        Ok(Self {
            tag,
            params,
            h,
            heff: HeffOptions::default(),
        })
    }
}

// Per-point coefficient slots.
const K: usize = 0;
const G: usize = 1;
const G2: usize = 2;
const LQ: usize = 3;
const LP: usize = 4;
const AQ: usize = 5;
const BQ: usize = 6;
const AP: usize = 7;
const BP: usize = 8;
const H: usize = 9;
const SLOTS: usize = 10;

/// Generator with per-node coefficients cached for one grid.
///
/// Acting on ϱ at each node:
/// `Gϱ + ϱG2 − (i/ℏ)[K, ϱ] + Σ D0_{αβ} L_α ϱ L_β + ½ Σ D2_ii ∂²_i ϱ`
/// plus either `−Σ_i ∂_i(A_i ϱ + ϱ B_i)` (conservative) or `Σ_i (A_i ∂_iϱ + ∂_iϱ B_i)`.
#[derive(Debug, Clone)]
pub struct Generator {
    pub tag: GeneratorTag,
    pub grid: PhaseGrid,
    pub d: usize,
    pub hbar: f64,
    pub params: ModelParams,
    conservative: bool,
    unitary: bool,
    sandwich: bool,
    d0: Matrix2<Complex64>,
    d2: Matrix2<f64>,
    cache: Vec<Complex64>,
    policy: ExecPolicy,
    pub heff_unconverged: usize,
}

fn flat(m: &Op) -> Vec<Complex64> {
    let d = m.nrows();
    let mut v = Vec::with_capacity(d * d);
    for a in 0..d {
        for b in 0..d {
            v.push(m[(a, b)]);
        }
    }
    v
}

fn point_slots(kind: &GeneratorKind, q: f64, p: f64) -> Result<(Vec<Op>, bool)> {
    let h = &kind.h;
    let d = h.dim();
    let pr = &kind.params;
    let z = || oa::zeros(d);
    let mut s: Vec<Op> = (0..SLOTS).map(|_| z()).collect();
    let hq = h.eval(q, p)?;
    s[H] = hq.clone();
    let mut converged = true;
    match kind.tag {
        GeneratorTag::MainCq => {
            let data = assemble(h, pr, q, p, &kind.heff)?;
            converged = data.heff_converged;
            s[K] = data.unitary_part();
            let l = [&data.lq, &data.lp];
            let d0 = data.d.d0;
            let d1 = data.d.d1;
            let mut m = z();
            for a in 0..2 {
                for b in 0..2 {
                    m += l[b] * l[a] * d0[(a, b)];
                }
            }
            s[G] = &m * c(-0.5, 0.0);
            s[G2] = s[G].clone();
            s[AQ] = l[0] * d1[(0, 0)].conj() + l[1] * d1[(0, 1)].conj();
            s[BQ] = l[0] * d1[(0, 0)] + l[1] * d1[(0, 1)];
            s[AP] = l[0] * d1[(1, 0)].conj() + l[1] * d1[(1, 1)].conj();
            s[BP] = l[0] * d1[(1, 0)] + l[1] * d1[(1, 1)];
            s[LQ] = data.lq;
            s[LP] = data.lp;
        }
        tag => {
            let dq = h.deriv(q, p, Coord::Q, 1)?;
            let dp = h.deriv(q, p, Coord::P, 1)?;
            s[AQ] = &dp * c(-0.5, 0.0);
            s[BQ] = s[AQ].clone();
            s[AP] = &dq * c(0.5, 0.0);
            s[BP] = s[AP].clone();
            if tag != GeneratorTag::Liouville && tag != GeneratorTag::FokkerPlanck {
                s[K] = hq;
            }
            let sigma = match tag {
                GeneratorTag::HusimiH0 => -1.0,
                GeneratorTag::GlauberH0 | GeneratorTag::SelfCommuting => 1.0,
                _ => 0.0,
            };
            if sigma != 0.0 {
                let s2 = pr.s * pr.s;
                let cq = c(0.0, sigma * s2 / 2.0);
                let cp = c(0.0, sigma / (2.0 * s2));
                s[AQ] += &dq * cq;
                s[BQ] -= &dq * cq;
                s[AP] += &dp * cp;
                s[BP] -= &dp * cp;
                let w = h.deriv(q, p, Coord::Q, 2)? * c(s2 / 4.0, 0.0)
                    + h.deriv(q, p, Coord::P, 2)? * c(1.0 / (4.0 * s2), 0.0);
                s[G] += &w * c(0.0, sigma);
                s[G2] -= &w * c(0.0, sigma);
            }
            if tag == GeneratorTag::SelfCommuting {
                let d0 = d_matrices(pr.e, pr.s)?.d0;
                let l = [&dq, &dp];
                let mut m = z();
                for a in 0..2 {
                    for b in 0..2 {
                        m += l[b] * l[a] * d0[(a, b)];
                    }
                }
                s[G] -= &m * c(0.5, 0.0);
                s[G2] -= &m * c(0.5, 0.0);
                s[LQ] = dq;
                s[LP] = dp;
            }
        }
    }
    Ok((s, converged))
}

#[inline]
fn mul_acc(out: &mut [Complex64], a: &[Complex64], b: &[Complex64], d: usize, s: Complex64) {
    for r in 0..d {
        for k in 0..d {
            let x = a[r * d + k] * s;
            if x == ZERO {
                continue;
            }
            let brow = &b[k * d..(k + 1) * d];
            let orow = &mut out[r * d..(r + 1) * d];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += x * bv;
            }
        }
    }
}

/// Frobenius norm of Σ_k X_k ⊗ Y_k from the Gram sums tr(X_k†X_l) tr(Y_k†Y_l).
fn kron_sum_norm(terms: &[(Op, Op)]) -> f64 {
    let ip = |a: &Op, b: &Op| -> Complex64 { a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum() };
    let mut acc = ZERO;
    for (xk, yk) in terms {
        for (xl, yl) in terms {
            acc += ip(xk, xl) * ip(yk, yl);
        }
    }
    acc.re.max(0.0).sqrt()
}

impl Generator {
    pub fn build(kind: &GeneratorKind, grid: &PhaseGrid, policy: ExecPolicy) -> Result<Self> {
        grid.validate()?;
        let d = kind.h.dim();
        let dd = d * d;
        let n = grid.len();
        let slots: Vec<Result<(Vec<Complex64>, bool)>> = par::map_indices(policy, n, |k| {
            let (i, j) = (k / grid.n_p, k % grid.n_p);
            let (ops, conv) = point_slots(kind, grid.q(i), grid.p(j))?;
            let mut v = Vec::with_capacity(SLOTS * dd);
            for o in &ops {
                v.extend(flat(o));
            }
            Ok((v, conv))
        });
        let mut cache = Vec::with_capacity(n * SLOTS * dd);
        let mut unconverged = 0;
        for r in slots {
            let (v, conv) = r?;
            if !conv {
                unconverged += 1;
            }
            cache.extend(v);
        }
        if unconverged > 0 {
            log::warn!("H_eff series unconverged at {unconverged} nodes");
        }
        let pr = &kind.params;
        let dm: DMatrices = d_matrices(pr.e, pr.s)?;
        let (sandwich, d2) = match kind.tag {
            GeneratorTag::MainCq => (true, dm.d2),
            GeneratorTag::SelfCommuting => (true, dm.d2),
            GeneratorTag::FokkerPlanck => (false, dm.d2),
            _ => (false, Matrix2::zeros()),
        };
        Ok(Self {
            tag: kind.tag,
            grid: *grid,
            d,
            hbar: pr.hbar,
            params: *pr,
            conservative: kind.tag == GeneratorTag::MainCq,
            unitary: !matches!(kind.tag, GeneratorTag::Liouville | GeneratorTag::FokkerPlanck),
            sandwich,
            d0: dm.d0,
            d2,
            cache,
            policy,
            heff_unconverged: unconverged,
        })
    }

    pub fn policy(&self) -> ExecPolicy {
        self.policy
    }

    pub fn with_policy(mut self, policy: ExecPolicy) -> Self {
        self.policy = policy;
        self
    }

    fn slot(&self, k: usize, s: usize) -> &[Complex64] {
        let dd = self.d * self.d;
        let o = (k * SLOTS + s) * dd;
        &self.cache[o..o + dd]
    }

    pub fn slot_op(&self, i: usize, j: usize, s: usize) -> Op {
        Op::from_row_slice(self.d, self.d, self.slot(i * self.grid.n_p + j, s))
    }

    /// Hamiltonian at node (i, j).
    pub fn hamiltonian_at(&self, i: usize, j: usize) -> Op {
        self.slot_op(i, j, H)
    }

    fn check_field(&self, field: &OperatorField) -> Result<()> {
        if field.grid != self.grid || field.d != self.d {
            return Err(CqError::DimensionMismatch(format!(
                "field d = {} on {:?}, generator d = {}",
                field.d, field.grid, self.d
            )));
        }
        Ok(())
    }

    /// dϱ/dt, refusing fields whose mass reaches the grid edge.
    pub fn apply(&self, field: &OperatorField) -> Result<OperatorField> {
        let leak = support_leak(field, 3);
        if leak > SUPPORT_LEAK_LIMIT {
            return Err(CqError::Unresolved(format!(
                "support leak {leak:.3e} at the grid edge"
            )));
        }
        self.apply_raw(field, true)
    }

    /// dϱ/dt without the leak check; `with_unitary = false` drops −(i/ℏ)[K, ·].
    pub fn apply_raw(&self, field: &OperatorField, with_unitary: bool) -> Result<OperatorField> {
        self.check_field(field)?;
        let g = self.grid;
        let d = self.d;
        let dd = d * d;
        let np = g.n_p;
        let rho = &field.data;

        let fluxes = if self.conservative {
            let mut fq = vec![ZERO; rho.len()];
            let mut fp = vec![ZERO; rho.len()];
            let one = c(1.0, 0.0);
            par::for_each_chunk_mut(self.policy, &mut fq, dd, |k, blk| {
                let r = &rho[k * dd..(k + 1) * dd];
                mul_acc(blk, self.slot(k, AQ), r, d, one);
                mul_acc(blk, r, self.slot(k, BQ), d, one);
            });
            par::for_each_chunk_mut(self.policy, &mut fp, dd, |k, blk| {
                let r = &rho[k * dd..(k + 1) * dd];
                mul_acc(blk, self.slot(k, AP), r, d, one);
                mul_acc(blk, r, self.slot(k, BP), d, one);
            });
            Some((fq, fp))
        } else {
            None
        };

        let ui = c(0.0, -1.0 / self.hbar);
        let one = c(1.0, 0.0);
        let mut out = OperatorField::zeros(g, d, field.label);
        par::for_each_chunk_mut(self.policy, &mut out.data, np * dd, |i, row| {
            let mut tq = vec![ZERO; dd];
            let mut tp = vec![ZERO; dd];
            let mut tmp = vec![ZERO; dd];
            for j in 0..np {
                let k = i * np + j;
                let r = &rho[k * dd..(k + 1) * dd];
                let o = &mut row[j * dd..(j + 1) * dd];
                mul_acc(o, self.slot(k, G), r, d, one);
                mul_acc(o, r, self.slot(k, G2), d, one);
                if self.unitary && with_unitary {
                    let kk = self.slot(k, K);
                    mul_acc(o, kk, r, d, ui);
                    mul_acc(o, r, kk, d, -ui);
                }
                if self.sandwich {
                    let l = [self.slot(k, LQ), self.slot(k, LP)];
                    for a in 0..2 {
                        tmp.iter_mut().for_each(|v| *v = ZERO);
                        for b in 0..2 {
                            let w = self.d0[(a, b)];
                            if w != ZERO {
                                mul_acc(&mut tmp, r, l[b], d, w);
                            }
                        }
                        mul_acc(o, l[a], &tmp, d, one);
                    }
                }
                match &fluxes {
                    Some((fq, fp)) => {
                        stencil(fq, &g, dd, i, j, Coord::Q, 1, &mut tq);
                        stencil(fp, &g, dd, i, j, Coord::P, 1, &mut tp);
                        for e in 0..dd {
                            o[e] -= tq[e] + tp[e];
                        }
                    }
                    None => {
                        stencil(rho, &g, dd, i, j, Coord::Q, 1, &mut tq);
                        stencil(rho, &g, dd, i, j, Coord::P, 1, &mut tp);
                        mul_acc(o, self.slot(k, AQ), &tq, d, one);
                        mul_acc(o, &tq, self.slot(k, BQ), d, one);
                        mul_acc(o, self.slot(k, AP), &tp, d, one);
                        mul_acc(o, &tp, self.slot(k, BP), d, one);
                    }
                }
                if self.d2[(0, 0)] != 0.0 {
                    stencil(rho, &g, dd, i, j, Coord::Q, 2, &mut tq);
                    let w = 0.5 * self.d2[(0, 0)];
                    o.iter_mut().zip(&tq).for_each(|(x, y)| *x += y * w);
                }
                if self.d2[(1, 1)] != 0.0 {
                    stencil(rho, &g, dd, i, j, Coord::P, 2, &mut tp);
                    let w = 0.5 * self.d2[(1, 1)];
                    o.iter_mut().zip(&tp).for_each(|(x, y)| *x += y * w);
                }
            }
        });
        Ok(out)
    }

    /// Largest traceless norm of K over the grid.
    pub fn unitary_norm(&self) -> f64 {
        if !self.unitary {
            return 0.0;
        }
        (0..self.grid.len())
            .map(|k| {
                let m = Op::from_row_slice(self.d, self.d, self.slot(k, K));
                let tr = m.trace() / self.d as f64;
                oa::frobenius(&(m - oa::identity(self.d) * tr))
            })
            .fold(0.0, f64::max)
    }

    /// 0.2 × the smallest of the diffusive, advective and local-rate limits.
    pub fn stable_dt(&self) -> f64 {
        let g = self.grid;
        let (dq, dp) = (g.dq(), g.dp());
        let mut lim = f64::INFINITY;
        if self.d2[(0, 0)] > 0.0 {
            lim = lim.min(dq * dq / self.d2[(0, 0)]);
        }
        if self.d2[(1, 1)] > 0.0 {
            lim = lim.min(dp * dp / self.d2[(1, 1)]);
        }
        let d = self.d;
        let id = oa::identity(d);
        let (mut vq, mut vp, mut rate) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..g.len() {
            let op = |s| Op::from_row_slice(d, d, self.slot(k, s));
            vq = vq.max(oa::frobenius(&op(AQ)) + oa::frobenius(&op(BQ)));
            vp = vp.max(oa::frobenius(&op(AP)) + oa::frobenius(&op(BP)));
            // column-major vec: vec(AϱB) = (Bᵀ ⊗ A) vec ϱ
            let mut terms = vec![(id.clone(), op(G)), (op(G2).transpose(), id.clone())];
            if self.sandwich {
                let l = [op(LQ), op(LP)];
                for a in 0..2 {
                    for b in 0..2 {
                        terms.push((l[b].transpose() * self.d0[(a, b)], l[a].clone()));
                    }
                }
            }
            rate = rate.max(kron_sum_norm(&terms));
        }
        if vq > 0.0 {
            lim = lim.min(dq / vq);
        }
        if vp > 0.0 {
            lim = lim.min(dp / vp);
        }
        if rate > 0.0 {
            lim = lim.min(1.0 / rate);
        }
        0.2 * lim
    }

    /// exp(−iK h/ℏ) at every node, row-major blocks.
    pub fn unitaries(&self, h: f64) -> Vec<Complex64> {
        let d = self.d;
        let dd = d * d;
        let mut out = vec![ZERO; self.grid.len() * dd];
        let hbar = self.hbar;
        par::for_each_chunk_mut(self.policy, &mut out, dd, |k, blk| {
            let m = Op::from_row_slice(d, d, self.slot(k, K));
            let (lam, u) = herm_eigen(&oa::symmetrize(&m));
            let ph = Op::from_diagonal(&nalgebra::DVector::from_iterator(
                d,
                lam.iter().map(|l| Complex64::from_polar(1.0, -l * h / hbar)),
            ));
            let uu = &u * ph * u.adjoint();
            blk.copy_from_slice(&flat(&uu));
        });
        out
    }

    /// ⟨H⟩ = Σ tr(H ϱ) dq dp
    pub fn mean_energy(&self, field: &OperatorField) -> f64 {
        let d = self.d;
        let dd = d * d;
        let mut acc = 0.0;
        for k in 0..self.grid.len() {
            let h = self.slot(k, H);
            let r = &field.data[k * dd..(k + 1) * dd];
            for a in 0..d {
                for b in 0..d {
                    acc += (h[a * d + b] * r[b * d + a]).re;
                }
            }
        }
        acc * self.grid.cell_area()
    }
}

/// Derivative field of `gen` applied to `field`, with the edge-leak check.
pub fn apply_generator(gen: &Generator, field: &OperatorField) -> Result<OperatorField> {
    gen.apply(field)
}

fn apply_unitaries(u: &[Complex64], field: &mut OperatorField, policy: ExecPolicy) {
    let d = field.d;
    let dd = d * d;
    let one = c(1.0, 0.0);
    par::for_each_chunk_mut(policy, &mut field.data, dd, |k, blk| {
        let uk = &u[k * dd..(k + 1) * dd];
        let mut t = vec![ZERO; dd];
        mul_acc(&mut t, uk, blk, d, one);
        blk.iter_mut().for_each(|v| *v = ZERO);
        for r in 0..d {
            for cc in 0..d {
                let mut acc = ZERO;
                for m in 0..d {
                    acc += t[r * d + m] * uk[cc * d + m].conj();
                }
                blk[r * d + cc] = acc;
            }
        }
    });
}

fn l1_norm(f: &OperatorField) -> f64 {
    f.data.iter().map(|z| z.norm()).sum()
}

fn rk4(gen: &Generator, f: &OperatorField, h: f64, with_unitary: bool) -> Result<OperatorField> {
    let k1 = gen.apply_raw(f, with_unitary)?;
    let mut y = f.clone();
    y.axpy(c(h / 2.0, 0.0), &k1)?;
    let k2 = gen.apply_raw(&y, with_unitary)?;
    let mut y = f.clone();
    y.axpy(c(h / 2.0, 0.0), &k2)?;
    let k3 = gen.apply_raw(&y, with_unitary)?;
    let mut y = f.clone();
    y.axpy(c(h, 0.0), &k3)?;
    let k4 = gen.apply_raw(&y, with_unitary)?;
    let mut out = f.clone();
    out.axpy(c(h / 6.0, 0.0), &k1)?;
    out.axpy(c(h / 3.0, 0.0), &k2)?;
    out.axpy(c(h / 3.0, 0.0), &k3)?;
    out.axpy(c(h / 6.0, 0.0), &k4)?;
    Ok(out)
}

/// ‖K‖ h/ℏ above which the commutator is split off and exponentiated exactly.
pub const SPLIT_THRESHOLD: f64 = 0.1;

/// Fixed-step integrator state for one generator and step size.
struct Stepper<'a> {
    gen: &'a Generator,
    h: f64,
    half_u: Option<Vec<Complex64>>,
}

impl<'a> Stepper<'a> {
    fn new(gen: &'a Generator, h: f64) -> Self {
        let split = gen.unitary && gen.unitary_norm() * h / gen.hbar > SPLIT_THRESHOLD;
        let half_u = split.then(|| gen.unitaries(h / 2.0));
        Self { gen, h, half_u }
    }

    fn step(&self, f: &OperatorField) -> Result<OperatorField> {
        match &self.half_u {
            None => rk4(self.gen, f, self.h, true),
            Some(u) => {
                let mut x = f.clone();
                apply_unitaries(u, &mut x, self.gen.policy);
                let mut y = rk4(self.gen, &x, self.h, false)?;
                apply_unitaries(u, &mut y, self.gen.policy);
                Ok(y)
            }
        }
    }

    fn checked_step(&self, f: &OperatorField, t: f64) -> Result<OperatorField> {
        let next = self.step(f)?;
        let (n0, n1) = (l1_norm(f), l1_norm(&next));
        if !n1.is_finite() || n1 > 10.0 * n0 {
            return Err(CqError::Instability(format!(
                "field norm {n0:.3e} -> {n1:.3e} at t = {t:.6}, dt = {:.3e}",
                self.h
            )));
        }
        Ok(next)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ObserverRow {
    pub t: f64,
    pub trace: f64,
    pub mean_q: f64,
    pub mean_p: f64,
    pub var_q: f64,
    pub var_p: f64,
    pub min_eig: f64,
    pub purity: f64,
    pub peak_density: f64,
    pub max_anti_hermitian: f64,
    pub energy: f64,
    pub support_leak: f64,
    #[serde(skip)]
    pub partial_state: Op,
}

impl ObserverRow {
    fn observe(gen: &Generator, t: f64, f: &OperatorField) -> Self {
        let dg = diagnostics(f);
        Self {
            t,
            trace: dg.total_trace,
            mean_q: dg.mean_q,
            mean_p: dg.mean_p,
            var_q: dg.var_q,
            var_p: dg.var_p,
            min_eig: dg.min_eigenvalue,
            purity: dg.purity,
            peak_density: dg.peak_density,
            max_anti_hermitian: dg.max_anti_hermitian,
            energy: gen.mean_energy(f),
            support_leak: support_leak(f, 3),
            partial_state: dg.quantum_partial_state,
        }
    }

    /// tr(A ρ_Q) of the normalized partial state.
    pub fn quantum_expectation(&self, a: &Op) -> f64 {
        (a * &self.partial_state).trace().re / self.trace
    }
}

pub const OBSERVER_CSV_HEADER: &str = "t,trace,mean_q,mean_p,var_q,var_p,min_eig,purity";

pub fn observers_to_csv(rows: &[ObserverRow]) -> String {
    let mut s = String::from(OBSERVER_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{:.10e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            r.t, r.trace, r.mean_q, r.mean_p, r.var_q, r.var_p, r.min_eig, r.purity
        ));
    }
    s
}

#[derive(Debug, Clone, Default)]
pub struct EvolveOptions {
    pub t_final: f64,
    /// Upper bound on the step; the stable step when absent.
    pub dt: Option<f64>,
    /// Observation interval; must divide t_final. Only the endpoints when absent.
    pub observe_every: Option<f64>,
    /// Writes a CQF1 snapshot at every observation when set.
    pub snapshot_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvolveReport {
    pub field: OperatorField,
    pub series: Vec<ObserverRow>,
    pub steps: usize,
    pub dt: f64,
    pub split_step: bool,
}

impl EvolveReport {
    /// max |trace(t) − trace(0)| over the recorded series
    pub fn trace_drift(&self) -> f64 {
        let t0 = self.series[0].trace;
        self.series.iter().map(|r| (r.trace - t0).abs()).fold(0.0, f64::max)
    }
}

/// Classic RK4, with a Strang split of the unitary part when ‖K‖dt/ℏ > 0.1.
pub fn evolve(gen: &Generator, field: &OperatorField, opts: &EvolveOptions) -> Result<EvolveReport> {
    gen.check_field(field)?;
    if !(opts.t_final.is_finite() && opts.t_final >= 0.0) {
        return Err(CqError::InvalidParameter(format!("t_final = {}", opts.t_final)));
    }
    let stable = gen.stable_dt();
    let dt_max = match opts.dt {
        Some(dt) if !(dt.is_finite() && dt > 0.0) => {
            return Err(CqError::InvalidParameter(format!("dt = {dt}")));
        }
        Some(dt) if dt > stable * (1.0 + 1e-12) => {
            return Err(CqError::InvalidParameter(format!(
                "dt = {dt:.3e} exceeds the stability bound {stable:.3e}"
            )));
        }
        Some(dt) => dt,
        None => stable,
    };
    let interval = opts.observe_every.unwrap_or(opts.t_final);
    let n_obs = if opts.t_final == 0.0 {
        0
    } else {
        if !(interval.is_finite() && interval > 0.0) {
            return Err(CqError::InvalidParameter(format!("observe_every = {interval}")));
        }
        let n = (opts.t_final / interval).round();
        if (n * interval - opts.t_final).abs() > 1e-9 * opts.t_final.max(1.0) || n < 1.0 {
            return Err(CqError::InvalidParameter(
                "observe_every must divide t_final".into(),
            ));
        }
        n as usize
    };
    let per_obs = if n_obs == 0 { 0 } else { (interval / dt_max * (1.0 - 1e-12)).ceil().max(1.0) as usize };
    let h = if per_obs == 0 { 0.0 } else { interval / per_obs as f64 };
    let stepper = Stepper::new(gen, h);
    if let Some(dir) = &opts.snapshot_dir {
        std::fs::create_dir_all(dir)?;
    }
    let snap = |idx: usize, f: &OperatorField| -> Result<()> {
        if let Some(dir) = &opts.snapshot_dir {
            phase_space::write_snapshot(f, &dir.join(format!("snap_{idx:05}.cqf")))?;
        }
        Ok(())
    };
    let mut f = field.clone();
    let mut series = vec![ObserverRow::observe(gen, 0.0, &f)];
    snap(0, &f)?;
    let mut steps = 0;
    for o in 1..=n_obs {
        for _ in 0..per_obs {
            f = stepper.checked_step(&f, steps as f64 * h)?;
            steps += 1;
        }
        let row = ObserverRow::observe(gen, o as f64 * interval, &f);
        if row.support_leak > SUPPORT_LEAK_LIMIT {
            return Err(CqError::Unresolved(format!(
                "support leak {:.3e} at t = {:.4}",
                row.support_leak, row.t
            )));
        }
        series.push(row);
        snap(o, &f)?;
    }
    Ok(EvolveReport {
        field: f,
        series,
        steps,
        dt: h,
        split_step: stepper.half_u.is_some(),
    })
}

/// e^{L t} with the stable step, no observers.
pub fn propagate(gen: &Generator, field: &OperatorField, t: f64) -> Result<OperatorField> {
    if t == 0.0 {
        return Ok(field.clone());
    }
    let n = (t / gen.stable_dt() * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let stepper = Stepper::new(gen, t / n as f64);
    let mut f = field.clone();
    for k in 0..n {
        f = stepper.checked_step(&f, k as f64 * stepper.h)?;
    }
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    /// 𝓓 first, then e^{L^Q τ}
    Pre,
    /// 𝓓^½ e^{L^W τ} 𝓓^½ with L^W at O(ℏ⁰)
    Sym,
    /// e^{L^P τ} first, then 𝓓
    Post,
}

/// One step of the discrete channel at fixed τ, with ℏ = Eτ.
#[derive(Debug, Clone)]
pub struct TrotterChannel {
    pub tau: f64,
    pub ordering: Ordering,
    pub symbol: DiffusionSymbol,
    gen: Generator,
    a_q: f64,
    a_p: f64,
}

impl TrotterChannel {
    pub fn new(
        kind: &GeneratorKind,
        grid: &PhaseGrid,
        tau: f64,
        ordering: Ordering,
        symbol: DiffusionSymbol,
        policy: ExecPolicy,
    ) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(CqError::InvalidParameter(format!("tau = {tau}")));
        }
        let mut params = kind.params;
        params.hbar = params.e * tau;
        let tag = match ordering {
            Ordering::Pre => GeneratorTag::HusimiH0,
            Ordering::Sym => GeneratorTag::Qcle,
            Ordering::Post => GeneratorTag::GlauberH0,
        };
        if kind.h.h1().is_some() {
            log::warn!("H¹ is ignored inside the trotterized channel");
        }
        let h = kind.h.clone().without_h1();
        let inner = GeneratorKind::new(tag, params, h)?;
        let gen = Generator::build(&inner, grid, policy)?;
        let s2 = params.s * params.s;
        Ok(Self {
            tau,
            ordering,
            symbol,
            gen,
            a_q: tau * params.e * s2 / 2.0,
            a_p: tau * params.e / (2.0 * s2),
        })
    }

    fn smooth(&self, f: &OperatorField, frac: f64) -> Result<OperatorField> {
        heat_multiply(f, frac * self.a_q, frac * self.a_p, self.symbol, self.gen.policy)
    }

    pub fn step(&self, f: &OperatorField) -> Result<OperatorField> {
        match self.ordering {
            Ordering::Sym => {
                let x = self.smooth(f, 0.5)?;
                let y = propagate(&self.gen, &x, self.tau)?;
                self.smooth(&y, 0.5)
            }
            Ordering::Pre => {
                let x = self.smooth(f, 1.0)?;
                propagate(&self.gen, &x, self.tau)
            }
            Ordering::Post => {
                let x = propagate(&self.gen, f, self.tau)?;
                self.smooth(&x, 1.0)
            }
        }
    }
}

pub fn trotter_step(
    field: &OperatorField,
    tau: f64,
    kind: &GeneratorKind,
    ordering: Ordering,
) -> Result<OperatorField> {
    TrotterChannel::new(
        kind,
        &field.grid,
        tau,
        ordering,
        DiffusionSymbol::FiniteDifference,
        ExecPolicy::default(),
    )?
    .step(field)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub tau: f64,
    pub steps: usize,
    pub l1_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    pub ordering: Ordering,
    pub rows: Vec<ConvergenceRow>,
    /// least-squares slope of ln(error) against ln(τ)
    pub slope: f64,
    /// no error rises by more than 20% as τ decreases
    pub monotone: bool,
}

impl ConvergenceStudy {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,steps,l1_error\n");
        for r in &self.rows {
            s.push_str(&format!("{:.10e},{},{:.12e}\n", r.tau, r.steps, r.l1_error));
        }
        s
    }
}

pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// L1 distance between τ-step channel iterates and main_cq evolution at ℏ = Eτ.
pub fn convergence_study(
    kind: &GeneratorKind,
    field: &OperatorField,
    t: f64,
    taus: &[f64],
    ordering: Ordering,
    policy: ExecPolicy,
) -> Result<ConvergenceStudy> {
    if taus.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CqError::InvalidParameter("tau values must decrease".into()));
    }
    let mut rows = Vec::new();
    for &tau in taus {
        let n = (t / tau).round() as usize;
        if n == 0 || ((n as f64) * tau - t).abs() > 1e-9 * t {
            return Err(CqError::InvalidParameter(format!("tau = {tau} does not divide t = {t}")));
        }
        let ch = TrotterChannel::new(kind, &field.grid, tau, ordering, DiffusionSymbol::FiniteDifference, policy)?;
        let mut f = field.clone();
        for _ in 0..n {
            f = ch.step(&f)?;
        }
        let mut params = kind.params;
        params.hbar = params.e * tau;
        let main = GeneratorKind {
            tag: GeneratorTag::MainCq,
            params,
            h: kind.h.clone(),
            heff: kind.heff,
        };
        let gen = Generator::build(&main, &field.grid, policy)?;
        let dt = gen.stable_dt().min(tau);
        let reference = evolve(
            &gen,
            field,
            &EvolveOptions {
                t_final: t,
                dt: Some(dt),
                ..Default::default()
            },
        )?;
        rows.push(ConvergenceRow {
            tau,
            steps: n,
            l1_error: f.l1_distance(&reference.field)?,
        });
    }
    let tx: Vec<f64> = rows.iter().map(|r| r.tau).collect();
    let ey: Vec<f64> = rows.iter().map(|r| r.l1_error.max(f64::MIN_POSITIVE)).collect();
    let slope = if rows.len() >= 2 { log_log_slope(&tx, &ey) } else { f64::NAN };
    let monotone = ey.windows(2).all(|w| w[1] <= 1.2 * w[0]);
    Ok(ConvergenceStudy {
        ordering,
        rows,
        slope,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cq_hamiltonian::ModelKind;
    use crate::operator_algebra::{pauli_x, pauli_z, StateVec};
    use crate::phase_space::{coherent_product_state, Representation};

    fn params() -> ModelParams {
        ModelParams::default()
    }

    fn kind(tag: GeneratorTag, model: ModelKind, p: &ModelParams) -> GeneratorKind {
        GeneratorKind::new(tag, *p, CqHamiltonian::builtin(model, p).unwrap()).unwrap()
    }

    fn smooth_field(grid: PhaseGrid, d: usize, seed: u64) -> OperatorField {
        // Hermitian, smooth and periodic on the grid window
        let lq = grid.q_max - grid.q_min;
        let lp = grid.p_max - grid.p_min;
        let tau = std::f64::consts::TAU;
        let ph = seed as f64 * 0.37;
        OperatorField::from_fn(grid, d, Representation::W, |q, p| {
            let x = tau * (q - grid.q_min) / lq;
            let y = tau * (p - grid.p_min) / lp;
            oa::symmetrize(&Op::from_fn(d, d, |a, b| {
                let base = (x + ph + a as f64).sin() * (y - ph + b as f64).cos() + 1.5;
                let im = if a == b { 0.0 } else { 0.3 * (x * (a + 1) as f64 - y + ph).sin() };
                let sgn = if a < b { 1.0 } else { -1.0 };
                c(base + (a + b) as f64 * 0.1 * (x + y).cos(), sgn * im)
            }))
        })
    }

    fn max_diff(a: &OperatorField, b: &OperatorField) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    fn grid(n: usize, half: f64) -> PhaseGrid {
        PhaseGrid::periodic_square(half, n).unwrap()
    }

    fn qubit_state(g: &PhaseGrid, p: &ModelParams, q0: f64, p0: f64) -> OperatorField {
        let psi = StateVec::from_vec(vec![c(0.4f64.cos(), 0.0), c(0.4f64.sin(), 0.0)]);
        coherent_product_state(g, q0, p0, p.hbar, p.s, &psi).unwrap()
    }

    #[test]
    fn tag_validation() {
        let p = params();
        let qt = CqHamiltonian::builtin(ModelKind::QubitTransverse, &p).unwrap();
        assert!(GeneratorKind::new(GeneratorTag::SelfCommuting, p, qt.clone()).is_err());
        assert!(GeneratorKind::new(GeneratorTag::FokkerPlanck, p, qt.clone()).is_err());
        assert!(GeneratorKind::new(GeneratorTag::MainCq, p, qt).is_ok());
        let mut bad = p;
        bad.e = -1.0;
        let ss = CqHamiltonian::builtin(ModelKind::SingleSystem, &p).unwrap();
        assert!(GeneratorKind::new(GeneratorTag::MainCq, bad, ss).is_err());
        let names: Vec<_> = GeneratorTag::ALL.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
        assert_eq!(names[0], "\"main_cq\"");
        assert_eq!(names[6], "\"fokker_planck\"");
    }

    #[test]
    fn main_cq_matches_fokker_planck_on_single_system() {
        let mut p = params();
        p.omega = 0.7;
        p.s = 1.3;
        p.e = 0.8;
        p.dim = 1;
        let g = grid(32, 6.0);
        let main = Generator::build(&kind(GeneratorTag::MainCq, ModelKind::SingleSystem, &p), &g, ExecPolicy::default()).unwrap();
        let fp = Generator::build(&kind(GeneratorTag::FokkerPlanck, ModelKind::SingleSystem, &p), &g, ExecPolicy::default()).unwrap();
        let f = smooth_field(g, 1, 3);
        let a = main.apply_raw(&f, true).unwrap();
        let b = fp.apply_raw(&f, true).unwrap();
        assert!(max_diff(&a, &b) < 1e-8, "{}", max_diff(&a, &b));
    }

    #[test]
    fn main_cq_matches_reduced_form_on_self_commuting_qubit() {
        let mut p = params();
        p.g = 0.8;
        p.s = 0.9;
        p.e = 1.7;
        let g = grid(32, 5.0);
        let main = Generator::build(&kind(GeneratorTag::MainCq, ModelKind::QubitLinear, &p), &g, ExecPolicy::default()).unwrap();
        let red = Generator::build(&kind(GeneratorTag::SelfCommuting, ModelKind::QubitLinear, &p), &g, ExecPolicy::default()).unwrap();
        let f = smooth_field(g, 2, 5);
        let a = main.apply_raw(&f, true).unwrap();
        let b = red.apply_raw(&f, true).unwrap();
        assert!(max_diff(&a, &b) < 1e-8, "{}", max_diff(&a, &b));
    }

    #[test]
    fn husimi_glauber_average_is_qcle() {
        let p = params();
        let g = grid(24, 4.0);
        let f = smooth_field(g, 2, 1);
        let run = |t| {
            Generator::build(&kind(t, ModelKind::QubitTransverse, &p), &g, ExecPolicy::default())
                .unwrap()
                .apply_raw(&f, true)
                .unwrap()
        };
        let mut avg = run(GeneratorTag::HusimiH0);
        avg.axpy(c(1.0, 0.0), &run(GeneratorTag::GlauberH0)).unwrap();
        let avg = avg.scaled(c(0.5, 0.0));
        assert!(max_diff(&avg, &run(GeneratorTag::Qcle)) < 1e-12);
    }

    #[test]
    fn generators_preserve_trace() {
        let p = params();
        let g = grid(32, 6.0);
        let f = smooth_field(g, 2, 2);
        for tag in [GeneratorTag::MainCq, GeneratorTag::Qcle, GeneratorTag::GlauberH0] {
            let gen = Generator::build(&kind(tag, ModelKind::QubitTransverse, &p), &g, ExecPolicy::default()).unwrap();
            let out = gen.apply_raw(&f, true).unwrap();
            if tag == GeneratorTag::MainCq {
                assert!(out.total_trace().abs() < 1e-8, "{}", out.total_trace());
            } else {
                // product-rule forms are trace-free only to discretization error here
                assert!(out.total_trace().abs() < 1e-2);
            }
        }
    }

    #[test]
    fn apply_refuses_leaking_fields() {
        let p = params();
        let g = grid(16, 4.0);
        let gen = Generator::build(&kind(GeneratorTag::Qcle, ModelKind::QubitTransverse, &p), &g, ExecPolicy::default()).unwrap();
        let f = smooth_field(g, 2, 0);
        assert!(matches!(apply_generator(&gen, &f), Err(CqError::Unresolved(_))));
    }

    #[test]
    fn liouville_free_particle_translates() {
        let mut p = params();
        p.m_c = 2.0;
        p.dim = 1;
        let g = grid(64, 8.0);
        let gen = Generator::build(&kind(GeneratorTag::Liouville, ModelKind::SingleSystem, &p), &g, ExecPolicy::default()).unwrap();
        let psi = StateVec::from_vec(vec![c(1.0, 0.0)]);
        let f = coherent_product_state(&g, -1.0, 1.0, 1.0, 1.0, &psi).unwrap();
        let rep = evolve(&gen, &f, &EvolveOptions { t_final: 1.0, observe_every: Some(0.5), ..Default::default() }).unwrap();
        assert_eq!(rep.series.len(), 3);
        for r in &rep.series {
            assert!((r.mean_q - (-1.0 + 0.5 * r.t)).abs() < 1e-6, "{} {}", r.t, r.mean_q);
            assert!((r.trace - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fokker_planck_variance_law() {
        let mut p = params();
        p.dim = 1;
        p.e = 0.5;
        p.s = 1.2;
        let g = grid(64, 8.0);
        let gen = Generator::build(&kind(GeneratorTag::FokkerPlanck, ModelKind::SingleSystem, &p), &g, ExecPolicy::default()).unwrap();
        let psi = StateVec::from_vec(vec![c(1.0, 0.0)]);
        let f = coherent_product_state(&g, 0.0, 0.0, 1.0, 1.0, &psi).unwrap();
        let rep = evolve(&gen, &f, &EvolveOptions { t_final: 1.0, ..Default::default() }).unwrap();
        let (a, b) = (&rep.series[0], &rep.series[1]);
        let want = a.var_p + p.e / (p.s * p.s);
        assert!((b.var_p - want).abs() < 1e-3 * want, "{} vs {want}", b.var_p);
        let want_q = a.var_q + p.e * p.s * p.s + 0.0 * a.var_q;
        // q picks up ballistic spreading as well: Var_q + 2t Cov + t² Var_p/m² on top of diffusion
        assert!(b.var_q > want_q);
    }

    #[test]
    fn liouville_oscillator_period_and_energy() {
        let mut p = params();
        p.dim = 1;
        p.omega = 1.0;
        let period = std::f64::consts::TAU;
        let run = |n: usize| {
            let g = grid(n, 7.0);
            let gen = Generator::build(&kind(GeneratorTag::Liouville, ModelKind::SingleSystem, &p), &g, ExecPolicy::default()).unwrap();
            let psi = StateVec::from_vec(vec![c(1.0, 0.0)]);
            let f = coherent_product_state(&g, 1.2, 0.0, 1.0, 1.0, &psi).unwrap();
            let rep = evolve(&gen, &f, &EvolveOptions { t_final: period, observe_every: Some(period / 4.0), ..Default::default() }).unwrap();
            (f.l1_distance(&rep.field).unwrap(), rep)
        };
        let (coarse, _) = run(72);
        let (fine, rep) = run(144);
        // second-order stencils: the return error shrinks ~4x per refinement
        assert!(coarse / fine > 3.0, "{coarse} -> {fine}");
        let e0 = rep.series[0].energy;
        for r in &rep.series {
            assert!((r.energy - e0).abs() < 1e-4 * e0.abs(), "{} {}", r.energy, e0);
        }
        assert!((rep.series[2].mean_q + 1.2).abs() < 1e-2);
    }

    #[test]
    fn instability_and_bound_are_enforced() {
        let p = params();
        let g = grid(48, 6.0);
        let gen = Generator::build(&kind(GeneratorTag::MainCq, ModelKind::QubitTransverse, &p), &g, ExecPolicy::default()).unwrap();
        let f = qubit_state(&g, &p, 0.0, 0.0);
        let too_big = gen.stable_dt() * 2.0;
        let opts = EvolveOptions { t_final: 1.0, dt: Some(too_big), ..Default::default() };
        assert!(matches!(evolve(&gen, &f, &opts), Err(CqError::InvalidParameter(_))));
        // a step far beyond the bound blows up and is caught
        let stepper = Stepper::new(&gen, 50.0 * gen.stable_dt());
        let mut x = f.clone();
        let mut caught = false;
        for k in 0..20 {
            match stepper.checked_step(&x, k as f64) {
                Ok(n) => x = n,
                Err(CqError::Instability(_)) => {
                    caught = true;
                    break;
                }
                Err(e) => panic!("{e}"),
            }
        }
        assert!(caught);
    }

    #[test]
    fn split_step_agrees_with_plain_rk4() {
        let mut p = params();
        p.hbar = 0.5;
        let g = grid(48, 6.0);
        let gen = Generator::build(&kind(GeneratorTag::MainCq, ModelKind::QubitTransverse, &p), &g, ExecPolicy::default()).unwrap();
        let f = qubit_state(&g, &p, 0.0, 0.0);
        let h = 0.5 * gen.stable_dt();
        let plain = Stepper { gen: &gen, h, half_u: None };
        let split = Stepper { gen: &gen, h, half_u: Some(gen.unitaries(h / 2.0)) };
        let (mut a, mut b) = (f.clone(), f.clone());
        for _ in 0..20 {
            a = plain.step(&a).unwrap();
            b = split.step(&b).unwrap();
        }
        let d = a.l1_distance(&b).unwrap();
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn main_cq_short_run_keeps_invariants() {
        let mut p = params();
        p.delta = 1.0;
        let g = grid(48, 7.0);
        let gen = Generator::build(&kind(GeneratorTag::MainCq, ModelKind::QubitTransverse, &p), &g, ExecPolicy::default()).unwrap();
        let f = qubit_state(&g, &p, 0.0, 0.5);
        let rep = evolve(&gen, &f, &EvolveOptions { t_final: 0.2, observe_every: Some(0.1), ..Default::default() }).unwrap();
        assert!(rep.trace_drift() < 1e-6);
        for r in &rep.series {
            assert!(r.max_anti_hermitian < 1e-9);
            assert!(r.min_eig >= -1e-4 * r.peak_density);
        }
        let sz = rep.series[2].quantum_expectation(&pauli_z());
        assert!(sz < rep.series[0].quantum_expectation(&pauli_z()));
        let _ = pauli_x();
    }

    #[test]
    fn observers_csv_layout() {
        let p = params();
        let g = grid(48, 6.0);
        let gen = Generator::build(&kind(GeneratorTag::Qcle, ModelKind::QubitTransverse, &p), &g, ExecPolicy::default()).unwrap();
        let f = qubit_state(&g, &p, 0.0, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let rep = evolve(
            &gen,
            &f,
            &EvolveOptions {
                t_final: 0.1,
                observe_every: Some(0.05),
                snapshot_dir: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
        let csv = observers_to_csv(&rep.series);
        assert_eq!(csv.lines().next().unwrap(), OBSERVER_CSV_HEADER);
        assert_eq!(csv.lines().count(), 4);
        assert!(dir.path().join("snap_00002.cqf").exists());
        let bad = EvolveOptions { t_final: 0.1, observe_every: Some(0.03), ..Default::default() };
        assert!(evolve(&gen, &f, &bad).is_err());
    }

    #[test]
    fn policies_agree_bitwise() {
        let p = params();
        let g = grid(16, 4.0);
        let k = kind(GeneratorTag::MainCq, ModelKind::QubitTransverse, &p);
        let f = smooth_field(g, 2, 4);
        let a = Generator::build(&k, &g, ExecPolicy::Sequential).unwrap().apply_raw(&f, true).unwrap();
        let b = Generator::build(&k, &g, ExecPolicy::default()).unwrap().apply_raw(&f, true).unwrap();
        assert_eq!(a.data, b.data);
    }

    fn free_particle() -> (GeneratorKind, OperatorField) {
        let mut p = params();
        p.dim = 1;
        let g = grid(64, 10.0);
        let k = kind(GeneratorTag::MainCq, ModelKind::SingleSystem, &p);
        let psi = StateVec::from_vec(vec![c(1.0, 0.0)]);
        let f = coherent_product_state(&g, -0.5, 1.0, 1.0, 1.0, &psi).unwrap();
        (k, f)
    }

    #[test]
    fn trotter_pure_diffusion_when_h_vanishes() {
        let p = ModelParams { dim: 1, ..params() };
        let h = CqHamiltonian::from_fn(1, "zero", |_, _| oa::zeros(1));
        let k = GeneratorKind::new(GeneratorTag::MainCq, p, h).unwrap();
        let g = grid(48, 8.0);
        let psi = StateVec::from_vec(vec![c(1.0, 0.0)]);
        let f = coherent_product_state(&g, 0.0, 0.0, 1.0, 1.0, &psi).unwrap();
        let tau = 0.125;
        let ch = TrotterChannel::new(&k, &g, tau, Ordering::Sym, DiffusionSymbol::FiniteDifference, ExecPolicy::default()).unwrap();
        let mut x = f.clone();
        for _ in 0..8 {
            x = ch.step(&x).unwrap();
        }
        let d0 = diagnostics(&f);
        let d1 = diagnostics(&x);
        // variance rate E s² in q, E/s² in p, up to the O(h²) stencil symbol
        assert!((d1.var_q - d0.var_q - p.e * p.s * p.s).abs() < 1e-2);
        assert!((d1.var_p - d0.var_p - p.e / (p.s * p.s)).abs() < 1e-2);
        let study = convergence_study(&k, &f, 1.0, &[0.25, 0.125], Ordering::Sym, ExecPolicy::default()).unwrap();
        assert!(study.rows.iter().all(|r| r.l1_error < 1e-6), "{:?}", study.rows);
    }

    #[test]
    fn trotter_orderings_converge() {
        let (k, f) = free_particle();
        let taus = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0];
        let sym = convergence_study(&k, &f, 1.0, &taus, Ordering::Sym, ExecPolicy::default()).unwrap();
        let pre = convergence_study(&k, &f, 1.0, &taus, Ordering::Pre, ExecPolicy::default()).unwrap();
        assert!(sym.monotone && pre.monotone);
        assert!(sym.slope > 1.8, "sym slope {}", sym.slope);
        assert!(pre.slope > 0.8 && pre.slope < 1.3, "pre slope {}", pre.slope);
        assert_eq!(sym.to_csv().lines().count(), 4);
    }

    #[test]
    fn orderings_differ_at_second_order_per_step() {
        let (k, f) = free_particle();
        let diff = |tau: f64| {
            let a = TrotterChannel::new(&k, &f.grid, tau, Ordering::Pre, DiffusionSymbol::FiniteDifference, ExecPolicy::default()).unwrap();
            let b = TrotterChannel::new(&k, &f.grid, tau, Ordering::Post, DiffusionSymbol::FiniteDifference, ExecPolicy::default()).unwrap();
            a.step(&f).unwrap().l1_distance(&b.step(&f).unwrap()).unwrap()
        };
        let ratio = diff(0.1) / diff(0.05);
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn slope_fit() {
        let x = [1.0, 0.5, 0.25];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v * v).collect();
        assert!((log_log_slope(&x, &y) - 2.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]
            #[test]
            fn main_cq_is_trace_free_and_hermitian(seed in 0u64..1000, e in 0.3f64..3.0, s in 0.5f64..2.0) {
                let p = ModelParams { e, s, ..params() };
                let g = grid(24, 5.0);
                let gen = Generator::build(&kind(GeneratorTag::MainCq, ModelKind::QubitTransverse, &p), &g, ExecPolicy::Sequential).unwrap();
                let out = gen.apply_raw(&smooth_field(g, 2, seed), true).unwrap();
                prop_assert!(out.total_trace().abs() < 1e-8);
                prop_assert!(out.max_anti_hermitian() < 1e-10);
            }

            #[test]
            fn husimi_glauber_average_is_qcle_pointwise(seed in 0u64..1000, gq in -1.5f64..1.5, s in 0.5f64..2.0) {
                let p = ModelParams { g: gq, s, ..params() };
                let g = grid(16, 4.0);
                let f = smooth_field(g, 2, seed);
                let run = |t| {
                    Generator::build(&kind(t, ModelKind::QubitTransverse, &p), &g, ExecPolicy::Sequential)
                        .unwrap()
                        .apply_raw(&f, true)
                        .unwrap()
                };
                let mut avg = run(GeneratorTag::HusimiH0);
                avg.axpy(c(1.0, 0.0), &run(GeneratorTag::GlauberH0)).unwrap();
                prop_assert!(max_diff(&avg.scaled(c(0.5, 0.0)), &run(GeneratorTag::Qcle)) < 1e-12);
            }
        }
    }
}
