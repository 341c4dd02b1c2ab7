//! Operator-valued fields on a phase-space grid: constructors, finite
//! differences, the Weierstrass (Gaussian) transform, a truncated Moyal star
//! product, diagnostics and snapshot I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::cq_hamiltonian::Coord;
use crate::error::{CqError, Result};
use crate::operator_algebra::{c, Op, StateVec};
use crate::par::{self, ExecPolicy};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Wrap-around; nodes at q_min + i·dq with dq = (q_max − q_min)/n_q.
    Periodic,
    /// Nodes include both ends, dq = (q_max − q_min)/(n_q − 1); one-sided stencils at the edges.
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseGrid {
    pub q_min: f64,
    pub q_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub n_q: usize,
    pub n_p: usize,
    #[serde(default = "default_boundary")]
    pub boundary: Boundary,
}

fn default_boundary() -> Boundary {
    Boundary::Periodic
}

impl PhaseGrid {
    pub fn new(q: (f64, f64), p: (f64, f64), n_q: usize, n_p: usize, boundary: Boundary) -> Result<Self> {
        let g = Self {
            q_min: q.0,
            q_max: q.1,
            p_min: p.0,
            p_max: p.1,
            n_q,
            n_p,
            boundary,
        };
        g.validate()?;
        Ok(g)
    }

    /// Square periodic grid [−half, half)².
    pub fn periodic_square(half: f64, n: usize) -> Result<Self> {
        Self::new((-half, half), (-half, half), n, n, Boundary::Periodic)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_q < 8 {
            v.push("n_q must be >= 8".into());
        }
        if self.n_p < 8 {
            v.push("n_p must be >= 8".into());
        }
        if !(self.q_min.is_finite() && self.q_max.is_finite() && self.q_max > self.q_min) {
            v.push("q_max must be > q_min".into());
        }
        if !(self.p_min.is_finite() && self.p_max.is_finite() && self.p_max > self.p_min) {
            v.push("p_max must be > p_min".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CqError::InvalidParameter(v.join("; ")))
        }
    }

    fn divisions(&self, n: usize) -> f64 {
        match self.boundary {
            Boundary::Periodic => n as f64,
            Boundary::Clamped => (n - 1) as f64,
        }
    }

    pub fn dq(&self) -> f64 {
        (self.q_max - self.q_min) / self.divisions(self.n_q)
    }

    pub fn dp(&self) -> f64 {
        (self.p_max - self.p_min) / self.divisions(self.n_p)
    }

    pub fn q(&self, i: usize) -> f64 {
        self.q_min + i as f64 * self.dq()
    }

    pub fn p(&self, j: usize) -> f64 {
        self.p_min + j as f64 * self.dp()
    }

    pub fn len(&self) -> usize {
        self.n_q * self.n_p
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.dq() * self.dp()
    }

    pub fn spacing(&self, which: Coord) -> f64 {
        match which {
            Coord::Q => self.dq(),
            Coord::P => self.dp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Representation {
    /// partial Wigner
    W,
    /// partial Glauber-Sudarshan
    P,
    /// partial Husimi
    Q,
    Unspecified,
}

/// One d×d operator per grid node, stored row-major as (i_q, j_p, row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorField {
    pub grid: PhaseGrid,
    pub d: usize,
    pub data: Vec<Complex64>,
    pub label: Representation,
}

impl OperatorField {
    pub fn zeros(grid: PhaseGrid, d: usize, label: Representation) -> Self {
        Self {
            grid,
            d,
            data: vec![ZERO; grid.len() * d * d],
            label,
        }
    }

    pub fn from_fn<F: Fn(f64, f64) -> Op>(grid: PhaseGrid, d: usize, label: Representation, f: F) -> Self {
        let mut out = Self::zeros(grid, d, label);
        for i in 0..grid.n_q {
            for j in 0..grid.n_p {
                let m = f(grid.q(i), grid.p(j));
                let blk = out.block_mut(i, j);
                for a in 0..d {
                    for b in 0..d {
                        blk[a * d + b] = m[(a, b)];
                    }
                }
            }
        }
        out
    }

    /// d = 1 field from a scalar function.
    pub fn scalar<F: Fn(f64, f64) -> f64>(grid: PhaseGrid, label: Representation, f: F) -> Self {
        let mut out = Self::zeros(grid, 1, label);
        for i in 0..grid.n_q {
            for j in 0..grid.n_p {
                out.data[i * grid.n_p + j] = c(f(grid.q(i), grid.p(j)), 0.0);
            }
        }
        out
    }

    pub fn block_len(&self) -> usize {
        self.d * self.d
    }

    pub fn offset(&self, i: usize, j: usize) -> usize {
        (i * self.grid.n_p + j) * self.d * self.d
    }

    pub fn block(&self, i: usize, j: usize) -> &[Complex64] {
        let o = self.offset(i, j);
        &self.data[o..o + self.d * self.d]
    }

    pub fn block_mut(&mut self, i: usize, j: usize) -> &mut [Complex64] {
        let o = self.offset(i, j);
        let n = self.d * self.d;
        &mut self.data[o..o + n]
    }

    pub fn op_at(&self, i: usize, j: usize) -> Op {
        Op::from_row_slice(self.d, self.d, self.block(i, j))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.grid == other.grid && self.d == other.d
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(CqError::DimensionMismatch("fields differ in grid or dimension".into()))
        }
    }

    /// self += a · x
    pub fn axpy(&mut self, a: Complex64, x: &Self) -> Result<()> {
        self.check_shape(x)?;
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn scaled(&self, a: Complex64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= a);
        out
    }

    /// Σ tr ϱ dq dp
    pub fn total_trace(&self) -> f64 {
        let dd = self.d * self.d;
        let mut t = 0.0;
        for blk in self.data.chunks(dd) {
            for a in 0..self.d {
                t += blk[a * self.d + a].re;
            }
        }
        t * self.grid.cell_area()
    }

    /// Integrated trace norm of the difference, Σ ‖a − b‖₁ dq dp.
    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        self.check_shape(other)?;
        let d = self.d;
        let dd = d * d;
        let mut acc = 0.0;
        for (x, y) in self.data.chunks(dd).zip(other.data.chunks(dd)) {
            let diff = Op::from_fn(d, d, |a, b| x[a * d + b] - y[a * d + b]);
            acc += trace_norm_herm(&diff);
        }
        Ok(acc * self.grid.cell_area())
    }

    /// Largest |ϱ − ϱ†| entry over the grid.
    pub fn max_anti_hermitian(&self) -> f64 {
        let d = self.d;
        let mut m: f64 = 0.0;
        for blk in self.data.chunks(d * d) {
            for a in 0..d {
                for b in a..d {
                    m = m.max((blk[a * d + b] - blk[b * d + a].conj()).norm());
                }
            }
        }
        m
    }
}

fn herm_eigs(m: &Op) -> Vec<f64> {
    let d = m.nrows();
    if d == 1 {
        return vec![m[(0, 0)].re];
    }
    if d == 2 {
        let a = m[(0, 0)].re;
        let dd = m[(1, 1)].re;
        let b = (m[(0, 1)] + m[(1, 0)].conj()) * 0.5;
        let mean = 0.5 * (a + dd);
        let rad = (0.25 * (a - dd) * (a - dd) + b.norm_sqr()).sqrt();
        return vec![mean - rad, mean + rad];
    }
    let h = (m + m.adjoint()) * c(0.5, 0.0);
    SymmetricEigen::new(h).eigenvalues.iter().cloned().collect()
}

fn trace_norm_herm(m: &Op) -> f64 {
    herm_eigs(m).iter().map(|v| v.abs()).sum()
}

/// Gaussian of variance ℏs²/2 in q and ℏ/2s² in p centred at (q0, p0), times |ψ⟩⟨ψ|.
pub fn coherent_product_state(
    grid: &PhaseGrid,
    q0: f64,
    p0: f64,
    hbar: f64,
    s: f64,
    psi: &StateVec,
) -> Result<OperatorField> {
    grid.validate()?;
    let vq = hbar * s * s / 2.0;
    let vp = hbar / (2.0 * s * s);
    let (wq, wp) = (vq.sqrt(), vp.sqrt());
    if wq < 2.0 * grid.dq() || wp < 2.0 * grid.dp() {
        return Err(CqError::Unresolved(format!(
            "Gaussian widths ({wq:.3e}, {wp:.3e}) below two grid spacings ({:.3e}, {:.3e})",
            grid.dq(),
            grid.dp()
        )));
    }
    let q_hi = grid.q(grid.n_q - 1);
    let p_hi = grid.p(grid.n_p - 1);
    if q0 - 4.0 * wq < grid.q_min || q0 + 4.0 * wq > q_hi || p0 - 4.0 * wp < grid.p_min || p0 + 4.0 * wp > p_hi {
        return Err(CqError::Unresolved(format!(
            "centre ({q0}, {p0}) is not four widths inside the grid"
        )));
    }
    let norm = psi.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(CqError::InvalidParameter("state vector has zero norm".into()));
    }
    let psi = psi / c(norm, 0.0);
    let proj = &psi * psi.adjoint();
    let d = psi.len();
    let mut out = OperatorField::zeros(*grid, d, Representation::W);
    let mut mass = 0.0;
    let mut weights = vec![0.0; grid.len()];
    for i in 0..grid.n_q {
        for j in 0..grid.n_p {
            let x = grid.q(i) - q0;
            let y = grid.p(j) - p0;
            let w = (-x * x / (2.0 * vq) - y * y / (2.0 * vp)).exp();
            weights[i * grid.n_p + j] = w;
            mass += w;
        }
    }
    mass *= grid.cell_area();
    for i in 0..grid.n_q {
        for j in 0..grid.n_p {
            let w = weights[i * grid.n_p + j] / mass;
            let blk = out.block_mut(i, j);
            for a in 0..d {
                for b in 0..d {
                    blk[a * d + b] = proj[(a, b)] * w;
                }
            }
        }
    }
    Ok(out)
}

/// Discrete symbol used for ∂² in Fourier space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionSymbol {
    /// exact −k²
    Spectral,
    /// −(2 − 2cos kh)/h², the eigenvalues of the three-point stencil
    FiniteDifference,
}

fn wavenumbers(n: usize, h: f64) -> Vec<f64> {
    let len = n as f64 * h;
    (0..n)
        .map(|k| {
            let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            2.0 * std::f64::consts::PI * f / len
        })
        .collect()
}

fn symbol(k: f64, h: f64, kind: DiffusionSymbol) -> f64 {
    match kind {
        DiffusionSymbol::Spectral => -k * k,
        DiffusionSymbol::FiniteDifference => -(2.0 - 2.0 * (k * h).cos()) / (h * h),
    }
}

/// Forward multipliers below this are treated as lost information on deconvolution.
pub const DECONVOLUTION_CUTOFF: f64 = 1e-8;
/// Largest spectral energy fraction a deconvolution may discard.
pub const DECONVOLUTION_MAX_LOSS: f64 = 1e-4;

/// 𝓓^α = exp(α[(ℏs²/2)∂²_q + (ℏ/2s²)∂²_p]) by Fourier multiplication, spectral symbol.
pub fn weierstrass(field: &OperatorField, alpha: f64, hbar: f64, s: f64) -> Result<OperatorField> {
    weierstrass_with(field, alpha, hbar, s, DiffusionSymbol::Spectral, ExecPolicy::default())
}

/// Gaussian smoothing with diffusion coefficients (a_q, a_p): exp(a_q ∂²_q + a_p ∂²_p).
/// Negative coefficients deconvolve with the spectral cutoff.
pub fn heat_multiply(
    field: &OperatorField,
    a_q: f64,
    a_p: f64,
    kind: DiffusionSymbol,
    policy: ExecPolicy,
) -> Result<OperatorField> {
    let g = field.grid;
    if g.boundary != Boundary::Periodic {
        return Err(CqError::Unsupported("Fourier smoothing needs a periodic grid".into()));
    }
    if !(a_q.is_finite() && a_p.is_finite()) {
        return Err(CqError::NonFinite("smoothing coefficients".into()));
    }
    if a_q == 0.0 && a_p == 0.0 {
        return Ok(field.clone());
    }
    let (nq, np) = (g.n_q, g.n_p);
    let kq = wavenumbers(nq, g.dq());
    let kp = wavenumbers(np, g.dp());
    let deconvolve = a_q < 0.0 || a_p < 0.0;
    let mut mult = vec![0.0; nq * np];
    let mut cut = vec![false; nq * np];
    for i in 0..nq {
        for j in 0..np {
            let expo = a_q * symbol(kq[i], g.dq(), kind) + a_p * symbol(kp[j], g.dp(), kind);
            if deconvolve && (-expo).exp() < DECONVOLUTION_CUTOFF {
                cut[i * np + j] = true;
            } else {
                mult[i * np + j] = expo.exp();
            }
        }
    }
    mult[0] = 1.0;
    let dd = field.d * field.d;
    let mut planner = FftPlanner::<f64>::new();
    let fq = planner.plan_fft_forward(nq);
    let fp = planner.plan_fft_forward(np);
    let iq = planner.plan_fft_inverse(nq);
    let ip = planner.plan_fft_inverse(np);
    let planes: Vec<Result<(Vec<Complex64>, f64, f64)>> = par::map_indices(policy, dd, |e| {
        let mut plane: Vec<Complex64> = (0..nq * np).map(|k| field.data[k * dd + e]).collect();
        fft2(&mut plane, nq, np, fp.as_ref(), fq.as_ref());
        let mut lost = 0.0;
        let mut total = 0.0;
        for (k, v) in plane.iter_mut().enumerate() {
            let en = v.norm_sqr();
            total += en;
            if cut[k] {
                lost += en;
                *v = ZERO;
            } else {
                *v *= mult[k];
            }
        }
        fft2(&mut plane, nq, np, ip.as_ref(), iq.as_ref());
        let inv = 1.0 / (nq * np) as f64;
        plane.iter_mut().for_each(|v| *v *= inv);
        Ok((plane, lost, total))
    });
    let mut out = OperatorField::zeros(g, field.d, field.label);
    let (mut lost, mut total) = (0.0, 0.0);
    for (e, res) in planes.into_iter().enumerate() {
        let (plane, l, t) = res?;
        lost += l;
        total += t;
        for (k, v) in plane.into_iter().enumerate() {
            out.data[k * dd + e] = v;
        }
    }
    if deconvolve && total > 0.0 && lost / total > DECONVOLUTION_MAX_LOSS {
        return Err(CqError::IllPosed(format!(
            "spectral energy beyond cutoff {:.3e} of total",
            lost / total
        )));
    }
    Ok(out)
}

pub fn weierstrass_with(
    field: &OperatorField,
    alpha: f64,
    hbar: f64,
    s: f64,
    kind: DiffusionSymbol,
    policy: ExecPolicy,
) -> Result<OperatorField> {
    if !alpha.is_finite() {
        return Err(CqError::NonFinite(format!("alpha = {alpha}")));
    }
    let mut out = heat_multiply(field, alpha * hbar * s * s / 2.0, alpha * hbar / (2.0 * s * s), kind, policy)?;
    out.label = match (field.label, alpha) {
        (Representation::P, a) if a == 0.5 => Representation::W,
        (Representation::W, a) if a == 0.5 => Representation::Q,
        (Representation::P, a) if a == 1.0 => Representation::Q,
        (Representation::Q, a) if a == -0.5 => Representation::W,
        (Representation::W, a) if a == -0.5 => Representation::P,
        (Representation::Q, a) if a == -1.0 => Representation::P,
        (l, a) if a == 0.0 => l,
        _ => Representation::Unspecified,
    };
    Ok(out)
}

fn fft2(
    plane: &mut [Complex64],
    nq: usize,
    np: usize,
    along_p: &dyn rustfft::Fft<f64>,
    along_q: &dyn rustfft::Fft<f64>,
) {
    for row in plane.chunks_mut(np) {
        along_p.process(row);
    }
    let mut col = vec![ZERO; nq];
    for j in 0..np {
        for i in 0..nq {
            col[i] = plane[i * np + j];
        }
        along_q.process(&mut col);
        for i in 0..nq {
            plane[i * np + j] = col[i];
        }
    }
}

/// Central-difference derivative of a block-valued array laid out like an
/// [`OperatorField`] with block length `bl`, written for node (i, j) into `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn stencil(
    src: &[Complex64],
    grid: &PhaseGrid,
    bl: usize,
    i: usize,
    j: usize,
    which: Coord,
    order: u8,
    out: &mut [Complex64],
) {
    let (n, pos) = match which {
        Coord::Q => (grid.n_q, i),
        Coord::P => (grid.n_p, j),
    };
    let h = grid.spacing(which);
    let at = |k: usize| -> usize {
        match which {
            Coord::Q => (k * grid.n_p + j) * bl,
            Coord::P => (i * grid.n_p + k) * bl,
        }
    };
    let periodic = grid.boundary == Boundary::Periodic;
    // (offset indices, weights) of the stencil
    let (idx, w): ([usize; 4], [f64; 4]) = if periodic || (pos > 0 && pos + 1 < n) {
        let m = if pos == 0 { n - 1 } else { pos - 1 };
        let p = if pos + 1 == n { 0 } else { pos + 1 };
        if order == 1 {
            ([m, p, pos, pos], [-0.5 / h, 0.5 / h, 0.0, 0.0])
        } else {
            ([m, pos, p, pos], [1.0 / (h * h), -2.0 / (h * h), 1.0 / (h * h), 0.0])
        }
    } else if pos == 0 {
        if order == 1 {
            ([0, 1, 2, 0], [-1.5 / h, 2.0 / h, -0.5 / h, 0.0])
        } else {
            let h2 = h * h;
            ([0, 1, 2, 3], [2.0 / h2, -5.0 / h2, 4.0 / h2, -1.0 / h2])
        }
    } else if order == 1 {
        ([n - 1, n - 2, n - 3, n - 1], [1.5 / h, -2.0 / h, 0.5 / h, 0.0])
    } else {
        let h2 = h * h;
        ([n - 1, n - 2, n - 3, n - 4], [2.0 / h2, -5.0 / h2, 4.0 / h2, -1.0 / h2])
    };
    out.iter_mut().for_each(|v| *v = ZERO);
    for (k, wk) in idx.iter().zip(w) {
        if wk == 0.0 {
            continue;
        }
        let base = at(*k);
        for e in 0..bl {
            out[e] += src[base + e] * wk;
        }
    }
}

/// Second-order central differences; one-sided second-order stencils at clamped edges.
pub fn fd_deriv(field: &OperatorField, which: Coord, order: u8) -> Result<OperatorField> {
    fd_deriv_with(field, which, order, ExecPolicy::default())
}

pub fn fd_deriv_with(field: &OperatorField, which: Coord, order: u8, policy: ExecPolicy) -> Result<OperatorField> {
    if order == 0 || order > 2 {
        return Err(CqError::Unsupported(format!("finite-difference order {order}")));
    }
    let bl = field.block_len();
    let g = field.grid;
    let mut out = OperatorField::zeros(g, field.d, field.label);
    par::for_each_chunk_mut(policy, &mut out.data, bl, |k, blk| {
        let (i, j) = (k / g.n_p, k % g.n_p);
        stencil(&field.data, &g, bl, i, j, which, order, blk);
    });
    Ok(out)
}

fn deriv_power(field: &OperatorField, which: Coord, n: usize) -> Result<OperatorField> {
    let mut out = field.clone();
    let mut left = n;
    while left >= 2 {
        out = fd_deriv(&out, which, 2)?;
        left -= 2;
    }
    if left == 1 {
        out = fd_deriv(&out, which, 1)?;
    }
    Ok(out)
}

/// Pointwise product, broadcasting d = 1 fields as scalars.
fn pointwise_product(f: &OperatorField, g: &OperatorField) -> Result<OperatorField> {
    if f.grid != g.grid {
        return Err(CqError::DimensionMismatch("fields on different grids".into()));
    }
    let d = f.d.max(g.d);
    if !(f.d == g.d || f.d == 1 || g.d == 1) {
        return Err(CqError::DimensionMismatch(format!("d = {} and d = {}", f.d, g.d)));
    }
    let mut out = OperatorField::zeros(f.grid, d, g.label);
    let dd = d * d;
    for k in 0..f.grid.len() {
        let o = &mut out.data[k * dd..(k + 1) * dd];
        if f.d == 1 {
            let s = f.data[k];
            for (x, y) in o.iter_mut().zip(&g.data[k * dd..(k + 1) * dd]) {
                *x = s * y;
            }
        } else if g.d == 1 {
            let s = g.data[k];
            for (x, y) in o.iter_mut().zip(&f.data[k * dd..(k + 1) * dd]) {
                *x = y * s;
            }
        } else {
            let a = &f.data[k * dd..(k + 1) * dd];
            let b = &g.data[k * dd..(k + 1) * dd];
            for r in 0..d {
                for cc in 0..d {
                    let mut acc = ZERO;
                    for m in 0..d {
                        acc += a[r * d + m] * b[m * d + cc];
                    }
                    o[r * d + cc] = acc;
                }
            }
        }
    }
    Ok(out)
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Largest supported Moyal truncation order.
pub const MOYAL_MAX_ORDER: usize = 4;

/// f ⋆ g truncated at order K:
/// Σ_k (iℏ/2)ᵏ/k! Σ_j C(k,j) (−1)ʲ (∂_q^{k−j}∂_p^j f)(∂_p^{k−j}∂_q^j g).
pub fn moyal_star(f: &OperatorField, g: &OperatorField, hbar: f64, k_max: usize) -> Result<OperatorField> {
    if k_max > MOYAL_MAX_ORDER {
        return Err(CqError::Unsupported(format!(
            "Moyal order {k_max} > {MOYAL_MAX_ORDER}"
        )));
    }
    let mut out = pointwise_product(f, g)?;
    let mut pref = c(1.0, 0.0);
    for k in 1..=k_max {
        pref = pref * c(0.0, hbar / 2.0) / k as f64;
        for j in 0..=k {
            let df = deriv_power(&deriv_power(f, Coord::Q, k - j)?, Coord::P, j)?;
            let dg = deriv_power(&deriv_power(g, Coord::P, k - j)?, Coord::Q, j)?;
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let term = pointwise_product(&df, &dg)?;
            out.axpy(pref * (sign * binom(k, j)), &term)?;
        }
    }
    Ok(out)
}

/// Summary statistics of a field.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub total_trace: f64,
    pub mean_q: f64,
    pub mean_p: f64,
    pub var_q: f64,
    pub var_p: f64,
    /// tr ϱ(q, p) per node, row-major
    #[serde(skip)]
    pub classical_marginal: Vec<f64>,
    #[serde(skip)]
    pub quantum_partial_state: Op,
    pub min_eigenvalue: f64,
    pub peak_density: f64,
    pub max_anti_hermitian: f64,
    /// tr(ρ_Q²) of the normalized partial state
    pub purity: f64,
    /// Some(true) when a P-labelled field is positive everywhere.
    pub effective_cq_state: Option<bool>,
}

pub fn diagnostics(field: &OperatorField) -> Diagnostics {
    let g = field.grid;
    let d = field.d;
    let dd = d * d;
    let area = g.cell_area();
    let mut marg = vec![0.0; g.len()];
    let mut partial = Op::zeros(d, d);
    let (mut t, mut mq, mut mp, mut sq, mut sp) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut min_eig = f64::INFINITY;
    let mut peak: f64 = 0.0;
    for i in 0..g.n_q {
        let q = g.q(i);
        for j in 0..g.n_p {
            let p = g.p(j);
            let k = i * g.n_p + j;
            let blk = &field.data[k * dd..(k + 1) * dd];
            let tr: f64 = (0..d).map(|a| blk[a * d + a].re).sum();
            marg[k] = tr;
            t += tr;
            mq += q * tr;
            mp += p * tr;
            sq += q * q * tr;
            sp += p * p * tr;
            peak = peak.max(tr.abs());
            let m = Op::from_row_slice(d, d, blk);
            partial += &m;
            let e = herm_eigs(&m);
            min_eig = min_eig.min(e.iter().cloned().fold(f64::INFINITY, f64::min));
        }
    }
    let total = t * area;
    partial *= c(area, 0.0);
    let (mean_q, mean_p) = (mq * area / total, mp * area / total);
    let var_q = sq * area / total - mean_q * mean_q;
    let var_p = sp * area / total - mean_p * mean_p;
    let rho = &partial / c(total, 0.0);
    let purity = (&rho * &rho).trace().re;
    let effective_cq_state = (field.label == Representation::P).then_some(min_eig >= 0.0);
    Diagnostics {
        total_trace: total,
        mean_q,
        mean_p,
        var_q,
        var_p,
        classical_marginal: marg,
        quantum_partial_state: partial,
        min_eigenvalue: min_eig,
        peak_density: peak,
        max_anti_hermitian: field.max_anti_hermitian(),
        purity,
        effective_cq_state,
    }
}

/// Above this boundary mass a field counts as leaking out of the window.
pub const SUPPORT_LEAK_LIMIT: f64 = 1e-6;

/// Integrated |tr ϱ| within `cells` nodes of any edge.
pub fn support_leak(field: &OperatorField, cells: usize) -> f64 {
    let g = field.grid;
    let d = field.d;
    let dd = d * d;
    let mut acc = 0.0;
    for i in 0..g.n_q {
        for j in 0..g.n_p {
            let edge = i < cells || j < cells || i + cells >= g.n_q || j + cells >= g.n_p;
            if edge {
                let blk = &field.data[(i * g.n_p + j) * dd..(i * g.n_p + j + 1) * dd];
                let tr: f64 = (0..d).map(|a| blk[a * d + a].re).sum();
                acc += tr.abs();
            }
        }
    }
    acc * g.cell_area()
}

const MAGIC: &[u8; 4] = b"CQF1";

/// Little-endian snapshot: "CQF1", n_q, n_p, d (u64), q_min, q_max, p_min, p_max (f64),
/// then row-major complex128 entries.
pub fn write_snapshot(field: &OperatorField, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for n in [field.grid.n_q, field.grid.n_p, field.d] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    let g = field.grid;
    for v in [g.q_min, g.q_max, g.p_min, g.p_max] {
        w.write_all(&v.to_le_bytes())?;
    }
    for z in &field.data {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a snapshot written by [`write_snapshot`]; the boundary is taken as given.
pub fn read_snapshot(path: &Path, boundary: Boundary) -> Result<OperatorField> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CqError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "not a CQF1 snapshot",
        )));
    }
    let mut b8 = [0u8; 8];
    let mut next_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let n_q = next_u64(&mut r)? as usize;
    let n_p = next_u64(&mut r)? as usize;
    let d = next_u64(&mut r)? as usize;
    let mut f = [0.0f64; 4];
    for v in f.iter_mut() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    let grid = PhaseGrid::new((f[0], f[1]), (f[2], f[3]), n_q, n_p, boundary)?;
    let mut out = OperatorField::zeros(grid, d, Representation::Unspecified);
    let mut buf = [0u8; 16];
    for z in out.data.iter_mut() {
        r.read_exact(&mut buf)?;
        let (re, im) = buf.split_at(8);
        *z = c(
            f64::from_le_bytes(re.try_into().unwrap()),
            f64::from_le_bytes(im.try_into().unwrap()),
        );
    }
    Ok(out)
}

/// CSV of tr ϱ(q, p): columns q, p, density.
pub fn write_marginal_csv(field: &OperatorField, path: &Path) -> Result<()> {
    let diag = diagnostics(field);
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "q,p,density")?;
    let g = field.grid;
    for i in 0..g.n_q {
        for j in 0..g.n_p {
            writeln!(w, "{:.12e},{:.12e},{:.12e}", g.q(i), g.p(j), diag.classical_marginal[i * g.n_p + j])?;
        }
    }
    w.flush()?;
    Ok(())
}
