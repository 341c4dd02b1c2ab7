//! The completely positive classical-quantum generator: C_nm coefficients,
//! Lindblad operators, effective Hamiltonian, D-matrices and their positivity
//! conditions, plus closed forms for the coupled harmonic oscillators.

use nalgebra::{Matrix2, SymmetricEigen};
use num_complex::Complex64;
use serde::Serialize;

use crate::cq_hamiltonian::{Coord, CqHamiltonian, ModelParams};
use crate::error::{CqError, Result};
use crate::operator_algebra::{
    self as oa, c, frobenius, hermiticity_defect, herm_eigen, max_abs, minus_i_over, phi_of_ad, Op,
};

/// Largest n + m accepted by [`cnm`].
pub const CNM_MAX_ORDER: u32 = 40;

fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // exact: acc · (n − i) is divisible by (i + 1) at every step
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// C_nm = Σ_{r≤n} (r+m)!/(r!m!) − Σ_{r≤m} (r+n)!/(r!n!), exact.
pub fn cnm(n: u32, m: u32) -> Result<i64> {
    if n + m > CNM_MAX_ORDER {
        return Err(CqError::InvalidParameter(format!(
            "C_nm needs n + m <= {CNM_MAX_ORDER}, got {n} + {m}"
        )));
    }
    let (n, m) = (n as u64, m as u64);
    let a: u128 = (0..=n).map(|r| binomial(r + m, m)).sum();
    let b: u128 = (0..=m).map(|r| binomial(r + n, n)).sum();
    Ok(a as i64 - b as i64)
}

/// C_nm for 0 ≤ n, m and n + m ≤ n_max.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CnmTable {
    pub n_max: u32,
    values: Vec<Vec<i64>>,
}

impl CnmTable {
    pub fn new(n_max: u32) -> Result<Self> {
        if n_max > CNM_MAX_ORDER {
            return Err(CqError::InvalidParameter(format!(
                "C_nm table order {n_max} exceeds {CNM_MAX_ORDER}"
            )));
        }
        let mut values = Vec::with_capacity(n_max as usize + 1);
        for n in 0..=n_max {
            let row = (0..=n_max - n).map(|m| cnm(n, m)).collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Ok(Self { n_max, values })
    }

    pub fn get(&self, n: u32, m: u32) -> Option<i64> {
        self.values.get(n as usize)?.get(m as usize).copied()
    }

    /// Triangle row k: C_{k,0}, C_{k−1,1}, …, C_{0,k}.
    pub fn row(&self, k: u32) -> Vec<i64> {
        (0..=k).map(|j| self.values[(k - j) as usize][j as usize]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,entries\n");
        for k in 0..=self.n_max {
            let r: Vec<String> = self.row(k).iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{k},{}\n", r.join(" ")));
        }
        s
    }
}

/// Breaches of antisymmetry, the boundary values C_{n,0} = n, C_{0,m} = −m and
/// the Pascal rule C_{n,m} = C_{n−1,m} + C_{n,m−1}, for n, m ≤ n_max.
pub fn cnm_rule_violations(n_max: u32) -> Result<Vec<String>> {
    if 2 * n_max > CNM_MAX_ORDER {
        return Err(CqError::InvalidParameter(format!(
            "rule check needs 2·n_max <= {CNM_MAX_ORDER}"
        )));
    }
    let mut out = Vec::new();
    for n in 0..=n_max {
        for m in 0..=n_max {
            let v = cnm(n, m)?;
            if v != -cnm(m, n)? {
                out.push(format!("C({n},{m}) = {v} breaks antisymmetry"));
            }
            if m == 0 && v != n as i64 {
                out.push(format!("C({n},0) = {v}, expected {n}"));
            }
            if n == 0 && v != -(m as i64) {
                out.push(format!("C(0,{m}) = {v}, expected -{m}"));
            }
            if n > 0 && m > 0 && v != cnm(n - 1, m)? + cnm(n, m - 1)? {
                out.push(format!("C({n},{m}) = {v} breaks the Pascal rule"));
            }
        }
    }
    Ok(out)
}

/// L_z = φ(ad_{−iH/E}) ∂H/∂z for z = q, p.
pub fn lindblad_ops(h: &CqHamiltonian, q: f64, p: f64, e: f64) -> Result<(Op, Op)> {
    if !(e.is_finite() && e > 0.0) {
        return Err(CqError::InvalidParameter(format!("E must be > 0, got {e}")));
    }
    let hm = h.eval(q, p)?;
    let scale = minus_i_over(e);
    let lq = phi_of_ad(&hm, &h.deriv(q, p, Coord::Q, 1)?, scale)?;
    let lp = phi_of_ad(&hm, &h.deriv(q, p, Coord::P, 1)?, scale)?;
    for (name, l) in [("L_q", &lq), ("L_p", &lp)] {
        let defect = hermiticity_defect(l);
        if defect > 1e-10 * max_abs(l).max(1.0) {
            return Err(CqError::Invariant(format!(
                "{name} not Hermitian at ({q}, {p}): defect {defect:.3e}"
            )));
        }
    }
    Ok((lq, lp))
}

/// How the coefficient series of the effective Hamiltonian is summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeffMethod {
    /// Shell-by-shell truncated double series.
    Series,
    /// Closed-form resummation in the eigenbasis of H.
    Spectral,
    /// Series, falling back to the resummation when the shells fail to converge
    /// or the adjoint norm makes the series hopeless.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeffOptions {
    pub n_max: usize,
    pub tol: f64,
    pub method: HeffMethod,
}

impl Default for HeffOptions {
    fn default() -> Self {
        Self {
            n_max: 30,
            tol: 1e-10,
            method: HeffMethod::Auto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeffResult {
    pub op: Op,
    /// False when the truncated series did not reach `tol` by `n_max`.
    pub converged: bool,
    pub method: HeffMethod,
    pub shells: usize,
}

/// Σ_{n+m≤N} C_nm/(n+m+2)! {ad^n A, ad^m B} with ad = ad_{−iH/E}.
/// Returns the sum, the number of shells used and whether the tolerance was met.
pub fn heff_series_sum(hm: &Op, a: &Op, b: &Op, e: f64, n_max: usize, tol: f64) -> Result<(Op, usize, bool)> {
    let scale = minus_i_over(e);
    let d = hm.nrows();
    let mut ads_a = vec![a.clone()];
    let mut ads_b = vec![b.clone()];
    let mut acc = oa::zeros(d);
    let mut fact = 2.0f64; // (k + 2)!
    for k in 0..=n_max {
        if k > 0 {
            let na = ads_a[k - 1].clone();
            let nb = ads_b[k - 1].clone();
            ads_a.push((hm * &na - &na * hm) * scale);
            ads_b.push((hm * &nb - &nb * hm) * scale);
            fact *= (k + 2) as f64;
        }
        let mut shell = oa::zeros(d);
        for n in 0..=k {
            let m = k - n;
            let coef = cnm(n as u32, m as u32)?;
            if coef == 0 {
                continue;
            }
            let (x, y) = (&ads_a[n], &ads_b[m]);
            shell += (x * y + y * x) * c(coef as f64 / fact, 0.0);
        }
        acc += &shell;
        let sn = frobenius(&shell);
        let an = frobenius(&acc);
        let exhausted = frobenius(&ads_a[k]) == 0.0 && frobenius(&ads_b[k]) == 0.0;
        if k >= 1 && (sn <= tol * an || exhausted) {
            return Ok((acc, k + 1, true));
        }
    }
    Ok((acc, n_max + 1, false))
}

fn exp_div1(u: Complex64, v: Complex64) -> Complex64 {
    // e[u, v] = e^{(u+v)/2} sinh(δ)/δ, δ = (v − u)/2
    let m = (u + v) * 0.5;
    let d = (v - u) * 0.5;
    let shc = if d.norm() < 1e-4 {
        let d2 = d * d;
        c(1.0, 0.0) + d2 / 6.0 + d2 * d2 / 120.0
    } else {
        d.sinh() / d
    };
    m.exp() * shc
}

/// Second divided difference of exp at three nodes.
pub fn exp_divided_difference(x: [Complex64; 3]) -> Complex64 {
    let pairs = [(0usize, 1usize, 2usize), (0, 2, 1), (1, 2, 0)];
    let (i, j, k) = pairs
        .into_iter()
        .max_by(|a, b| (x[a.0] - x[a.1]).norm().total_cmp(&(x[b.0] - x[b.1]).norm()))
        .unwrap();
    let span = x[j] - x[i];
    if span.norm() < 1e-2 {
        // all nodes clustered: expand about the centroid
        let m = (x[0] + x[1] + x[2]) / 3.0;
        let y = [x[0] - m, x[1] - m, x[2] - m];
        let mut sum = c(0.0, 0.0);
        let mut fact = 2.0f64;
        for deg in 0..7usize {
            if deg > 0 {
                fact *= (deg + 2) as f64;
            }
            let mut h = c(0.0, 0.0);
            for a in 0..=deg {
                for b in 0..=deg - a {
                    h += y[0].powu(a as u32) * y[1].powu(b as u32) * y[2].powu((deg - a - b) as u32);
                }
            }
            sum += h / fact;
        }
        m.exp() * sum
    } else {
        (exp_div1(x[k], x[j]) - exp_div1(x[i], x[k])) / span
    }
}

/// Generating function Σ C_nm xⁿ yᵐ/(n+m+2)! = e[0, x, x+y] − e[0, y, x+y].
pub fn cnm_generating(x: Complex64, y: Complex64) -> Complex64 {
    let zero = c(0.0, 0.0);
    exp_divided_difference([zero, x, x + y]) - exp_divided_difference([zero, y, x + y])
}

/// Resummed coefficient series in the eigenbasis of Hermitian H.
pub fn heff_spectral_sum(hm: &Op, a: &Op, b: &Op, e: f64) -> Op {
    let (lam, u) = herm_eigen(hm);
    let ud = u.adjoint();
    let at = &ud * a * &u;
    let bt = &ud * b * &u;
    let d = lam.len();
    let z = |i: usize, j: usize| c(0.0, -(lam[i] - lam[j]) / e);
    let mut g1 = vec![c(0.0, 0.0); d * d * d];
    let mut g2 = vec![c(0.0, 0.0); d * d * d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                g1[(i * d + j) * d + k] = cnm_generating(z(i, j), z(j, k));
                g2[(i * d + j) * d + k] = cnm_generating(z(j, k), z(i, j));
            }
        }
    }
    let mut s = oa::zeros(d);
    for i in 0..d {
        for k in 0..d {
            let mut acc = c(0.0, 0.0);
            for j in 0..d {
                let idx = (i * d + j) * d + k;
                acc += at[(i, j)] * bt[(j, k)] * g1[idx] + bt[(i, j)] * at[(j, k)] * g2[idx];
            }
            s[(i, k)] = acc;
        }
    }
    &u * s * ud
}

/// Effective Hamiltonian
/// (ℏs²/4)∂_qL_q + (ℏ/4s²)∂_pL_p + (ℏ/4E) Σ C_nm/(n+m+2)! {ad^n ∂_pH, ad^m ∂_qH}.
/// The L-derivatives are central differences of [`lindblad_ops`] with the Hamiltonian's fd step.
pub fn h_eff(
    h: &CqHamiltonian,
    q: f64,
    p: f64,
    e: f64,
    hbar: f64,
    s: f64,
    opts: &HeffOptions,
) -> Result<HeffResult> {
    for (name, v) in [("E", e), ("hbar", hbar), ("s", s)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(CqError::InvalidParameter(format!("{name} must be > 0, got {v}")));
        }
    }
    let hm = h.eval(q, p)?;
    let a = h.deriv(q, p, Coord::P, 1)?;
    let b = h.deriv(q, p, Coord::Q, 1)?;

    let fd = h.fd_step();
    let (lq_plus, _) = lindblad_ops(h, q + fd, p, e)?;
    let (lq_minus, _) = lindblad_ops(h, q - fd, p, e)?;
    let (_, lp_plus) = lindblad_ops(h, q, p + fd, e)?;
    let (_, lp_minus) = lindblad_ops(h, q, p - fd, e)?;
    let dlq = (lq_plus - lq_minus) * c(0.5 / fd, 0.0);
    let dlp = (lp_plus - lp_minus) * c(0.5 / fd, 0.0);

    let (sum, converged, method, shells) = match opts.method {
        HeffMethod::Spectral => (heff_spectral_sum(&hm, &a, &b, e), true, HeffMethod::Spectral, 0),
        HeffMethod::Series => {
            let (s, n, ok) = heff_series_sum(&hm, &a, &b, e, opts.n_max, opts.tol)?;
            (s, ok, HeffMethod::Series, n)
        }
        HeffMethod::Auto => {
            let (lam, _) = herm_eigen(&hm);
            let spread = (lam[lam.len() - 1] - lam[0]) / e;
            let series = if spread <= 4.0 {
                let (s, n, ok) = heff_series_sum(&hm, &a, &b, e, opts.n_max, opts.tol)?;
                ok.then_some((s, n))
            } else {
                None
            };
            match series {
                Some((s, n)) => (s, true, HeffMethod::Series, n),
                None => (heff_spectral_sum(&hm, &a, &b, e), true, HeffMethod::Spectral, 0),
            }
        }
    };
    let op = dlq * c(hbar * s * s / 4.0, 0.0) + dlp * c(hbar / (4.0 * s * s), 0.0)
        + sum * c(hbar / (4.0 * e), 0.0);
    let defect = hermiticity_defect(&op);
    if defect > 1e-10 * max_abs(&op).max(1.0) {
        return Err(CqError::Invariant(format!(
            "H_eff not Hermitian at ({q}, {p}): defect {defect:.3e}"
        )));
    }
    if !converged {
        log::warn!("H_eff series not converged at ({q}, {p}) after {shells} shells");
    }
    Ok(HeffResult {
        op,
        converged,
        method,
        shells,
    })
}

/// Decoherence D0, back-reaction D1 and diffusion D2. Rows of D1 index the
/// phase coordinate (q, p), columns the Lindblad operator (L_q, L_p).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DMatrices {
    pub d0: Matrix2<Complex64>,
    pub d1: Matrix2<Complex64>,
    pub d2: Matrix2<f64>,
}

pub fn d_matrices(e: f64, s: f64) -> Result<DMatrices> {
    if !(e.is_finite() && e > 0.0 && s.is_finite() && s > 0.0) {
        return Err(CqError::InvalidParameter(format!("E = {e}, s = {s} must be > 0")));
    }
    let s2 = s * s;
    Ok(DMatrices {
        d0: Matrix2::new(
            c(s2 / (2.0 * e), 0.0),
            c(0.0, -1.0 / (2.0 * e)),
            c(0.0, 1.0 / (2.0 * e)),
            c(1.0 / (2.0 * e * s2), 0.0),
        ),
        d1: Matrix2::new(c(0.0, s2 / 2.0), c(0.5, 0.0), c(-0.5, 0.0), c(0.0, 0.5 / s2)),
        d2: Matrix2::new(e * s2, 0.0, 0.0, e / s2),
    })
}

/// The matrices of the quantum-classical Liouville equation: D0 = 0, D1 = ½I, D2 = 0.
pub fn qcle_matrices() -> DMatrices {
    DMatrices {
        d0: Matrix2::zeros(),
        d1: Matrix2::identity() * c(0.5, 0.0),
        d2: Matrix2::zeros(),
    }
}

/// Moore-Penrose pseudoinverse of a real symmetric 2×2 matrix, dropping
/// eigenvalues below 1e−12 of the largest.
pub fn pinv_sym2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(*m);
    let vmax = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = Matrix2::zeros();
    for k in 0..2 {
        let v = eig.eigenvalues[k];
        if vmax > 0.0 && v.abs() > 1e-12 * vmax {
            let col = eig.eigenvectors.column(k);
            out += col * col.transpose() / v;
        }
    }
    out
}

fn min_eig_herm2(m: &Matrix2<Complex64>) -> f64 {
    // Hermitian part only; caller checks Hermiticity separately
    let a = m[(0, 0)].re;
    let d = m[(1, 1)].re;
    let b = (m[(0, 1)] + m[(1, 0)].conj()) * 0.5;
    let mean = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
    mean - rad
}

fn fro2(m: &Matrix2<Complex64>) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Positivity conditions of the classical-quantum Pawula theorem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TradeoffReport {
    pub d0_psd: bool,
    pub d2_psd: bool,
    pub range_condition: bool,
    pub tradeoff_holds: bool,
    pub saturated: bool,
    /// min eig(D0 − D1† D2⁺ D1)
    pub margin: f64,
    /// min eig(2D0 − D1† D2⁺ D1), the factor-2 convention
    pub margin_factor_two: f64,
    /// ‖D0 − D1† D2⁺ D1‖_F
    pub saturation_residual: f64,
    /// saturation_residual / (‖D0‖_F + ‖D1† D2⁺ D1‖_F)
    pub saturation_relative: f64,
    /// ‖(I − D2 D2⁺) D1‖_F
    pub range_residual: f64,
}

impl TradeoffReport {
    pub fn passes(&self) -> bool {
        self.d0_psd && self.d2_psd && self.range_condition && self.tradeoff_holds
    }
}

pub fn tradeoff_check(d: &DMatrices, tol: f64) -> TradeoffReport {
    let d0_herm = (d.d0 - d.d0.adjoint()).iter().all(|z| z.norm() <= tol);
    let d0_psd = d0_herm && min_eig_herm2(&d.d0) >= -tol;
    let d2_sym = (d.d2 - d.d2.transpose()).iter().all(|v| v.abs() <= tol);
    let d2_min = SymmetricEigen::new(d.d2).eigenvalues.min();
    let d2_psd = d2_sym && d2_min >= -tol;
    let pinv = pinv_sym2(&d.d2);
    let pinv_c = pinv.map(|v| c(v, 0.0));
    let d2_c = d.d2.map(|v| c(v, 0.0));
    let proj = Matrix2::<Complex64>::identity() - d2_c * pinv_c;
    let range_residual = fro2(&(proj * d.d1));
    let range_condition = range_residual <= tol;
    let back = d.d1.adjoint() * pinv_c * d.d1;
    let diff = d.d0 - back;
    let margin = min_eig_herm2(&diff);
    let margin_factor_two = min_eig_herm2(&(d.d0 * c(2.0, 0.0) - back));
    let saturation_residual = fro2(&diff);
    let scale = fro2(&d.d0) + fro2(&back);
    let saturation_relative = if scale > 0.0 {
        saturation_residual / scale
    } else {
        0.0
    };
    TradeoffReport {
        d0_psd,
        d2_psd,
        range_condition,
        tradeoff_holds: range_condition && margin >= -tol,
        saturated: saturation_residual <= tol,
        margin,
        margin_factor_two,
        saturation_residual,
        saturation_relative,
        range_residual,
    }
}

/// φ(ad_{−iH/E}) H¹, the operator whose commutator −i[·, ϱ] the O(ℏ) part of H adds.
pub fn h1_correction(h: &CqHamiltonian, q: f64, p: f64, e: f64) -> Result<Op> {
    let h1 = h
        .h1()
        .ok_or_else(|| CqError::InvalidParameter("Hamiltonian has no O(ħ) part".into()))?;
    if !(e.is_finite() && e > 0.0) {
        return Err(CqError::InvalidParameter(format!("E must be > 0, got {e}")));
    }
    let hm = h.eval(q, p)?;
    let out = phi_of_ad(&hm, h1, minus_i_over(e))?;
    if hermiticity_defect(&out) > 1e-10 * max_abs(&out).max(1.0) {
        return Err(CqError::Invariant("H¹ correction not Hermitian".into()));
    }
    Ok(out)
}

/// Lindblad operators and effective Hamiltonian of the coupled oscillators.
#[derive(Debug, Clone)]
pub struct HoClosedForms {
    pub lq: Op,
    pub lp: Op,
    pub h_eff: Op,
}

/// Dimensionless argument √λ ℏ/(E √m_Q) of the published closed forms.
pub fn ho_argument(params: &ModelParams) -> f64 {
    params.lambda.sqrt() * params.hbar / (params.e * params.m_q.sqrt())
}

/// The closed forms as printed for H = p²/2m_C + P²/2m_Q + λ(q − Q)².
pub fn ho_closed_forms(params: &ModelParams, q: f64, p: f64, q_op: &Op, p_op: &Op) -> HoClosedForms {
    let (e, hbar, lam, mq, mc) = (params.e, params.hbar, params.lambda, params.m_q, params.m_c);
    let n = q_op.nrows();
    let x = ho_argument(params);
    let xq = oa::identity(n) * c(q, 0.0) - q_op;
    let lq = (&xq * c(2.0 * (lam * mq).sqrt() * x.sin(), 0.0) + p_op * c(1.0 - x.cos(), 0.0))
        * c(e / hbar, 0.0);
    let lp = oa::identity(n) * c(p / mc, 0.0);
    // log(1 + ix) + log(1 − ix), kept complex as printed
    let logs = (c(1.0, x)).ln() + (c(1.0, -x)).ln();
    let denom = e * e * mq + lam * hbar * hbar;
    let coef_x = (logs / (lam * hbar * hbar) - 1.0 / denom) * (-2.0 * e * e * lam * mq);
    let coef_p = -e
        * (lam.sqrt() * hbar * (2.0 * e * e * mq + lam * hbar * hbar) / denom
            - 2.0 * e * mq.sqrt() * x.atan())
        / (lam.sqrt() * hbar * hbar);
    let h_eff = &xq * coef_x + p_op * c(coef_p, 0.0);
    HoClosedForms { lq, lp, h_eff }
}

/// Closed forms obtained by summing the adjoint series exactly on span{I, q − Q, P}.
/// With ω = ℏ√(2λ/m_Q)/E:
/// L_q = (E/ℏ)[√(2λm_Q) sin ω (q − Q) + (1 − cos ω) P].
pub fn ho_closed_forms_exact(
    params: &ModelParams,
    q: f64,
    p: f64,
    q_op: &Op,
    p_op: &Op,
) -> HoClosedForms {
    let (e, hbar, lam, mq, mc, s) = (
        params.e,
        params.hbar,
        params.lambda,
        params.m_q,
        params.m_c,
        params.s,
    );
    let n = q_op.nrows();
    let w = hbar * (2.0 * lam / mq).sqrt() / e;
    let xq = oa::identity(n) * c(q, 0.0) - q_op;
    let amp = (2.0 * lam * mq).sqrt() * w.sin();
    let lq = (&xq * c(amp, 0.0) + p_op * c(1.0 - w.cos(), 0.0)) * c(e / hbar, 0.0);
    let lp = oa::identity(n) * c(p / mc, 0.0);
    // f(z) = Σ m zᵐ/(m+2)!, split into even and odd parts at z = ±iω
    let f = |z: Complex64| {
        if z.norm() < 1e-2 {
            let mut acc = c(0.0, 0.0);
            let mut fact = 2.0f64;
            for m in 1..12 {
                fact *= (m + 2) as f64;
                acc += z.powu(m) * (m as f64 / fact);
            }
            acc
        } else {
            ((z - 2.0) * (z.exp() - 1.0) + z * 2.0) / (z * z)
        }
    };
    let fa = f(c(0.0, w));
    let fb = f(c(0.0, -w));
    let even = ((fa + fb) * 0.5).re;
    let odd = if w.abs() < 1e-8 {
        // limit of (f(iω) − f(−iω))/(2iω) as ω → 0 is f'(0) = 1/6
        1.0 / 6.0
    } else {
        ((fa - fb) / c(0.0, 2.0 * w)).re
    };
    let a = hbar / (e * mq);
    let scalar = hbar * s * s / 4.0 * (e / hbar) * amp + hbar / (4.0 * s * s * mc);
    let h_eff = oa::identity(n) * c(scalar, 0.0)
        - (&xq * c(even, 0.0) + p_op * c(odd * a, 0.0)) * c(hbar * p * lam / (e * mc), 0.0);
    HoClosedForms { lq, lp, h_eff }
}

/// Everything the master equation and the unravelling need at one phase point.
#[derive(Debug, Clone)]
pub struct GeneratorData {
    pub point: (f64, f64),
    pub h: Op,
    pub lq: Op,
    pub lp: Op,
    pub h_eff: Op,
    /// φ(ad_{−iH/E})H¹ when the Hamiltonian carries an O(ℏ) part.
    pub h1_corr: Option<Op>,
    pub d: DMatrices,
    pub hbar: f64,
    pub e: f64,
    pub s: f64,
    pub heff_converged: bool,
}

impl GeneratorData {
    /// K such that the unitary part is −(i/ℏ)[K, ϱ]: H + H_eff + ℏ·φ(ad)H¹.
    pub fn unitary_part(&self) -> Op {
        let mut k = &self.h + &self.h_eff;
        if let Some(h1) = &self.h1_corr {
            k += h1 * c(self.hbar, 0.0);
        }
        k
    }

    /// Checks the invariants every assembled bundle must satisfy.
    pub fn check(&self) -> Result<()> {
        let report = tradeoff_check(&self.d, 1e-10);
        if !(report.d0_psd && report.d2_psd && report.margin >= -1e-10) {
            return Err(CqError::Invariant(format!("D-matrices fail positivity: {report:?}")));
        }
        let defect = hermiticity_defect(&self.h_eff);
        if defect > 1e-10 * max_abs(&self.h_eff).max(1.0) {
            return Err(CqError::Invariant(format!("H_eff defect {defect:.3e}")));
        }
        Ok(())
    }
}

pub fn assemble(
    h: &CqHamiltonian,
    params: &ModelParams,
    q: f64,
    p: f64,
    opts: &HeffOptions,
) -> Result<GeneratorData> {
    params.validate()?;
    let (lq, lp) = lindblad_ops(h, q, p, params.e)?;
    let heff = h_eff(h, q, p, params.e, params.hbar, params.s, opts)?;
    let h1_corr = match h.h1() {
        Some(_) => Some(h1_correction(h, q, p, params.e)?),
        None => None,
    };
    let data = GeneratorData {
        point: (q, p),
        h: h.eval(q, p)?,
        lq,
        lp,
        h_eff: heff.op,
        h1_corr,
        d: d_matrices(params.e, params.s)?,
        hbar: params.hbar,
        e: params.e,
        s: params.s,
        heff_converged: heff.converged,
    };
    data.check()?;
    Ok(data)
}
