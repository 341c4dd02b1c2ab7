//! Dense operators on the quantum subsystem and functions of the adjoint map.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{CqError, Result};

/// Dense complex d×d operator.
pub type Op = DMatrix<Complex64>;
/// Quantum state vector.
pub type StateVec = DVector<Complex64>;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn identity(d: usize) -> Op {
    Op::identity(d, d)
}

pub fn zeros(d: usize) -> Op {
    Op::zeros(d, d)
}

pub fn pauli_x() -> Op {
    Op::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)])
}

pub fn pauli_y() -> Op {
    Op::from_row_slice(2, 2, &[c(0., 0.), c(0., -1.), c(0., 1.), c(0., 0.)])
}

pub fn pauli_z() -> Op {
    Op::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.)])
}

pub fn max_abs(a: &Op) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn frobenius(a: &Op) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// max |A − A†|
pub fn hermiticity_defect(a: &Op) -> f64 {
    let n = a.nrows();
    let mut m: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            m = m.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    m
}

/// True when max |A − A†| ≤ rel_tol · max |A|.
pub fn is_hermitian(a: &Op, rel_tol: f64) -> bool {
    a.is_square() && hermiticity_defect(a) <= rel_tol * max_abs(a)
}

/// (A + A†)/2. Callers opt in; nothing in the crate symmetrizes silently.
pub fn symmetrize(a: &Op) -> Op {
    (a + a.adjoint()) * c(0.5, 0.0)
}

fn check_pair(a: &Op, b: &Op) -> Result<()> {
    if !a.is_square() || !b.is_square() || a.nrows() != b.nrows() {
        return Err(CqError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

pub fn commutator(a: &Op, b: &Op) -> Result<Op> {
    check_pair(a, b)?;
    Ok(a * b - b * a)
}

pub fn anticommutator(a: &Op, b: &Op) -> Result<Op> {
    check_pair(a, b)?;
    Ok(a * b + b * a)
}

/// Linear map on column-major vectorized d×d operators.
#[derive(Debug, Clone)]
pub struct Superoperator {
    entries: Op,
    dim: usize,
}

impl Superoperator {
    pub fn from_entries(entries: Op) -> Result<Self> {
        let n = entries.nrows();
        let dim = (n as f64).sqrt().round() as usize;
        if !entries.is_square() || dim * dim != n {
            return Err(CqError::DimensionMismatch(format!(
                "superoperator must be d²×d², got {}x{}",
                n,
                entries.ncols()
            )));
        }
        Ok(Self { entries, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &Op {
        &self.entries
    }

    pub fn apply(&self, y: &Op) -> Result<Op> {
        if y.nrows() != self.dim || y.ncols() != self.dim {
            return Err(CqError::DimensionMismatch(format!(
                "operand {}x{} for superoperator on d = {}",
                y.nrows(),
                y.ncols(),
                self.dim
            )));
        }
        let v = DVector::from_column_slice(y.as_slice());
        let w = &self.entries * v;
        Ok(Op::from_column_slice(self.dim, self.dim, w.as_slice()))
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        Self {
            entries: &self.entries * s,
            dim: self.dim,
        }
    }
}

/// ad_X as a d²×d² matrix: vec(XY − YX) = (I⊗X − Xᵀ⊗I) vec(Y).
pub fn ad_superoperator(x: &Op) -> Result<Superoperator> {
    if !x.is_square() {
        return Err(CqError::DimensionMismatch("ad of a non-square matrix".into()));
    }
    let d = x.nrows();
    let id = identity(d);
    let entries = id.kronecker(x) - x.transpose().kronecker(&id);
    Ok(Superoperator { entries, dim: d })
}

/// φ(z) = (e^z − 1)/z, with a Taylor branch near the removable singularity.
pub fn phi(z: Complex64) -> Complex64 {
    if z.norm() < 1e-3 {
        let z2 = z * z;
        c(1.0, 0.0) + z / 2.0 + z2 / 6.0 + z2 * z / 24.0 + z2 * z2 / 120.0
    } else {
        (z.exp() - 1.0) / z
    }
}

/// Eigen-decomposition of a Hermitian matrix: eigenvalues ascending with matching columns.
pub fn herm_eigen(a: &Op) -> (Vec<f64>, Op) {
    let eig = SymmetricEigen::new(a.clone());
    let mut idx: Vec<usize> = (0..a.nrows()).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Op::zeros(a.nrows(), a.ncols());
    for (k, &i) in idx.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(a: &Op) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(a));
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// φ(scale · ad_X) applied to Y.
///
/// Hermitian X goes through its own eigenbasis, where scale·ad_X is diagonal with
/// entries scale·(λ_i − λ_j). Anything else uses the exponential of the augmented
/// superoperator [[S, vec Y], [0, 0]], whose last column carries φ(S) vec Y.
pub fn phi_of_ad(x: &Op, y: &Op, scale: Complex64) -> Result<Op> {
    check_pair(x, y)?;
    if !scale.re.is_finite() || !scale.im.is_finite() {
        return Err(CqError::NonFinite(format!("phi_of_ad scale {scale}")));
    }
    if scale == Complex64::new(0.0, 0.0) {
        return Ok(y.clone());
    }
    let comm = x * y - y * x;
    if max_abs(&comm) <= 1e-14 * max_abs(x) * max_abs(y) {
        return Ok(y.clone());
    }
    if is_hermitian(x, 1e-12) {
        let (lam, u) = herm_eigen(x);
        let ud = u.adjoint();
        let mut yt = &ud * y * &u;
        let d = lam.len();
        for i in 0..d {
            for j in 0..d {
                yt[(i, j)] *= phi(scale * (lam[i] - lam[j]));
            }
        }
        Ok(&u * yt * ud)
    } else {
        phi_of_ad_augmented(x, y, scale)
    }
}

fn phi_of_ad_augmented(x: &Op, y: &Op, scale: Complex64) -> Result<Op> {
    let d = x.nrows();
    let s = ad_superoperator(x)?.scaled(scale);
    let n = d * d;
    let mut aug = Op::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(s.entries());
    for (k, v) in y.as_slice().iter().enumerate() {
        aug[(k, n)] = *v;
    }
    let e = aug.exp();
    let col: Vec<Complex64> = (0..n).map(|k| e[(k, n)]).collect();
    Ok(Op::from_column_slice(d, d, &col))
}

/// (scale · ad_X)ⁿ Y by repeated commutators.
pub fn ad_power_apply(x: &Op, y: &Op, n: usize, scale: Complex64) -> Result<Op> {
    check_pair(x, y)?;
    let mut out = y.clone();
    for _ in 0..n {
        out = (x * &out - &out * x) * scale;
    }
    Ok(out)
}

/// ψ†Aψ. A psi that is not unit-normalized to 1e-9 is used as given, with a warning.
pub fn expectation(psi: &StateVec, a: &Op) -> Result<Complex64> {
    if !a.is_square() || a.nrows() != psi.len() {
        return Err(CqError::DimensionMismatch(format!(
            "state of length {} with {}x{} operator",
            psi.len(),
            a.nrows(),
            a.ncols()
        )));
    }
    let norm = psi.norm();
    if (norm - 1.0).abs() > 1e-9 {
        log::warn!("expectation with unnormalized state, |psi| = {norm}");
    }
    Ok(psi.dotc(&(a * psi)))
}

/// −i as a scale factor, for the ad_{−iH/E} calling pattern.
pub fn minus_i_over(e: f64) -> Complex64 {
    -I / e
}
