//! Dense spectral calculus on self-adjoint matrices.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Relative gap below which the divided difference is replaced by f'.
pub const FRECHET_DEGENERACY: f64 = 1e-8;

/// Complex product through four real gemm calls.
///
/// nalgebra only dispatches real scalars to matrixmultiply, so splitting
/// into real and imaginary parts is several times faster than the generic
/// complex kernel at the sizes used here.
pub fn cmul(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.ncols(), b.nrows(), "cmul: inner dimensions differ");
    if a.nrows() * a.ncols() * b.ncols() < 512 {
        return a * b;
    }
    let ar = a.map(|z| z.re);
    let ai = a.map(|z| z.im);
    let br = b.map(|z| z.re);
    let bi = b.map(|z| z.im);
    let mut re = &ar * &br;
    re -= &ai * &bi;
    let mut im = &ar * &bi;
    im += &ai * &br;
    CMat::from_fn(a.nrows(), b.ncols(), |i, j| C64::new(re[(i, j)], im[(i, j)]))
}

pub fn adjoint(a: &CMat) -> CMat {
    a.adjoint()
}

/// Largest singular value.
pub fn op_norm(a: &CMat) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    if a.iter().all(|z| *z == C64::new(0.0, 0.0)) {
        return 0.0;
    }
    a.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

pub fn hs_norm(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn trace(a: &CMat) -> C64 {
    a.diagonal().iter().sum()
}

/// Tr(a b) without forming the product.
pub fn trace_product(a: &CMat, b: &CMat) -> C64 {
    let n = a.nrows();
    let mut s = C64::new(0.0, 0.0);
    for i in 0..n {
        for k in 0..a.ncols() {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    cmul(a, b) - cmul(b, a)
}

/// `u m u†`
pub fn conjugate(u: &CMat, m: &CMat) -> CMat {
    cmul(&cmul(u, m), &u.adjoint())
}

/// ln(1+e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// 1/(1+e^{-x}) without overflow.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub op_norm: f64,
    pub hs_norm: f64,
    pub trace_norm: f64,
    pub trace: C64,
}

pub fn norms(m: &CMat) -> Norms {
    let sv: Vec<f64> = if m.iter().all(|z| z.norm_sqr() == 0.0) {
        vec![0.0]
    } else {
        m.clone().singular_values().iter().cloned().collect()
    };
    Norms {
        op_norm: sv.iter().cloned().fold(0.0, f64::max),
        hs_norm: sv.iter().map(|s| s * s).sum::<f64>().sqrt(),
        trace_norm: sv.iter().sum(),
        trace: trace(m),
    }
}

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMat,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn spread(&self) -> f64 {
        match (self.eigenvalues.first(), self.eigenvalues.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// U diag(vals) U†
    pub fn from_diagonal(&self, vals: &[C64]) -> CMat {
        let u = &self.eigenvectors;
        let mut scaled = u.clone();
        for (j, v) in vals.iter().enumerate() {
            scaled.column_mut(j).iter_mut().for_each(|z| *z *= *v);
        }
        cmul(&scaled, &u.adjoint())
    }

    pub fn from_real_diagonal(&self, vals: &[f64]) -> CMat {
        let v: Vec<C64> = vals.iter().map(|&x| C64::new(x, 0.0)).collect();
        self.from_diagonal(&v)
    }

    /// U† X U
    pub fn to_eigenbasis(&self, x: &CMat) -> CMat {
        cmul(&cmul(&self.eigenvectors.adjoint(), x), &self.eigenvectors)
    }

    /// U X U†
    pub fn from_eigenbasis(&self, x: &CMat) -> CMat {
        conjugate(&self.eigenvectors, x)
    }

    /// e^{itM}
    pub fn exp_i(&self, t: f64) -> CMat {
        let v: Vec<C64> = self
            .eigenvalues
            .iter()
            .map(|&l| C64::from_polar(1.0, t * l))
            .collect();
        self.from_diagonal(&v)
    }
}

fn decompose(m: &CMat) -> SpectralDecomposition {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut vecs = CMat::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (j, &k) in order.iter().enumerate() {
        vals.push(eig.eigenvalues[k]);
        let col = eig.eigenvectors.column(k);
        let big = col.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let lead = col
            .iter()
            .find(|z| z.norm() > 1e-8 * big)
            .copied()
            .unwrap_or(C64::new(1.0, 0.0));
        let phase = lead.conj() / lead.norm();
        for i in 0..n {
            vecs[(i, j)] = col[i] * phase;
        }
    }
    SpectralDecomposition {
        eigenvalues: vals,
        eigenvectors: vecs,
    }
}

/// Dense self-adjoint operator with lazily cached spectral data.
#[derive(Debug, Clone)]
pub struct HermitianOperator {
    entries: CMat,
    hermiticity_tol: f64,
    spectral: OnceLock<SpectralDecomposition>,
}

impl HermitianOperator {
    /// Checks hermiticity with a tolerance of 1e-10 relative to the Frobenius norm.
    pub fn new(entries: CMat) -> Result<Self> {
        let tol = 1e-10 * hs_norm(&entries).max(1.0);
        Self::with_tol(entries, tol)
    }

    pub fn with_tol(entries: CMat, tol: f64) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimensionMismatch {
                expected: entries.nrows(),
                got: entries.ncols(),
            });
        }
        if entries.nrows() == 0 {
            return Err(Error::Invalid("operator dimension must be at least 1".into()));
        }
        let diff = &entries - entries.adjoint();
        let mut asym = hs_norm(&diff);
        if asym > tol {
            asym = op_norm(&diff);
            if asym > tol {
                return Err(Error::NonHermitian {
                    asymmetry: asym,
                    tol,
                });
            }
        }
        Ok(Self::symmetrized(entries, tol))
    }

    /// Stores (M + M†)/2 without checking.
    pub fn symmetrized(entries: CMat, tol: f64) -> Self {
        let sym = (&entries + entries.adjoint()) * C64::new(0.5, 0.0);
        HermitianOperator {
            entries: sym,
            hermiticity_tol: tol,
            spectral: OnceLock::new(),
        }
    }

    pub(crate) fn from_parts(entries: CMat, spectral: SpectralDecomposition) -> Self {
        let lock = OnceLock::new();
        let _ = lock.set(spectral);
        HermitianOperator {
            entries,
            hermiticity_tol: 0.0,
            spectral: lock,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::symmetrized(CMat::zeros(n, n), 0.0)
    }

    pub fn identity(n: usize) -> Self {
        Self::symmetrized(CMat::identity(n, n), 0.0)
    }

    pub fn from_real_diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let m = CMat::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(d[i], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        Self::symmetrized(m, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.entries
    }

    pub fn into_matrix(self) -> CMat {
        self.entries
    }

    pub fn hermiticity_tol(&self) -> f64 {
        self.hermiticity_tol
    }

    pub fn spectral(&self) -> &SpectralDecomposition {
        self.spectral.get_or_init(|| decompose(&self.entries))
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.spectral().eigenvalues
    }

    pub fn op_norm(&self) -> f64 {
        let ev = self.eigenvalues();
        ev.first()
            .map(|a| a.abs())
            .unwrap_or(0.0)
            .max(ev.last().map(|b| b.abs()).unwrap_or(0.0))
    }

    pub fn add(&self, other: &HermitianOperator) -> HermitianOperator {
        Self::symmetrized(&self.entries + &other.entries, 0.0)
    }

    pub fn sub(&self, other: &HermitianOperator) -> HermitianOperator {
        Self::symmetrized(&self.entries - &other.entries, 0.0)
    }

    pub fn scale(&self, s: f64) -> HermitianOperator {
        Self::symmetrized(&self.entries * C64::new(s, 0.0), 0.0)
    }

    pub fn shift(&self, s: f64) -> HermitianOperator {
        let n = self.dim();
        Self::symmetrized(&self.entries + CMat::identity(n, n) * C64::new(s, 0.0), 0.0)
    }

    /// u M u† for unitary u; the spectrum is carried over.
    pub fn conjugate_by(&self, u: &CMat) -> HermitianOperator {
        let m = conjugate(u, &self.entries);
        let sym = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        HermitianOperator {
            entries: sym,
            hermiticity_tol: 0.0,
            spectral: OnceLock::new(),
        }
    }

    /// e^{itM}
    pub fn exp_i(&self, t: f64) -> CMat {
        self.spectral().exp_i(t)
    }
}

pub fn spectral_decompose(m: &HermitianOperator) -> SpectralDecomposition {
    m.spectral().clone()
}

/// U f(Λ) U†; fails if f is not finite at some eigenvalue.
pub fn matrix_function<F: Fn(f64) -> f64>(m: &HermitianOperator, f: F) -> Result<HermitianOperator> {
    let sd = m.spectral();
    let mut vals = Vec::with_capacity(sd.dim());
    for &l in &sd.eigenvalues {
        let v = f(l);
        if !v.is_finite() {
            return Err(Error::NonFinite { eigenvalue: l });
        }
        vals.push(v);
    }
    let entries = sd.from_real_diagonal(&vals);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let spectral = SpectralDecomposition {
        eigenvalues: order.iter().map(|&k| vals[k]).collect(),
        eigenvectors: sd.eigenvectors.select_columns(order.iter()),
    };
    let sym = (&entries + entries.adjoint()) * C64::new(0.5, 0.0);
    Ok(HermitianOperator::from_parts(sym, spectral))
}

/// Divided-difference matrix Γ_ij = (f(λi) − f(λj))/(λi − λj), with f' on near-degenerate pairs.
pub fn divided_differences<F, G>(sd: &SpectralDecomposition, f: F, df: G) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let n = sd.dim();
    let lam = &sd.eigenvalues;
    let fv: Vec<f64> = lam.iter().map(|&l| f(l)).collect();
    let dv: Vec<f64> = lam.iter().map(|&l| df(l)).collect();
    for (k, (a, b)) in fv.iter().zip(&dv).enumerate() {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite { eigenvalue: lam[k] });
        }
    }
    let thresh = FRECHET_DEGENERACY * sd.spread().max(f64::MIN_POSITIVE);
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let gap = lam[i] - lam[j];
        if gap.abs() < thresh {
            0.5 * (dv[i] + dv[j])
        } else {
            (fv[i] - fv[j]) / gap
        }
    }))
}

/// Daleckii–Krein derivative d/dh f(M + hX) at h = 0.
pub fn matrix_function_frechet<F, G>(m: &HermitianOperator, f: F, df: G, direction: &CMat) -> Result<CMat>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    if direction.nrows() != m.dim() || direction.ncols() != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            got: direction.nrows(),
        });
    }
    let sd = m.spectral();
    let gamma = divided_differences(sd, f, df)?;
    let mut x = sd.to_eigenbasis(direction);
    x.zip_apply(&gamma.map(|g| C64::new(g, 0.0)), |a, g| *a *= g);
    Ok(sd.from_eigenbasis(&x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

/// F_± = ∓(1 + e^{±βM})^{-1}
pub fn fermi_factor(m: &HermitianOperator, beta: f64, sign: Sign) -> Result<HermitianOperator> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Invalid(format!("beta must be positive, got {beta}")));
    }
    match sign {
        Sign::Minus => matrix_function(m, |x| logistic(beta * x)),
        Sign::Plus => matrix_function(m, |x| -logistic(-beta * x)),
    }
}

/// A one-particle covariance 0 ≤ T ≤ 1.
///
/// When the covariance is a Fermi factor (1+e^{-G})^{-1} the generator G is
/// kept, so that log T and log(1-T) can be taken from G without rounding.
#[derive(Debug, Clone)]
pub struct Covariance {
    pub op: HermitianOperator,
    generator: Option<HermitianOperator>,
}

pub const COVARIANCE_TOL: f64 = 1e-10;

impl Covariance {
    pub fn new(op: HermitianOperator) -> Result<Self> {
        for &l in op.eigenvalues() {
            if l < -COVARIANCE_TOL || l > 1.0 + COVARIANCE_TOL {
                return Err(Error::NotCovariance {
                    name: "covariance".into(),
                    eigenvalue: l,
                });
            }
        }
        Ok(Covariance {
            op,
            generator: None,
        })
    }

    /// (1 + e^{-βM})^{-1}
    pub fn fermi(m: &HermitianOperator, beta: f64) -> Result<Self> {
        let op = fermi_factor(m, beta, Sign::Minus)?;
        Ok(Covariance {
            op,
            generator: Some(m.scale(beta)),
        })
    }

    pub fn generator(&self) -> Option<&HermitianOperator> {
        self.generator.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }
}

/// P onto eigenvalues > 0 and Q = 1 − P.
pub fn spectral_projectors(m: &HermitianOperator) -> (CMat, CMat) {
    let sd = m.spectral();
    let p: Vec<f64> = sd
        .eigenvalues
        .iter()
        .map(|&l| if l > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let q: Vec<f64> = p.iter().map(|x| 1.0 - x).collect();
    (sd.from_real_diagonal(&p), sd.from_real_diagonal(&q))
}
