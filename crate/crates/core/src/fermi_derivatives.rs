//! λ-derivatives of the perturbed Fermi factor family
//!
//!   A(u) = (e^{uD} + e^{(u−1)D})⁻¹,  D = D₀ + λK,  u ∈ [0, 1),
//!
//! extended antiperiodically, A(u + 1) = −A(u). Here β is absorbed into D.
//!
//! The n-th derivative is (−1)ⁿ n! Rₙ(u), where R₀ = A and
//! Rₙ(y) = ∫₀¹ Rₙ₋₁(y − x) K A(x) dx. On [0, 1) the antiperiodic extension
//! splits this at x = y into two smooth pieces, which are integrated by
//! product rules with Rₙ₋₁ interpolated on Gauss–Legendre nodes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kms::phi_neg;
use crate::linop::{cmul, op_norm, CMat, HermitianOperator, SpectralDecomposition, C64};
use crate::quad::{loglog_fit, Lagrange, Rule};

#[derive(Debug, Clone)]
pub struct FermiFamily {
    pub d0: HermitianOperator,
    pub k: HermitianOperator,
    pub lambda: f64,
    /// D₀ and K already carry the factor β.
    pub beta_absorbed: bool,
}

impl FermiFamily {
    pub fn new(d0: HermitianOperator, k: HermitianOperator, lambda: f64) -> Result<Self> {
        if d0.dim() != k.dim() {
            return Err(Error::DimensionMismatch {
                expected: d0.dim(),
                got: k.dim(),
            });
        }
        Ok(FermiFamily {
            d0,
            k,
            lambda,
            beta_absorbed: false,
        })
    }

    /// D₀ = βD and K → βK, so that A(0) at λ = 1 is F₋(D+K) at inverse
    /// temperature β and the kms time ū corresponds to u = ū/β.
    pub fn absorb_beta(beta: f64, d: &HermitianOperator, k: &HermitianOperator) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::Invalid(format!("beta must be positive, got {beta}")));
        }
        let mut f = FermiFamily::new(d.scale(beta), k.scale(beta), 0.0)?;
        f.beta_absorbed = true;
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.d0.dim()
    }

    pub fn at(&self, lambda: f64) -> FermiFamily {
        FermiFamily {
            lambda,
            ..self.clone()
        }
    }

    pub fn d(&self) -> HermitianOperator {
        self.d0.add(&self.k.scale(self.lambda))
    }
}

/// kms imaginary time ū ↦ appendix time u.
pub fn kms_to_appendix_time(u_bar: f64, beta: f64) -> f64 {
    u_bar / beta
}

/// Splits u = ⌊u⌋ + r and returns ((−1)^⌊u⌋, r).
fn reduce(u: f64) -> (f64, f64) {
    let f = u.floor();
    let r = u - f;
    let sign = if (f as i64).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    (sign, r)
}

fn a_diag(sd: &SpectralDecomposition, r: f64) -> Vec<f64> {
    phi_neg(&sd.eigenvalues, 1.0, r)
}

/// A(u) in the original basis.
pub fn a_of_u(fam: &FermiFamily, u: f64) -> CMat {
    let d = fam.d();
    let sd = d.spectral();
    let (sign, r) = reduce(u);
    let v: Vec<f64> = a_diag(sd, r).into_iter().map(|x| sign * x).collect();
    sd.from_real_diagonal(&v)
}

fn scale_cols(m: &CMat, s: &[f64]) -> CMat {
    let mut out = m.clone();
    for (j, v) in s.iter().enumerate() {
        out.column_mut(j).iter_mut().for_each(|z| *z *= *v);
    }
    out
}

struct Recursion<'a> {
    sd: &'a SpectralDecomposition,
    k: CMat,
    rule: Rule,
    lag: Lagrange,
    q: usize,
}

impl Recursion<'_> {
    fn interp(&self, r: &[CMat], y: f64) -> CMat {
        let b = self.lag.basis(y);
        let mut out = CMat::zeros(r[0].nrows(), r[0].ncols());
        for (m, c) in r.iter().zip(b) {
            out += m * C64::new(c, 0.0);
        }
        out
    }

    /// Rₙ(y) for y ∈ [0, 1] from Rₙ₋₁ on the nodes (eigenbasis).
    fn step_at(&self, r: &[CMat], y: f64) -> CMat {
        let n = r[0].nrows();
        let mut acc = CMat::zeros(n, n);
        if y > 0.0 {
            let left = Rule::gauss_legendre(self.q, 0.0, y);
            for (&x, &w) in left.nodes.iter().zip(&left.weights) {
                let m = cmul(&self.interp(r, y - x), &self.k);
                acc += scale_cols(&m, &a_diag(self.sd, x)) * C64::new(w, 0.0);
            }
        }
        if y < 1.0 {
            let right = Rule::gauss_legendre(self.q, y, 1.0);
            for (&x, &w) in right.nodes.iter().zip(&right.weights) {
                let m = cmul(&self.interp(r, y - x + 1.0), &self.k);
                acc -= scale_cols(&m, &a_diag(self.sd, x)) * C64::new(w, 0.0);
            }
        }
        acc
    }
}

/// dⁿA/dλⁿ at u, evaluated at the family's λ.
pub fn da_dlambda(fam: &FermiFamily, u: f64, n: usize, quad_points: usize) -> Result<CMat> {
    if n > 3 {
        return Err(Error::Invalid(format!("derivatives are provided for n <= 3, got {n}")));
    }
    if quad_points < 2 {
        return Err(Error::Invalid("quad_points must be at least 2".into()));
    }
    if n == 0 {
        return Ok(a_of_u(fam, u));
    }
    let d = fam.d();
    let sd = d.spectral();
    let rule = Rule::gauss_legendre(quad_points, 0.0, 1.0);
    let rec = Recursion {
        sd,
        k: sd.to_eigenbasis(fam.k.matrix()),
        lag: Lagrange::new(&rule.nodes),
        rule,
        q: quad_points,
    };
    let mut r: Vec<CMat> = rec
        .rule
        .nodes
        .iter()
        .map(|&x| {
            let v: Vec<C64> = a_diag(sd, x).into_iter().map(|a| C64::new(a, 0.0)).collect();
            CMat::from_diagonal(&nalgebra::DVector::from_vec(v))
        })
        .collect();
    for _ in 1..n {
        r = rec.rule.nodes.par_iter().map(|&y| rec.step_at(&r, y)).collect();
    }
    let (sign, y) = reduce(u);
    let rn = rec.step_at(&r, y);
    let fact: f64 = (1..=n).map(|i| i as f64).product();
    let s = sign * fact * if n % 2 == 0 { 1.0 } else { -1.0 };
    Ok(sd.from_eigenbasis(&(rn * C64::new(s, 0.0))))
}

/// n-th λ-derivative of A(u) by a central stencil with O(h⁴) error.
pub fn finite_difference(fam: &FermiFamily, u: f64, n: usize) -> Result<CMat> {
    let l = fam.lambda;
    let a = |dl: f64| a_of_u(&fam.at(l + dl), u);
    let c = |x: f64| C64::new(x, 0.0);
    Ok(match n {
        0 => a(0.0),
        1 => {
            let h = 1e-2;
            (a(-2.0 * h) - a(-h) * c(8.0) + a(h) * c(8.0) - a(2.0 * h)) * c(1.0 / (12.0 * h))
        }
        2 => {
            let h = 1e-2;
            (-a(-2.0 * h) + a(-h) * c(16.0) - a(0.0) * c(30.0) + a(h) * c(16.0) - a(2.0 * h)) * c(1.0 / (12.0 * h * h))
        }
        3 => {
            let h = 2e-2;
            (-a(3.0 * h) + a(2.0 * h) * c(8.0) - a(h) * c(13.0) + a(-h) * c(13.0) - a(-2.0 * h) * c(8.0) + a(-3.0 * h))
                * c(1.0 / (8.0 * h * h * h))
        }
        _ => return Err(Error::Invalid(format!("finite differences are provided for n <= 3, got {n}"))),
    })
}

#[derive(Debug, Clone)]
pub struct DerivativeReport {
    /// ‖formula − stencil‖/‖stencil‖ for n = 1..=n_max.
    pub relative_errors: Vec<f64>,
    pub taylor_lambdas: Vec<f64>,
    pub taylor_remainders: Vec<f64>,
    pub taylor_slope: f64,
    pub taylor_r_squared: f64,
}

/// Formula against finite differences and the Taylor remainder at
/// λ ∈ {0.05, 0.1, 0.2} around the family's λ.
pub fn derivative_consistency(fam: &FermiFamily, u: f64, n_max: usize, quad_points: usize) -> Result<DerivativeReport> {
    if n_max == 0 || n_max > 3 {
        return Err(Error::Invalid(format!("n_max must lie in 1..=3, got {n_max}")));
    }
    let derivs: Vec<CMat> = (0..=n_max)
        .map(|n| da_dlambda(fam, u, n, quad_points))
        .collect::<Result<_>>()?;
    let mut relative_errors = Vec::new();
    for n in 1..=n_max {
        let fd = finite_difference(fam, u, n)?;
        let scale = op_norm(&fd).max(f64::MIN_POSITIVE);
        relative_errors.push(op_norm(&(&derivs[n] - &fd)) / scale);
    }
    let lambdas = vec![0.05, 0.1, 0.2];
    let remainders: Vec<f64> = lambdas
        .iter()
        .map(|&dl| {
            let exact = a_of_u(&fam.at(fam.lambda + dl), u);
            let mut approx = CMat::zeros(fam.dim(), fam.dim());
            let mut coef = 1.0;
            for (n, dn) in derivs.iter().enumerate() {
                if n > 0 {
                    coef *= dl / n as f64;
                }
                approx += dn * C64::new(coef, 0.0);
            }
            op_norm(&(exact - approx))
        })
        .collect();
    let fit = loglog_fit(&lambdas, &remainders);
    Ok(DerivativeReport {
        relative_errors,
        taylor_lambdas: lambdas,
        taylor_remainders: remainders,
        taylor_slope: fit.slope,
        taylor_r_squared: fit.r_squared,
    })
}
