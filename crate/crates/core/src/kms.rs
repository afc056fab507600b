//! Thermal two-point functions and the imaginary-time series for the
//! perturbed KMS covariance.
//!
//! Every factor e^{∓aD} is kept glued to its Fermi factor. In the eigenbasis
//! of D the glued factor φ(a) is diagonal with entries
//!
//!   φ(a) = e^{a d}/(1+e^{-βd})     for a < 0,
//!   φ(a) = −e^{a d}/(1+e^{βd})     for a > 0,
//!
//! and the order-n term of T(ū) reads
//! (−1)ⁿ ∫_{(0,ū)ⁿ} φ(−u₁) K φ(u₁−u₂) K ⋯ K φ(uₙ) du.
//!
//! The cube integrand jumps where u_j = u_{j+1}, so a tensor rule would only
//! converge at first order. Instead the integral is resolved one variable at
//! a time: the partial products are smooth in the outstanding variable, are
//! stored on Gauss–Legendre nodes, and each new integral is split at the
//! jump (product integration with barycentric interpolation).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linop::{
    cmul, fermi_factor, logistic, op_norm, softplus, CMat, CVec, Covariance, HermitianOperator, Sign, C64,
};
use crate::quad::{Lagrange, Rule};

#[derive(Debug, Clone)]
pub struct KmsSpec {
    pub beta: f64,
    pub d: HermitianOperator,
    pub k: HermitianOperator,
    pub contraction: f64,
}

impl KmsSpec {
    pub fn new(beta: f64, d: HermitianOperator, k: HermitianOperator) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Invalid(format!("beta must be positive, got {beta}")));
        }
        if d.dim() != k.dim() {
            return Err(Error::DimensionMismatch {
                expected: d.dim(),
                got: k.dim(),
            });
        }
        let contraction = beta * k.op_norm();
        Ok(KmsSpec {
            beta,
            d,
            k,
            contraction,
        })
    }

    pub fn dim(&self) -> usize {
        self.d.dim()
    }

    pub fn require_contraction(&self) -> Result<()> {
        if self.contraction >= 1.0 {
            return Err(Error::Hypothesis(format!(
                "the imaginary-time series converges only for beta*||K|| < 1, got {:.6}",
                self.contraction
            )));
        }
        Ok(())
    }

    /// K in the eigenbasis of D.
    pub fn k_eigen(&self) -> CMat {
        self.d.spectral().to_eigenbasis(self.k.matrix())
    }
}

#[derive(Debug, Clone)]
pub struct SeriesResult<T> {
    pub value: T,
    pub order: usize,
    pub truncation_bound: f64,
    pub quadrature_estimate: f64,
}

/// (⟨f, T g⟩, ⟨f, (1−T) g⟩)
pub fn kms_two_point(t: &Covariance, f: &CVec, g: &CVec) -> Result<(C64, C64)> {
    let n = t.dim();
    for v in [f, g] {
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
    }
    let tg = t.op.matrix() * g;
    let a = f.dotc(&tg);
    Ok((a, f.dotc(g) - a))
}

/// δ_nm det(⟨f_i, T g_j⟩)
pub fn quasifree_npoint(t: &Covariance, fs: &[CVec], gs: &[CVec]) -> Result<C64> {
    if fs.len() != gs.len() {
        return Ok(C64::new(0.0, 0.0));
    }
    let n = fs.len();
    if n == 0 {
        return Ok(C64::new(1.0, 0.0));
    }
    let mut g = CMat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] = kms_two_point(t, &fs[i], &gs[j])?.0;
        }
    }
    Ok(g.determinant())
}

/// Diagonal of φ(−x), x ≥ 0.
pub(crate) fn phi_neg(d: &[f64], beta: f64, x: f64) -> Vec<f64> {
    d.iter().map(|&l| (-x * l - softplus(-beta * l)).exp()).collect()
}

/// Diagonal of φ(x), x ≥ 0.
pub(crate) fn phi_pos(d: &[f64], beta: f64, x: f64) -> Vec<f64> {
    d.iter().map(|&l| -(x * l - softplus(beta * l)).exp()).collect()
}

/// φ(a) for either sign of a.
pub(crate) fn phi(d: &[f64], beta: f64, a: f64) -> Vec<f64> {
    if a < 0.0 {
        phi_neg(d, beta, -a)
    } else {
        phi_pos(d, beta, a)
    }
}

fn scale_rows(m: &CMat, s: &[f64]) -> CMat {
    let mut out = m.clone();
    for (i, v) in s.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|z| *z *= *v);
    }
    out
}

fn scale_cols(m: &CMat, s: &[f64]) -> CMat {
    let mut out = m.clone();
    for (j, v) in s.iter().enumerate() {
        out.column_mut(j).iter_mut().for_each(|z| *z *= *v);
    }
    out
}

/// Product-integration weights on the grid `nodes` of [0, ū].
///
/// `c[b][a][i]` = ∫₀^ū L_a(z) φ(z − y_b)_i dz, the interval split at y_b.
pub(crate) struct Transfer {
    pub rule: Rule,
    pub c: Vec<Vec<Vec<f64>>>,
}

impl Transfer {
    pub fn new(d: &[f64], beta: f64, u_bar: f64, q: usize) -> Transfer {
        let rule = Rule::gauss_legendre(q, 0.0, u_bar);
        let lag = Lagrange::new(&rule.nodes);
        let c = rule
            .nodes
            .par_iter()
            .map(|&y| {
                let mut acc = vec![vec![0.0; d.len()]; q];
                let left = Rule::gauss_legendre(q, 0.0, y);
                for (&z, &w) in left.nodes.iter().zip(&left.weights) {
                    let la = lag.basis(z);
                    let ph = phi_neg(d, beta, y - z);
                    for a in 0..q {
                        let s = w * la[a];
                        for (o, p) in acc[a].iter_mut().zip(&ph) {
                            *o += s * p;
                        }
                    }
                }
                let right = Rule::gauss_legendre(q, y, u_bar);
                for (&z, &w) in right.nodes.iter().zip(&right.weights) {
                    let la = lag.basis(z);
                    let ph = phi_pos(d, beta, z - y);
                    for a in 0..q {
                        let s = w * la[a];
                        for (o, p) in acc[a].iter_mut().zip(&ph) {
                            *o += s * p;
                        }
                    }
                }
                acc
            })
            .collect();
        Transfer { rule, c }
    }

    /// y ↦ ∫₀^ū M(z) φ(z − y) dz on the nodes, for M given on the nodes.
    pub fn apply(&self, m: &[CMat]) -> Vec<CMat> {
        let q = self.rule.len();
        (0..q)
            .into_par_iter()
            .map(|b| {
                let mut acc = CMat::zeros(m[0].nrows(), m[0].ncols());
                for a in 0..q {
                    acc += scale_cols(&m[a], &self.c[b][a]);
                }
                acc
            })
            .collect()
    }
}

/// Order-1..=N terms of T(ū) in the eigenbasis of D.
pub(crate) fn series_terms_eigen(d: &[f64], k: &CMat, beta: f64, u_bar: f64, order: usize, q: usize) -> Vec<CMat> {
    if order == 0 || u_bar == 0.0 {
        return vec![CMat::zeros(k.nrows(), k.ncols()); order];
    }
    let tr = Transfer::new(d, beta, u_bar, q);
    let nodes = &tr.rule.nodes;
    let mut m: Vec<CMat> = nodes.iter().map(|&x| scale_rows(k, &phi_neg(d, beta, x))).collect();
    let mut out = Vec::with_capacity(order);
    for n in 1..=order {
        let mut t = CMat::zeros(k.nrows(), k.ncols());
        for (a, (&x, &w)) in nodes.iter().zip(&tr.rule.weights).enumerate() {
            t += scale_cols(&m[a], &phi_pos(d, beta, x)) * C64::new(w, 0.0);
        }
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        out.push(t * C64::new(sign, 0.0));
        if n < order {
            m = tr.apply(&m).into_iter().map(|x| cmul(&x, k)).collect();
        }
    }
    out
}

/// Terms of T(ū) of order 1..=N in the original basis.
pub fn t_series_terms(spec: &KmsSpec, u_bar: f64, order: usize, quad_points: usize) -> Result<Vec<CMat>> {
    if !(0.0..=spec.beta).contains(&u_bar) {
        return Err(Error::Invalid(format!("u_bar must lie in [0, beta], got {u_bar}")));
    }
    let sd = spec.d.spectral();
    let ke = spec.k_eigen();
    Ok(series_terms_eigen(&sd.eigenvalues, &ke, spec.beta, u_bar, order, quad_points)
        .iter()
        .map(|t| sd.from_eigenbasis(t))
        .collect())
}

fn partial_sum(d: &[f64], k: &CMat, beta: f64, u_bar: f64, order: usize, q: usize) -> CMat {
    let mut t = CMat::from_diagonal(&nalgebra::DVector::from_iterator(
        d.len(),
        d.iter().map(|&l| C64::new(logistic(beta * l), 0.0)),
    ));
    for term in series_terms_eigen(d, k, beta, u_bar, order, q) {
        t += term;
    }
    t
}

/// Partial sum of T(ū) through order N.
pub fn t_series(spec: &KmsSpec, u_bar: f64, order: usize, quad_points: usize) -> Result<SeriesResult<HermitianOperator>> {
    spec.require_contraction()?;
    if !(0.0..=spec.beta).contains(&u_bar) {
        return Err(Error::Invalid(format!("u_bar must lie in [0, beta], got {u_bar}")));
    }
    if quad_points == 0 {
        return Err(Error::Invalid("quad_points must be positive".into()));
    }
    let sd = spec.d.spectral();
    let ke = spec.k_eigen();
    let d = &sd.eigenvalues;
    let (a, b) = rayon::join(
        || partial_sum(d, &ke, spec.beta, u_bar, order, quad_points),
        || partial_sum(d, &ke, spec.beta, u_bar, order, quad_points + 4),
    );
    let c = spec.contraction;
    Ok(SeriesResult {
        value: HermitianOperator::symmetrized(sd.from_eigenbasis(&a), 0.0),
        order,
        truncation_bound: c.powi(order as i32 + 1) / (1.0 - c),
        quadrature_estimate: op_norm(&(a - b)),
    })
}

#[derive(Debug, Clone)]
pub struct RecursionReport {
    /// ‖X⁽ʲ⁾(0) − F₋(D+K)‖ for j = 0..=N.
    pub residuals: Vec<f64>,
}

impl RecursionReport {
    pub fn last(&self) -> f64 {
        *self.residuals.last().unwrap()
    }
}

/// Iterates X(u) ↦ φ(−u) − ∫₀^β X(v) K φ(v − u) dv from the free term
/// X⁽⁰⁾(u) = e^{−uD}/(1+e^{−βD}); the fixed point is
/// e^{−u(D+K)}/(1+e^{−β(D+K)}).
pub fn t_recursive_residual(spec: &KmsSpec, n: usize, quad_points: usize) -> Result<RecursionReport> {
    spec.require_contraction()?;
    let sd = spec.d.spectral();
    let d = &sd.eigenvalues;
    let ke = spec.k_eigen();
    let beta = spec.beta;
    let target = sd.to_eigenbasis(fermi_factor(&spec.d.add(&spec.k), beta, Sign::Minus)?.matrix());
    let tr = Transfer::new(d, beta, beta, quad_points);
    let nodes = &tr.rule.nodes;
    let free: Vec<CMat> = nodes
        .iter()
        .map(|&u| CMat::from_diagonal(&nalgebra::DVector::from_iterator(d.len(), phi_neg(d, beta, u).into_iter().map(|x| C64::new(x, 0.0)))))
        .collect();
    let free0 = CMat::from_diagonal(&nalgebra::DVector::from_iterator(
        d.len(),
        phi_neg(d, beta, 0.0).into_iter().map(|x| C64::new(x, 0.0)),
    ));
    let mut x = free.clone();
    let mut x0 = free0.clone();
    let mut residuals = vec![op_norm(&(&x0 - &target))];
    for _ in 0..n {
        let xk: Vec<CMat> = x.iter().map(|m| cmul(m, &ke)).collect();
        // value at u = 0: φ(v) with v > 0 is smooth, plain quadrature
        let mut at0 = CMat::zeros(d.len(), d.len());
        for (a, (&v, &w)) in nodes.iter().zip(&tr.rule.weights).enumerate() {
            at0 += scale_cols(&xk[a], &phi_pos(d, beta, v)) * C64::new(w, 0.0);
        }
        x0 = &free0 - at0;
        let integ = tr.apply(&xk);
        x = free.iter().zip(integ).map(|(f, i)| f - i).collect();
        residuals.push(op_norm(&(&x0 - &target)));
    }
    Ok(RecursionReport { residuals })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Nested Gauss–Legendre points on the ordered simplex 0 < v₁ < ⋯ < vₙ < β.
fn simplex_points(n: usize, beta: f64, q: usize) -> Vec<(Vec<f64>, f64)> {
    let mut pts = vec![(vec![], 1.0)];
    for _ in 0..n {
        let mut next = Vec::new();
        for (v, w) in &pts {
            let lo = v.last().copied().unwrap_or(0.0);
            let r = Rule::gauss_legendre(q, lo, beta);
            for (&x, &wx) in r.nodes.iter().zip(&r.weights) {
                let mut nv = v.clone();
                nv.push(x);
                next.push((nv, w * wx));
            }
        }
        pts = next;
    }
    pts
}

/// Order-n term as a permutation sum over the ordered simplex.
pub fn order_term_simplex(spec: &KmsSpec, n: usize, quad_points: usize) -> CMat {
    let sd = spec.d.spectral();
    let d = &sd.eigenvalues;
    let ke = spec.k_eigen();
    let beta = spec.beta;
    let perms = permutations(n);
    let pts = simplex_points(n, beta, quad_points);
    let dim = spec.dim();
    let total = pts
        .par_iter()
        .map(|(v, w)| {
            let mut acc = CMat::zeros(dim, dim);
            for p in &perms {
                let s: Vec<f64> = p.iter().map(|&i| v[i]).collect();
                let mut m = scale_rows(&ke, &phi_neg(d, beta, s[0]));
                for j in 1..n {
                    m = cmul(&scale_cols(&m, &phi(d, beta, s[j - 1] - s[j])), &ke);
                }
                m = scale_cols(&m, &phi_pos(d, beta, s[n - 1]));
                acc += m;
            }
            acc * C64::new(*w, 0.0)
        })
        .reduce(|| CMat::zeros(dim, dim), |a, b| a + b);
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    sd.from_eigenbasis(&(total * C64::new(sign, 0.0)))
}

/// ‖simplex form − cube form‖ of the order-n term.
pub fn simplex_cube_check(spec: &KmsSpec, n: usize, quad_points: usize) -> Result<f64> {
    if n == 0 || n > 3 {
        return Err(Error::Invalid(format!("simplex check supports 1 <= n <= 3, got {n}")));
    }
    let cube = t_series_terms(spec, spec.beta, n, quad_points)?.pop().unwrap();
    let simplex = order_term_simplex(spec, n, quad_points);
    Ok(op_norm(&(cube - simplex)))
}

/// ‖F₋(H)(1 + e^{−βH}) − 1‖
pub fn kms_identity_defect(h: &HermitianOperator, beta: f64) -> Result<f64> {
    let f = fermi_factor(h, beta, Sign::Minus)?;
    let e = crate::linop::matrix_function(h, |x| (-beta * x).exp())?;
    let n = h.dim();
    let prod = f.matrix() + cmul(f.matrix(), e.matrix());
    Ok(op_norm(&(prod - CMat::identity(n, n))))
}
