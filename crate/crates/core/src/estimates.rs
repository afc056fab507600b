//! Quantitative checks of the Hilbert–Schmidt and kernel bounds, adiabatic
//! and stationary-phase decay, and the quasi-equivalence criteria.
//!
//! Momentum kernels are compared in continuum units: a lattice matrix block
//! c(p − q) stands for the kernel c/Δᵈ with Δ = 2π/L, so ℓ¹ norms are plain
//! sums Σ|c| and ℓ² norms are (Σ|c|²/Δᵈ)^{1/2}. Hilbert–Schmidt norms agree
//! between the two pictures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dynamics::{compute_k_with, cocycle_at, dyson_evolve, Drive, KReport};
use crate::error::{Error, Result};
use crate::linop::{
    cmul, hs_norm, matrix_function, op_norm, spectral_projectors, CMat, Covariance, HermitianOperator, C64,
};
use crate::model::{
    build_dirac, build_potential, fourier_coefficients, site_matrices, Component, LatticeModel, PotentialProfile,
    Schedule, ScheduleKind, Shape,
};
use crate::quad::{loglog_fit, LineFit};

/// Second-order jet f(0), f'(0), f''(0) of a function of the coupling λ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    pub fn constant(v: f64) -> Jet {
        Jet { v, d1: 0.0, d2: 0.0 }
    }

    /// a + λb + λ²c/2
    pub fn quadratic(a: f64, b: f64, c: f64) -> Jet {
        Jet { v: a, d1: b, d2: c }
    }

    pub fn scale(self, s: f64) -> Jet {
        Jet {
            v: s * self.v,
            d1: s * self.d1,
            d2: s * self.d2,
        }
    }

    pub fn exp(self) -> Jet {
        let e = self.v.exp();
        Jet {
            v: e,
            d1: e * self.d1,
            d2: e * (self.d2 + self.d1 * self.d1),
        }
    }
}

impl std::ops::Add for Jet {
    type Output = Jet;

    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            d1: self.d1 + o.d1,
            d2: self.d2 + o.d2,
        }
    }
}

impl std::ops::Mul for Jet {
    type Output = Jet;

    fn mul(self, o: Jet) -> Jet {
        Jet {
            v: self.v * o.v,
            d1: self.d1 * o.v + self.v * o.d1,
            d2: self.d2 * o.v + 2.0 * self.d1 * o.d1 + self.v * o.d2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub inputs_digest: String,
    pub cutoff: usize,
    pub seed: u64,
}

impl BoundCheck {
    pub fn new(name: &str, lhs: f64, rhs: f64, cutoff: usize, seed: u64, inputs: &str) -> BoundCheck {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(inputs.as_bytes());
        BoundCheck {
            name: name.to_string(),
            lhs,
            rhs,
            margin: rhs - lhs,
            inputs_digest: hex::encode(h.finalize()),
            cutoff,
            seed,
        }
    }

    pub fn passes(&self) -> bool {
        self.margin >= -1e-9 * self.rhs.abs()
    }
}

fn inputs_text(model: &LatticeModel, profile: &PotentialProfile) -> String {
    format!(
        "{}",
        serde_json::json!({"model": model, "profile": profile})
    )
}

/// Operator norm of each spinor block of the Fourier coefficients.
pub fn spatial_kernel(model: &LatticeModel, profile: &PotentialProfile) -> Result<Vec<f64>> {
    let sites = site_matrices(model, profile)?;
    Ok(fourier_coefficients(model, &sites).iter().map(op_norm).collect())
}

/// Continuum ℓ¹ and ℓ² norms of a lattice kernel.
pub fn kernel_norms(model: &LatticeModel, g: &[f64]) -> (f64, f64) {
    let cell = model.dk().powi(model.spatial_dim as i32);
    let l1 = g.iter().sum();
    let l2 = (g.iter().map(|x| x * x).sum::<f64>() / cell).sqrt();
    (l1, l2)
}

/// sqrt(s/2) · (Σ_q Δᵈ ω(q)⁻⁴)^{1/2}: the lattice value of the factor that
/// converts an ℓ² kernel bound into a bound on ‖P X Q‖_HS.
///
/// In three dimensions the continuum integral gives π/√m; the sqrt(s/2)
/// accounts for the rank of the spinor projections.
pub fn hs_constant(model: &LatticeModel) -> f64 {
    let cell = model.dk().powi(model.spatial_dim as i32);
    let s: f64 = (0..model.n_sites())
        .map(|q| model.omega(&model.momentum(q)).powi(-4) * cell)
        .sum();
    (model.spinor_dim() as f64 / 2.0).sqrt() * s.sqrt()
}

fn pq(d: &HermitianOperator) -> (CMat, CMat) {
    spectral_projectors(d)
}

fn pxq_hs(p: &CMat, x: &CMat, q: &CMat) -> f64 {
    hs_norm(&cmul(&cmul(p, x), q))
}

/// The profile switched by a pulse of the same window.
pub fn as_pulse(profile: &PotentialProfile) -> PotentialProfile {
    PotentialProfile {
        switch_kind: ScheduleKind::Pulse,
        ..profile.clone()
    }
}

/// ‖P U(A) Q‖_HS against the second λ-derivative of
/// C·exp(‖A‖_I + λ‖Ȧ‖_I + λ²‖Ä‖_I/2), with U(A) the full Dyson evolution
/// through a pulse (the bound needs compact support in time).
pub fn hs_bound_u(model: &LatticeModel, profile: &PotentialProfile, step: f64, seed: u64) -> Result<BoundCheck> {
    let profile = as_pulse(profile);
    let d = build_dirac(model)?;
    let a = build_potential(model, &profile)?;
    let schedule = profile.schedule();
    let (t0, t1) = schedule.support();
    let u = dyson_evolve(&d, &Drive::Switched { a: &a, schedule }, t0, t1, step)?;
    let (p, q) = pq(&d);
    let lhs = pxq_hs(&p, &u.v, &q);
    let g = spatial_kernel(model, &profile)?;
    let (l1, l2) = kernel_norms(model, &g);
    let nk = l1.max(l2);
    let [i0, i1, i2] = schedule.integrated_norms();
    let jet = Jet::quadratic(i0 * nk, i1 * nk, i2 * nk).exp();
    let rhs = hs_constant(model) * jet.d2;
    Ok(BoundCheck::new(
        "hs_bound_U",
        lhs,
        rhs,
        model.n_modes_per_axis,
        seed,
        &inputs_text(model, &profile),
    ))
}

/// Circular convolution on the difference grid.
fn convolve(model: &LatticeModel, f: &[f64], g: &[f64]) -> Vec<f64> {
    let n = f.len();
    let nz: Vec<usize> = (0..n).filter(|&i| f[i] != 0.0).collect();
    let gz: Vec<usize> = (0..n).filter(|&i| g[i] != 0.0).collect();
    let mut out = vec![0.0; n];
    let axes: Vec<Vec<usize>> = (0..n).map(|i| model.unflatten(i)).collect();
    let m = model.n_modes_per_axis;
    for &i in &nz {
        for &j in &gz {
            let s: Vec<usize> = axes[i].iter().zip(&axes[j]).map(|(a, b)| (a + b) % m).collect();
            out[model.flatten(&s)] += f[i] * g[j];
        }
    }
    out
}

/// δ + g + g*g/2! + ⋯, truncated once the ℓ¹ tail is below 1e-12.
fn exp_convolution(model: &LatticeModel, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let norm: f64 = g.iter().sum();
    let mut out = vec![0.0; n];
    out[0] = 1.0;
    let mut term = out.clone();
    let mut k = 0usize;
    loop {
        k += 1;
        term = convolve(model, &term, g).into_iter().map(|x| x / k as f64).collect();
        for (o, t) in out.iter_mut().zip(&term) {
            *o += t;
        }
        // tail ≤ ‖g‖^{k+1}/(k+1)! · 1/(1 − ‖g‖/(k+2))
        let mut next = 1.0;
        for j in 1..=(k + 1) {
            next *= norm / j as f64;
        }
        let ratio = norm / (k as f64 + 2.0);
        if ratio < 1.0 && next / (1.0 - ratio) < 1e-12 {
            break;
        }
        if k > 400 {
            break;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct KernelBound {
    /// H on the difference grid, lattice units.
    pub h_grid: Vec<f64>,
    pub l1: f64,
    pub l2: f64,
    /// max over (p, q) of |𝒦̂(p,q)| − H(p − q)
    pub worst_excess: f64,
    pub worst_pair: (usize, usize),
    pub pointwise_ok: bool,
    pub l1_check: BoundCheck,
    pub l2_check: BoundCheck,
}

/// Kernel domination |𝒦̂(p,q)| ≤ H(p−q) and the ℓ¹/ℓ² bounds on H.
pub fn kernel_bound_h(model: &LatticeModel, profile: &PotentialProfile, k: &CMat, seed: u64) -> Result<KernelBound> {
    let s = model.spinor_dim();
    if k.nrows() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: k.nrows(),
        });
    }
    let schedule = profile.schedule();
    let g = spatial_kernel(model, profile)?;
    let [i0, i1, _] = schedule.integrated_norms();
    let ga: Vec<f64> = g.iter().map(|x| x * i0).collect();
    let gdot: Vec<f64> = g.iter().map(|x| x * i1).collect();
    let e = exp_convolution(model, &ga);
    let h = convolve(model, &convolve(model, &e, &gdot), &e);
    let ns = model.n_sites();
    let mut worst = f64::NEG_INFINITY;
    let mut worst_pair = (0, 0);
    for p in 0..ns {
        for q in 0..ns {
            let blk = k.view((p * s, q * s), (s, s)).into_owned();
            let ex = op_norm(&blk) - h[crate::model::difference_index(model, p, q)];
            if ex > worst {
                worst = ex;
                worst_pair = (p, q);
            }
        }
    }
    let (l1, l2) = kernel_norms(model, &h);
    let (gl1, gl2) = kernel_norms(model, &g);
    let nk = gl1.max(gl2);
    let [sup_h, sup_hd, _, _] = schedule.sup_norms();
    let eps = schedule.window;
    let rhs = eps * sup_hd * nk * (2.0 * eps * sup_h * nk).exp();
    let txt = inputs_text(model, profile);
    Ok(KernelBound {
        h_grid: h,
        l1,
        l2,
        worst_excess: worst,
        worst_pair,
        pointwise_ok: worst <= 1e-8,
        l1_check: BoundCheck::new("kernel_H_l1", l1, rhs, model.n_modes_per_axis, seed, &txt),
        l2_check: BoundCheck::new("kernel_H_l2", l2, rhs, model.n_modes_per_axis, seed, &txt),
    })
}

/// ‖P𝒦Q‖_HS against C·ε·(d²/dλ²)[e^{2ε(a + λb + λ²c/2)}(b + λc + λ²d/2)]
/// with a, b, c, d the |||·||| norms of A, Ȧ, Ä, A⃛.
pub fn hs_bound_k(
    model: &LatticeModel,
    profile: &PotentialProfile,
    d: &HermitianOperator,
    k: &CMat,
    seed: u64,
) -> Result<BoundCheck> {
    let (p, q) = pq(d);
    let lhs = pxq_hs(&p, k, &q);
    let schedule = profile.schedule();
    let g = spatial_kernel(model, profile)?;
    let (l1, l2) = kernel_norms(model, &g);
    let nk = l1.max(l2);
    let [s0, s1, s2, s3] = schedule.sup_norms();
    let eps = schedule.window;
    let expo = Jet::quadratic(s0 * nk, s1 * nk, s2 * nk).scale(2.0 * eps).exp();
    let poly = Jet::quadratic(s1 * nk, s2 * nk, s3 * nk);
    let rhs = hs_constant(model) * eps * (expo * poly).d2;
    Ok(BoundCheck::new(
        "hs_bound_K",
        lhs,
        rhs,
        model.n_modes_per_axis,
        seed,
        &inputs_text(model, profile),
    ))
}

/// 𝒦 for a model and profile with an explicit integrator step.
pub fn k_for(model: &LatticeModel, profile: &PotentialProfile, step: f64) -> Result<(HermitianOperator, KReport)> {
    let d = build_dirac(model)?;
    let a = build_potential(model, profile)?;
    let rep = compute_k_with(&d, &a, profile.schedule(), step)?;
    Ok((d, rep))
}

/// A random small electric or vector bump well inside the box.
pub fn random_profile(model: &LatticeModel, seed: u64, max_amplitude: f64) -> PotentialProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 * model.box_length;
    let radius = rng.random_range(0.15..0.3) * model.box_length;
    let room = (half - radius - 2.0 * model.spacing()).max(0.0);
    let n_comp = rng.random_range(1..=2);
    let components = (0..n_comp)
        .map(|_| Component {
            index: rng.random_range(0..=model.spatial_dim),
            shape: Shape::Bump {
                amplitude: rng.random_range(-max_amplitude..max_amplitude),
                radius,
                centre: (0..model.spatial_dim).map(|_| rng.random_range(-room..=room) * 0.5).collect(),
            },
        })
        .collect();
    PotentialProfile {
        components,
        epsilon: rng.random_range(0.5..2.0),
        t_adiabatic: 1.0,
        switch_kind: ScheduleKind::Switch,
        constant_override: None,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AdiabaticSweep {
    pub t_list: Vec<f64>,
    pub hs_norms: Vec<f64>,
    /// Integrator error estimates of each 𝒦.
    pub k_errors: Vec<f64>,
    pub hermitian_defects: Vec<f64>,
    pub fitted_exponent: f64,
    pub r_squared: f64,
}

impl AdiabaticSweep {
    /// exponent ≤ −1.5 with a trustworthy fit
    pub fn passes(&self) -> bool {
        self.r_squared >= 0.95 && self.fitted_exponent <= -1.5
    }

    pub fn conclusive(&self) -> bool {
        self.r_squared >= 0.95
    }
}

/// ‖P𝒦(𝒯)Q‖_HS over 𝒯 with a fixed absolute integrator step; the
/// Richardson-extrapolated 𝒦 is used.
pub fn adiabatic_sweep(
    model: &LatticeModel,
    base: &PotentialProfile,
    t_list: &[f64],
    step: f64,
) -> Result<AdiabaticSweep> {
    if t_list.len() < 2 {
        return Err(Error::Invalid("the adiabatic sweep needs at least two values of T".into()));
    }
    let lo = t_list.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = t_list.iter().cloned().fold(0.0, f64::max);
    if hi < 8.0 * lo {
        return Err(Error::Invalid("the adiabatic sweep must span a factor of at least 8 in T".into()));
    }
    let d = build_dirac(model)?;
    let a = build_potential(model, base)?;
    let (p, q) = pq(&d);
    let rows: Vec<Result<(f64, f64, f64)>> = t_list
        .par_iter()
        .map(|&t| {
            let prof = base.clone().with_t_adiabatic(t);
            let rep = compute_k_with(&d, &a, prof.schedule(), step)?;
            let k = rep.k_extrapolated.matrix();
            let herm = op_norm(&(k - k.adjoint()));
            Ok((pxq_hs(&p, k, &q), rep.error_estimate, herm))
        })
        .collect();
    let rows: Vec<(f64, f64, f64)> = rows.into_iter().collect::<Result<_>>()?;
    let hs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let fit = if hs.iter().all(|x| *x > 0.0) {
        loglog_fit(t_list, &hs)
    } else {
        LineFit {
            slope: f64::NEG_INFINITY,
            intercept: 0.0,
            r_squared: 1.0,
        }
    };
    Ok(AdiabaticSweep {
        t_list: t_list.to_vec(),
        hs_norms: hs,
        k_errors: rows.iter().map(|r| r.1).collect(),
        hermitian_defects: rows.iter().map(|r| r.2).collect(),
        fitted_exponent: fit.slope,
        r_squared: fit.r_squared,
    })
}

/// Radially symmetric momentum profile for the stationary-phase integral.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhaseSetup {
    pub spatial_dim: usize,
    pub mass: f64,
    /// Radial momentum cutoff.
    pub p_max: f64,
    /// Number of grid intervals on [0, p_max].
    pub n_points: usize,
}

impl PhaseSetup {
    pub fn dp(&self) -> f64 {
        self.p_max / self.n_points as f64
    }

    /// Time after which the uniform grid rephases.
    pub fn recurrence(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.dp()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseDecay {
    pub t: Vec<f64>,
    pub values: Vec<f64>,
    pub fitted_exponent: f64,
    pub r_squared: f64,
    pub expected_exponent: f64,
}

/// |∫ e^{iω(p)t} f(|p|) dᵈp| for d ∈ {1, 3} on a uniform radial grid.
///
/// The integrand p^{d−1}f(p)e^{iωt} is even in p, so the trapezoid rule on
/// [−p_max, p_max] converges spectrally for profiles that vanish at p_max.
pub fn stationary_phase<F: Fn(f64) -> f64 + Sync>(setup: &PhaseSetup, f: F, t_grid: &[f64]) -> Result<PhaseDecay> {
    if setup.spatial_dim != 1 && setup.spatial_dim != 3 {
        return Err(Error::Invalid(format!("spatial dimension must be 1 or 3, got {}", setup.spatial_dim)));
    }
    let rec = setup.recurrence();
    if let Some(t) = t_grid.iter().find(|&&t| t > 0.5 * rec) {
        return Err(Error::Invalid(format!(
            "t = {t} exceeds half the grid recurrence time {:.3}",
            rec
        )));
    }
    let dp = setup.dp();
    let m = setup.mass;
    let (jac, pref): (Box<dyn Fn(f64) -> f64 + Sync>, f64) = if setup.spatial_dim == 1 {
        (Box::new(|_| 1.0), 2.0)
    } else {
        (Box::new(|p: f64| p * p), 4.0 * std::f64::consts::PI)
    };
    let values: Vec<f64> = t_grid
        .par_iter()
        .map(|&t| {
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..=setup.n_points {
                let p = i as f64 * dp;
                let w = if i == 0 || i == setup.n_points { 0.5 } else { 1.0 };
                let om = (p * p + m * m).sqrt();
                acc += C64::from_polar(w * jac(p) * f(p), om * t);
            }
            (acc * dp * pref).norm()
        })
        .collect();
    let fit = loglog_fit(t_grid, &values);
    Ok(PhaseDecay {
        t: t_grid.to_vec(),
        values,
        fitted_exponent: fit.slope,
        r_squared: fit.r_squared,
        expected_exponent: -(setup.spatial_dim as f64) / 2.0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CutoffRow {
    pub cutoff: usize,
    pub dim: usize,
    pub hs1: f64,
    pub hs2: f64,
    /// ‖√A 𝒦 √(1−A)‖_HS with A = F₋(D)
    pub lundberg_k: f64,
    /// ‖√A (U_t − 1) √(1−A)‖_HS at the probe time
    pub lundberg_cocycle: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CutoffStudy {
    pub rows: Vec<CutoffRow>,
    /// |x_last/x_prev − 1| for hs1, hs2, lundberg_k, lundberg_cocycle
    pub last_growth: [f64; 4],
}

impl CutoffStudy {
    pub fn stable(&self, tol: f64) -> bool {
        self.last_growth.iter().all(|g| *g <= tol)
    }
}

/// ‖√A X √(1−A)‖_HS with A = F₋(D) at inverse temperature β.
pub fn lundberg_check(d: &HermitianOperator, x: &CMat, beta: f64) -> Result<f64> {
    let sa = matrix_function(d, |l| crate::linop::logistic(beta * l).sqrt())?;
    let sb = matrix_function(d, |l| crate::linop::logistic(-beta * l).sqrt())?;
    Ok(hs_norm(&cmul(&cmul(sa.matrix(), x), sb.matrix())))
}

/// (‖√A − √B‖_HS, ‖√(1−A) − √(1−B)‖_HS) for A = F₋(D+𝒦), B = F₋(D).
pub fn powers_stormer_pair(d: &HermitianOperator, k: &HermitianOperator, beta: f64) -> Result<(f64, f64)> {
    let h = d.add(k);
    let s = |m: &HermitianOperator, sgn: f64| matrix_function(m, move |l| crate::linop::logistic(sgn * beta * l).sqrt());
    let hs1 = hs_norm(&(s(&h, 1.0)?.matrix() - s(d, 1.0)?.matrix()));
    let hs2 = hs_norm(&(s(&h, -1.0)?.matrix() - s(d, -1.0)?.matrix()));
    Ok((hs1, hs2))
}

/// Powers–Størmer and Lundberg norms over a sequence of cutoffs.
pub fn powers_stormer(
    models: &[LatticeModel],
    profile: &PotentialProfile,
    beta: f64,
    step: f64,
    cocycle_time: f64,
) -> Result<CutoffStudy> {
    if models.len() < 2 {
        return Err(Error::Invalid("a cutoff study needs at least two models".into()));
    }
    let rows: Vec<Result<CutoffRow>> = models
        .par_iter()
        .map(|m| {
            let (d, rep) = k_for(m, profile, step)?;
            let (hs1, hs2) = powers_stormer_pair(&d, &rep.k, beta)?;
            let lk = lundberg_check(&d, rep.k.matrix(), beta)?;
            let c = rep.cocycle(&d);
            let n = d.dim();
            let u = cocycle_at(&c, cocycle_time) - CMat::identity(n, n);
            let lc = lundberg_check(&d, &u, beta)?;
            Ok(CutoffRow {
                cutoff: m.n_modes_per_axis,
                dim: m.dim(),
                hs1,
                hs2,
                lundberg_k: lk,
                lundberg_cocycle: lc,
            })
        })
        .collect();
    let rows: Vec<CutoffRow> = rows.into_iter().collect::<Result<_>>()?;
    let a = &rows[rows.len() - 2];
    let b = &rows[rows.len() - 1];
    let g = |x: f64, y: f64| if x == 0.0 && y == 0.0 { 0.0 } else { (y / x - 1.0).abs() };
    let last_growth = [
        g(a.hs1, b.hs1),
        g(a.hs2, b.hs2),
        g(a.lundberg_k, b.lundberg_k),
        g(a.lundberg_cocycle, b.lundberg_cocycle),
    ];
    Ok(CutoffStudy { rows, last_growth })
}

#[derive(Debug, Clone)]
pub struct Purification {
    /// [[A, √A√(1−A)], [√A√(1−A), A]]
    pub e: CMat,
    /// ‖E² − E‖
    pub defect: f64,
    /// Defect of [[A, √A√(1−A)], [√A√(1−A), 1−A]], for comparison.
    pub standard_defect: f64,
}

impl Purification {
    pub fn passes(&self) -> bool {
        self.defect <= 1e-6
    }
}

fn block2(a: &CMat, b: &CMat, c: &CMat, d: &CMat) -> CMat {
    let n = a.nrows();
    let mut m = CMat::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(a);
    m.view_mut((0, n), (n, n)).copy_from(b);
    m.view_mut((n, 0), (n, n)).copy_from(c);
    m.view_mut((n, n), (n, n)).copy_from(d);
    m
}

/// The 2×2 block operator built from A with both diagonal blocks equal to A,
/// and its distance from idempotency.
pub fn purification(a: &Covariance) -> Result<Purification> {
    let n = a.dim();
    let off = matrix_function(&a.op, |x| {
        let x = x.clamp(0.0, 1.0);
        (x * (1.0 - x)).sqrt()
    })?;
    let am = a.op.matrix();
    let e = block2(am, off.matrix(), off.matrix(), am);
    let defect = op_norm(&(cmul(&e, &e) - &e));
    let one_minus = CMat::identity(n, n) - am;
    let std = block2(am, off.matrix(), off.matrix(), &one_minus);
    let standard_defect = op_norm(&(cmul(&std, &std) - &std));
    Ok(Purification {
        e,
        defect,
        standard_defect,
    })
}

/// Pulse and switch schedules used by the bound checks share this helper.
pub fn schedule_of(profile: &PotentialProfile) -> Schedule {
    profile.schedule()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::testutil::{random_hermitian, rng};
    use proptest::prelude::*;

    fn m1(n: usize) -> LatticeModel {
        LatticeModel::new(1, n, 16.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn jet_second_derivative_of_exponential() {
        // d²/dλ² e^{a+λb+λ²c/2} at 0 = e^a(b² + c)
        let (a, b, c) = (0.3, 0.7, 1.1);
        let j = Jet::quadratic(a, b, c).exp();
        assert!((j.d2 - a.exp() * (b * b + c)).abs() < 1e-14);
        let p = Jet::quadratic(1.0, 2.0, 3.0) * Jet::quadratic(4.0, 5.0, 6.0);
        assert_eq!((p.v, p.d1, p.d2), (4.0, 13.0, 38.0));
        assert_eq!((Jet::constant(2.0) + Jet::quadratic(0.0, 1.0, 0.0)).d1, 1.0);
    }

    #[test]
    fn hs_constant_approaches_continuum() {
        // 1D: ∫ dp/(p²+m²)² = π/(2m³); spinor factor 1
        let m = LatticeModel::new(1, 401, 200.0, 1.0, 0.0).unwrap();
        let exact = std::f64::consts::PI / 2.0;
        // the mode sum stops at the edge of the Brillouin zone
        let p_max = m.dk() * 200.5;
        let tail = std::f64::consts::FRAC_PI_2 - p_max.atan() - p_max / (p_max * p_max + 1.0);
        let c2 = hs_constant(&m).powi(2);
        assert!((c2 + tail - exact).abs() < 1e-6, "{c2} {tail}");
    }

    #[test]
    fn zero_potential_gives_trivial_bounds() {
        let m = m1(21);
        let prof = PotentialProfile::zero(1.0);
        let b = hs_bound_u(&m, &prof, 1e-2, 0).unwrap();
        assert!(b.lhs < 1e-14);
        assert_eq!(b.rhs, 0.0);
        let (d, rep) = k_for(&m, &prof, 1e-2).unwrap();
        let kb = kernel_bound_h(&m, &prof, rep.k.matrix(), 0).unwrap();
        assert!(kb.h_grid.iter().all(|x| *x == 0.0) && kb.pointwise_ok);
        let hk = hs_bound_k(&m, &prof, &d, rep.k.matrix(), 0).unwrap();
        assert!(hk.lhs < 1e-14 && hk.rhs == 0.0);
    }

    #[test]
    fn bounds_hold_on_random_profiles() {
        let m = m1(25);
        for seed in 0..4 {
            let prof = random_profile(&m, seed, 0.3);
            let bu = hs_bound_u(&m, &prof, 2e-3, seed).unwrap();
            assert!(bu.passes(), "{bu:?}");
            let (d, rep) = k_for(&m, &prof, 2e-3).unwrap();
            let kb = kernel_bound_h(&m, &prof, rep.k.matrix(), seed).unwrap();
            assert!(kb.pointwise_ok, "excess {}", kb.worst_excess);
            assert!(kb.l1_check.passes() && kb.l2_check.passes());
            let hk = hs_bound_k(&m, &prof, &d, rep.k.matrix(), seed).unwrap();
            assert!(hk.passes(), "{hk:?}");
        }
    }

    #[test]
    fn hs_of_u_is_quadratic_in_coupling() {
        let m = m1(25);
        let base = PotentialProfile::electric_bump(0.2, 3.0, 1.0);
        let lam = [0.05, 0.1, 0.2];
        let v: Vec<f64> = lam
            .iter()
            .map(|&l| hs_bound_u(&m, &base.scaled(l), 2e-3, 0).unwrap().lhs)
            .collect();
        let fit = loglog_fit(&lam, &v);
        assert!((fit.slope - 1.0).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn constant_override_has_no_pkq() {
        let m = m1(15);
        let prof = PotentialProfile::constant(0.3, 1.0);
        let s = adiabatic_sweep(&m, &prof, &[1.0, 8.0], 1e-2).unwrap();
        assert!(s.hs_norms.iter().all(|x| *x < 1e-12), "{:?}", s.hs_norms);
    }

    #[test]
    fn stationary_phase_slopes() {
        let t: Vec<f64> = (0..12).map(|i| 10.0 * 1.3f64.powi(i)).collect();
        let s3 = PhaseSetup {
            spatial_dim: 3,
            mass: 1.0,
            p_max: 8.0,
            n_points: 4000,
        };
        let r3 = stationary_phase(&s3, |p| (-p * p / 2.0).exp(), &t).unwrap();
        assert!((r3.fitted_exponent + 1.5).abs() < 0.15, "{r3:?}");
        let s1 = PhaseSetup { spatial_dim: 1, ..s3 };
        let r1 = stationary_phase(&s1, |p| (-p * p / 2.0).exp(), &t).unwrap();
        assert!((r1.fitted_exponent + 0.5).abs() < 0.1, "{r1:?}");
        let z = stationary_phase(&s1, |_| 0.0, &[10.0]).unwrap();
        assert_eq!(z.values[0], 0.0);
        assert!(stationary_phase(&s1, |_| 1.0, &[1e5]).is_err());
    }

    #[test]
    fn lundberg_and_powers_stormer_trivial_cases() {
        let mut r = rng(70);
        let d = random_hermitian(6, 2.0, &mut r);
        assert_eq!(lundberg_check(&d, &CMat::zeros(6, 6), 1.0).unwrap(), 0.0);
        let (a, b) = powers_stormer_pair(&d, &HermitianOperator::zeros(6), 1.0).unwrap();
        assert!(a < 1e-15 && b < 1e-15);
        // commuting scalar K = c: per-mode oracle
        let c = 0.3;
        let (a, b) = powers_stormer_pair(&d, &HermitianOperator::identity(6).scale(c), 1.0).unwrap();
        let l = crate::linop::logistic;
        let oa: f64 = d.eigenvalues().iter().map(|x| (l(x + c).sqrt() - l(*x).sqrt()).powi(2)).sum();
        let ob: f64 = d.eigenvalues().iter().map(|x| (l(-x - c).sqrt() - l(-*x).sqrt()).powi(2)).sum();
        assert!((a - oa.sqrt()).abs() < 1e-13 && (b - ob.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn purification_examples() {
        let z = purification(&Covariance::new(HermitianOperator::zeros(3)).unwrap()).unwrap();
        assert!(z.defect < 1e-15 && z.passes());
        let one = purification(&Covariance::new(HermitianOperator::identity(3)).unwrap()).unwrap();
        assert!(one.defect < 1e-15);
        let half = purification(&Covariance::new(HermitianOperator::identity(2).scale(0.5)).unwrap()).unwrap();
        assert!(half.defect < 1e-15);
        assert!((half.e[(0, 2)].re - 0.5).abs() < 1e-15);
        let gen = purification(&Covariance::new(HermitianOperator::from_real_diagonal(&[0.3, 0.8])).unwrap()).unwrap();
        assert!(gen.defect > 0.1 && !gen.passes());
        assert!(gen.standard_defect < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn jet_matches_finite_differences(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, s in 0.1f64..2.0) {
            let f = |l: f64| (s * (a + l * b + l * l * c / 2.0)).exp() * (b + l * c);
            let h = 1e-3;
            let d2 = (-f(2.0 * h) + 16.0 * f(h) - 30.0 * f(0.0) + 16.0 * f(-h) - f(-2.0 * h)) / (12.0 * h * h);
            let j = Jet::quadratic(a, b, c).scale(s).exp() * Jet::quadratic(b, c, 0.0);
            prop_assert!((j.d2 - d2).abs() < 1e-6 * d2.abs().max(1.0));
        }

        #[test]
        fn standard_purification_is_a_projection(seed in 0u64..5000, beta in 0.2f64..3.0) {
            let mut r = rng(seed);
            let d = random_hermitian(5, 2.0, &mut r);
            let a = Covariance::fermi(&d, beta).unwrap();
            let p = purification(&a).unwrap();
            prop_assert!(p.standard_defect < 1e-12);
            prop_assert!(p.defect >= 0.0);
        }

        #[test]
        fn bound_check_margin_sign(lhs in 0.0f64..10.0, rhs in 0.0f64..10.0) {
            let b = BoundCheck::new("x", lhs, rhs, 1, 0, "");
            prop_assert_eq!(b.passes(), lhs <= rhs * (1.0 + 1e-9));
            prop_assert_eq!(b.inputs_digest.len(), 64);
        }

        #[test]
        fn lundberg_vanishes_on_commuting_perturbations(seed in 0u64..5000) {
            let mut r = rng(seed);
            let d = random_hermitian(6, 2.0, &mut r);
            let k = matrix_function(&d, |x| 0.2 * x.cos()).unwrap();
            let x = lundberg_check(&d, k.matrix(), 1.0).unwrap();
            // √A f(D) √(1−A) is the diagonal function √(a(1−a)) f, not zero
            let diag: f64 = d.eigenvalues().iter().map(|&l| {
                let a = crate::linop::logistic(l);
                a * (1.0 - a) * (0.2 * l.cos()).powi(2)
            }).sum();
            prop_assert!((x - diag.sqrt()).abs() < 1e-12);
        }
    }
}
