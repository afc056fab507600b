//! Ordered exponentials, the interaction operator 𝒦, cocycles and Möller approximants.
//!
//! Evolutions are integrated in the Schrödinger picture, Y(t) = V_t e^{itD},
//! with dY/dt = iY(D + Aslash(t)), by the symmetric splitting
//! Y ← Y e^{iτD/2} e^{iτ Aslash(t_mid)} e^{iτD/2}. Every factor is unitary and
//! the scheme is second order. All work is done in the eigenbasis of D.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linop::{cmul, fermi_factor, op_norm, CMat, CVec, HermitianOperator, Sign, SpectralDecomposition, C64};
use crate::model::{build_potential, LatticeModel, PotentialProfile, Schedule};
use crate::quad::{loglog_fit, LineFit};

#[derive(Debug, Clone)]
pub struct OrderedEvolution {
    pub v: CMat,
    pub t0: f64,
    pub t1: f64,
    pub step_count: usize,
    pub unitarity_defect: f64,
}

pub fn unitarity_defect(u: &CMat) -> f64 {
    let n = u.nrows();
    op_norm(&(cmul(&u.adjoint(), u) - CMat::identity(n, n)))
}

/// Time-dependent potential driving an evolution.
pub enum Drive<'a> {
    /// Aslash(t) = g(t)·A for a fixed operator A.
    Switched { a: &'a HermitianOperator, schedule: Schedule },
    /// Arbitrary hermitian family; diagonalized at every step.
    General(&'a (dyn Fn(f64) -> HermitianOperator + Sync)),
}

fn scale_columns(m: &mut CMat, phases: &[C64]) {
    for (j, p) in phases.iter().enumerate() {
        m.column_mut(j).iter_mut().for_each(|z| *z *= *p);
    }
}

/// e^{iτ Ã} in D's eigenbasis for the drive at time t.
struct StepFactory<'a> {
    drive: &'a Drive<'a>,
    d_sd: &'a SpectralDecomposition,
    // eigen data of Ã = U_D† A U_D for the switched case
    w: Option<(CMat, CMat, Vec<f64>)>,
}

impl<'a> StepFactory<'a> {
    fn new(drive: &'a Drive<'a>, d_sd: &'a SpectralDecomposition) -> Self {
        let w = match drive {
            Drive::Switched { a, .. } => {
                let at = d_sd.to_eigenbasis(a.matrix());
                let h = HermitianOperator::symmetrized(at, 0.0);
                let sd = h.spectral();
                Some((sd.eigenvectors.clone(), sd.eigenvectors.adjoint(), sd.eigenvalues.clone()))
            }
            Drive::General(_) => None,
        };
        StepFactory { drive, d_sd, w }
    }

    /// Y · e^{iτÃ(t)}
    fn apply(&self, y: &CMat, t: f64, tau: f64) -> Result<CMat> {
        match (self.drive, &self.w) {
            (Drive::Switched { schedule, .. }, Some((w, wt, lam))) => {
                let g = schedule.eval(t).h;
                if g == 0.0 {
                    return Ok(y.clone());
                }
                let mut yw = cmul(y, w);
                let ph: Vec<C64> = lam.iter().map(|l| C64::from_polar(1.0, tau * g * l)).collect();
                scale_columns(&mut yw, &ph);
                Ok(cmul(&yw, wt))
            }
            (Drive::General(f), _) => {
                let a = f(t);
                let at = self.d_sd.to_eigenbasis(a.matrix());
                let asym = op_norm(&(&at - at.adjoint()));
                if asym > 1e-9 * op_norm(&at).max(1.0) {
                    return Err(Error::NonHermitian { asymmetry: asym, tol: 1e-9 });
                }
                let h = HermitianOperator::symmetrized(at, 0.0);
                Ok(cmul(y, &h.exp_i(tau)))
            }
            _ => unreachable!("switched drive always carries eigen data"),
        }
    }
}

/// Strang integration of Ỹ (eigenbasis of D) from t0 to t1 in `steps` steps.
/// `visit(k, t_k, Ỹ_k)` is called at every grid point including both ends.
fn strang<F>(d_sd: &SpectralDecomposition, drive: &Drive, t0: f64, t1: f64, steps: usize, mut visit: F) -> Result<CMat>
where
    F: FnMut(usize, f64, &CMat),
{
    let n = d_sd.dim();
    let tau = (t1 - t0) / steps as f64;
    let lam = &d_sd.eigenvalues;
    let half: Vec<C64> = lam.iter().map(|l| C64::from_polar(1.0, 0.5 * tau * l)).collect();
    let mut y = CMat::from_diagonal(&nalgebra::DVector::from_iterator(
        n,
        lam.iter().map(|l| C64::from_polar(1.0, t0 * l)),
    ));
    let fac = StepFactory::new(drive, d_sd);
    visit(0, t0, &y);
    for k in 0..steps {
        let tm = t0 + (k as f64 + 0.5) * tau;
        scale_columns(&mut y, &half);
        y = fac.apply(&y, tm, tau)?;
        scale_columns(&mut y, &half);
        visit(k + 1, t0 + (k + 1) as f64 * tau, &y);
    }
    Ok(y)
}

fn steps_for(t0: f64, t1: f64, step: f64) -> Result<usize> {
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("step must be positive, got {step}")));
    }
    if !(t1 >= t0) {
        return Err(Error::Invalid("evolution needs t1 >= t0".into()));
    }
    Ok((((t1 - t0) / step).ceil() as usize).max(1))
}

/// V(t1) from V(t0) = 1 for dV/dt = i V e^{itD} Aslash(t) e^{−itD}.
pub fn dyson_evolve(d: &HermitianOperator, drive: &Drive, t0: f64, t1: f64, step: f64) -> Result<OrderedEvolution> {
    let steps = steps_for(t0, t1, step)?;
    let sd = d.spectral();
    let mut y = strang(sd, drive, t0, t1, steps, |_, _, _| {})?;
    // V = Y e^{−i t1 D}, back in the original basis
    let back: Vec<C64> = sd.eigenvalues.iter().map(|l| C64::from_polar(1.0, -t1 * l)).collect();
    scale_columns(&mut y, &back);
    let v = sd.from_eigenbasis(&y);
    let defect = unitarity_defect(&v);
    Ok(OrderedEvolution {
        v,
        t0,
        t1,
        step_count: steps,
        unitarity_defect: defect,
    })
}

#[derive(Debug, Clone)]
pub struct KReport {
    /// Quadrature route ∫ V_s e^{isD} Ȧslash(s) e^{−isD} V_s⁻¹ ds.
    pub k: HermitianOperator,
    /// Dual route V₀ (D + Aslash₊) V₀⁻¹ − D.
    pub k_dual: HermitianOperator,
    /// Richardson combination of the quadrature route at steps τ and 2τ.
    pub k_extrapolated: HermitianOperator,
    pub v0: CMat,
    pub aplus: HermitianOperator,
    pub disagreement: f64,
    pub error_estimate: f64,
    pub step: f64,
    pub step_count: usize,
    pub unitarity_defect: f64,
}

impl KReport {
    pub fn cocycle(&self, d: &HermitianOperator) -> Cocycle {
        Cocycle {
            d: d.clone(),
            k: self.k.clone(),
            v0: self.v0.clone(),
            aplus: self.aplus.clone(),
            h_plus: d.add(&self.aplus),
        }
    }
}

struct KRun {
    k_int: CMat,
    k_dual: CMat,
    y0: CMat,
}

fn k_run(d_sd: &SpectralDecomposition, a_eig: &CMat, a: &HermitianOperator, schedule: Schedule, steps: usize) -> Result<KRun> {
    let (t0, t1) = schedule.support();
    let tau = (t1 - t0) / steps as f64;
    let n = d_sd.dim();
    let mut k_int = CMat::zeros(n, n);
    let drive = Drive::Switched { a, schedule };
    let y0 = strang(d_sd, &drive, t0, t1, steps, |k, t, y| {
        let hdot = schedule.eval(t).hdot;
        if hdot != 0.0 {
            let w = if k == 0 || k == steps { 0.5 * tau } else { tau };
            let ya = cmul(y, a_eig);
            k_int += cmul(&ya, &y.adjoint()) * C64::new(w * hdot, 0.0);
        }
    })?;
    let mut hplus = a_eig * C64::new(schedule.eval(t1).h, 0.0);
    for (i, l) in d_sd.eigenvalues.iter().enumerate() {
        hplus[(i, i)] += C64::new(*l, 0.0);
    }
    let mut k_dual = cmul(&cmul(&y0, &hplus), &y0.adjoint());
    for (i, l) in d_sd.eigenvalues.iter().enumerate() {
        k_dual[(i, i)] -= C64::new(*l, 0.0);
    }
    Ok(KRun { k_int, k_dual, y0 })
}

/// 𝒦 for a potential switched on by `schedule`, by both routes.
///
/// The step is rounded down so that the window holds an even number of
/// steps; a second run at twice the step gives the error estimate.
pub fn compute_k_with(d: &HermitianOperator, a: &HermitianOperator, schedule: Schedule, step: f64) -> Result<KReport> {
    let (t0, t1) = schedule.support();
    let mut steps = steps_for(t0, t1, step)?;
    if steps % 2 == 1 {
        steps += 1;
    }
    let sd = d.spectral();
    let a_eig = sd.to_eigenbasis(a.matrix());
    let (fine, coarse) = rayon::join(
        || k_run(sd, &a_eig, a, schedule, steps),
        || k_run(sd, &a_eig, a, schedule, steps / 2),
    );
    let (fine, coarse) = (fine?, coarse?);
    let est_int = op_norm(&(&fine.k_int - &coarse.k_int)) / 3.0;
    let est_dual = op_norm(&(&fine.k_dual - &coarse.k_dual)) / 3.0;
    let extrap = (&fine.k_int * C64::new(4.0, 0.0) - &coarse.k_int) / C64::new(3.0, 0.0);
    let disagreement = op_norm(&(&fine.k_int - &fine.k_dual));
    let knorm = op_norm(&fine.k_dual);
    let estimate = est_int + est_dual;
    let floor = 1e-12 * (1.0 + knorm);
    if disagreement > 100.0 * estimate.max(floor) {
        return Err(Error::Inconsistent(format!(
            "quadrature and dual routes for K differ by {disagreement:.3e}, estimated integrator error {estimate:.3e}"
        )));
    }
    let to_op = |m: &CMat| HermitianOperator::symmetrized(sd.from_eigenbasis(m), 0.0);
    let back: Vec<C64> = sd.eigenvalues.iter().map(|l| C64::from_polar(1.0, -t1 * l)).collect();
    let mut v0e = fine.y0.clone();
    scale_columns(&mut v0e, &back);
    let v0 = sd.from_eigenbasis(&v0e);
    let defect = unitarity_defect(&v0);
    Ok(KReport {
        k: to_op(&fine.k_int),
        k_dual: to_op(&fine.k_dual),
        k_extrapolated: to_op(&extrap),
        v0,
        aplus: a.scale(schedule.eval(t1).h),
        disagreement,
        error_estimate: estimate,
        step: (t1 - t0) / steps as f64,
        step_count: steps,
        unitarity_defect: defect,
    })
}

/// 𝒦 for a lattice model and profile; `step` defaults to 1e−3 of the window.
pub fn compute_k(model: &LatticeModel, profile: &PotentialProfile, step: Option<f64>) -> Result<(HermitianOperator, KReport)> {
    let d = crate::model::build_dirac(model)?;
    let a = build_potential(model, profile)?;
    let schedule = profile.schedule();
    let step = step.unwrap_or(1e-3 * schedule.window);
    let rep = compute_k_with(&d, &a, schedule, step)?;
    Ok((d, rep))
}

/// The cocycle U_t = V₀ e^{it(D+Aslash₊)} V₀⁻¹ e^{−itD}.
#[derive(Debug, Clone)]
pub struct Cocycle {
    pub d: HermitianOperator,
    pub k: HermitianOperator,
    pub v0: CMat,
    pub aplus: HermitianOperator,
    h_plus: HermitianOperator,
}

impl Cocycle {
    pub fn new(d: HermitianOperator, k: HermitianOperator, v0: CMat, aplus: HermitianOperator) -> Self {
        let h_plus = d.add(&aplus);
        Cocycle {
            d,
            k,
            v0,
            aplus,
            h_plus,
        }
    }
}

pub fn cocycle_at(c: &Cocycle, t: f64) -> CMat {
    if t >= 0.0 {
        let inner = cmul(&cmul(&c.v0, &c.h_plus.exp_i(t)), &c.v0.adjoint());
        cmul(&inner, &c.d.exp_i(-t))
    } else {
        let s = -t;
        let us = cocycle_at(c, s);
        cmul(&cmul(&c.d.exp_i(-s), &us.adjoint()), &c.d.exp_i(s))
    }
}

/// e^{it(D+K)} e^{−itD}
pub fn interaction_unitary(d: &HermitianOperator, h: &HermitianOperator, t: f64) -> CMat {
    cmul(&h.exp_i(t), &d.exp_i(-t))
}

/// ‖U_{t+s} − U_t e^{itD} U_s e^{−itD}‖
pub fn cocycle_defect(c: &Cocycle, t: f64, s: f64) -> f64 {
    let lhs = cocycle_at(c, t + s);
    let rhs = cmul(&cmul(&cocycle_at(c, t), &c.d.exp_i(t)), &cmul(&cocycle_at(c, s), &c.d.exp_i(-t)));
    op_norm(&(lhs - rhs))
}

fn apply_exp(sd: &SpectralDecomposition, t: f64, f: &CVec) -> CVec {
    let u = &sd.eigenvectors;
    let mut c = u.adjoint() * f;
    for (z, l) in c.iter_mut().zip(&sd.eigenvalues) {
        *z *= C64::from_polar(1.0, t * l);
    }
    u * c
}

#[derive(Debug, Clone)]
pub struct MollerReport {
    pub t_grid: Vec<f64>,
    /// max over probes of | ‖Ω(t)f‖ − ‖f‖ |
    pub isometry_defect: Vec<f64>,
    /// per probe, ‖(Ω(t_{i+1}) − Ω(t_i)) f‖
    pub step_changes: Vec<Vec<f64>>,
    /// per probe, ‖g(D+K)Ω(t)f − Ω(t)g(D)f‖
    pub intertwining: Vec<Vec<f64>>,
    /// per probe, running Cesàro mean of the intertwining residual
    pub intertwining_cesaro: Vec<Vec<f64>>,
}

/// Approximants Ω(t) = e^{it(D+K)} e^{−itD} applied to probe vectors.
pub fn moller(d: &HermitianOperator, k: &HermitianOperator, beta: f64, t_grid: &[f64], probes: &[CVec]) -> Result<MollerReport> {
    if t_grid.windows(2).any(|w| w[1] <= w[0]) || t_grid.iter().any(|&t| t < 0.0) {
        return Err(Error::Invalid("t_grid must be nonnegative and increasing".into()));
    }
    let h = d.add(k);
    let gd = fermi_factor(d, beta, Sign::Minus)?;
    let gh = fermi_factor(&h, beta, Sign::Minus)?;
    let dsd = d.spectral();
    let hsd = h.spectral();
    let per_probe: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = probes
        .par_iter()
        .map(|f| {
            let nf = f.norm();
            let gdf = gd.matrix() * f;
            let mut iso = Vec::new();
            let mut changes = Vec::new();
            let mut inter = Vec::new();
            let mut prev: Option<CVec> = None;
            for &t in t_grid {
                let of = apply_exp(hsd, t, &apply_exp(dsd, -t, f));
                iso.push((of.norm() - nf).abs());
                let og = apply_exp(hsd, t, &apply_exp(dsd, -t, &gdf));
                inter.push((gh.matrix() * &of - og).norm());
                if let Some(p) = &prev {
                    changes.push((&of - p).norm());
                }
                prev = Some(of);
            }
            let mut ces = Vec::with_capacity(inter.len());
            let mut acc = 0.0;
            for (i, r) in inter.iter().enumerate() {
                acc += r;
                ces.push(acc / (i + 1) as f64);
            }
            (iso, changes, inter, ces)
        })
        .collect();
    let mut isometry_defect = vec![0.0f64; t_grid.len()];
    for (iso, _, _, _) in &per_probe {
        for (a, b) in isometry_defect.iter_mut().zip(iso) {
            *a = a.max(*b);
        }
    }
    Ok(MollerReport {
        t_grid: t_grid.to_vec(),
        isometry_defect,
        step_changes: per_probe.iter().map(|p| p.1.clone()).collect(),
        intertwining: per_probe.iter().map(|p| p.2.clone()).collect(),
        intertwining_cesaro: per_probe.iter().map(|p| p.3.clone()).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct CookCurve {
    pub t: Vec<f64>,
    pub norms: Vec<f64>,
    pub fit: Option<LineFit>,
}

/// ‖K e^{−itH} f‖ along `t_grid`, with a log-log fit over `fit_window`.
pub fn cook_decay(h: &HermitianOperator, k: &CMat, f: &CVec, t_grid: &[f64], fit_window: (f64, f64)) -> CookCurve {
    let sd = h.spectral();
    let norms: Vec<f64> = t_grid.par_iter().map(|&t| (k * apply_exp(sd, -t, f)).norm()).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = t_grid
        .iter()
        .zip(&norms)
        .filter(|(t, n)| **t >= fit_window.0 && **t <= fit_window.1 && **n > 0.0)
        .map(|(t, n)| (*t, *n))
        .unzip();
    let fit = if xs.len() >= 2 { Some(loglog_fit(&xs, &ys)) } else { None };
    CookCurve {
        t: t_grid.to_vec(),
        norms,
        fit,
    }
}

/// Spinor wavepacket exp(−(x−x0)²/4σ²) e^{ik0 x} in the plane-wave basis,
/// projected on the positive-energy subspace of the free operator and normalized.
pub fn gaussian_packet(model: &LatticeModel, x0: f64, k0: f64, sigma: f64) -> CVec {
    let s = model.spinor_dim();
    let ns = model.n_sites();
    let mut v = CVec::zeros(model.dim());
    for mode in 0..ns {
        let k = model.momentum(mode);
        let dk2: f64 = k
            .iter()
            .enumerate()
            .map(|(a, ka)| {
                let c = if a == 0 { k0 } else { 0.0 };
                (ka - c) * (ka - c)
            })
            .sum();
        let amp = (-dk2 * sigma * sigma).exp() * C64::from_polar(1.0, -k[0] * x0);
        // positive-energy spinor of the block
        let block = crate::model::dirac_block(model, &k);
        let eig = block.symmetric_eigen();
        let top = (0..s).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap();
        for r in 0..s {
            v[mode * s + r] = amp * eig.eigenvectors[(r, top)];
        }
    }
    let n = v.norm();
    v / C64::new(n, 0.0)
}
