//! Lattice Dirac operator, external potentials and switching schedules.
//!
//! The one-particle space is spanned by plane waves on a periodic box with
//! `n` modes per axis (n odd so that k = 0 is on the grid). Basis index is
//! `mode * spinor_dim + spinor`, modes flattened row-major over the axes.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::{CMat, HermitianOperator, SpectralDecomposition, C64};
use crate::quad::Rule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeModel {
    pub spatial_dim: usize,
    pub n_modes_per_axis: usize,
    pub box_length: f64,
    pub mass: f64,
    #[serde(default)]
    pub mu: f64,
}

impl LatticeModel {
    pub fn new(spatial_dim: usize, n_modes_per_axis: usize, box_length: f64, mass: f64, mu: f64) -> Result<Self> {
        let m = LatticeModel {
            spatial_dim,
            n_modes_per_axis,
            box_length,
            mass,
            mu,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_dim != 1 && self.spatial_dim != 3 {
            return Err(Error::Invalid(format!("spatial_dim must be 1 or 3, got {}", self.spatial_dim)));
        }
        if self.n_modes_per_axis == 0 || self.n_modes_per_axis % 2 == 0 {
            return Err(Error::Invalid(format!(
                "n_modes_per_axis must be odd, got {}",
                self.n_modes_per_axis
            )));
        }
        if !(self.box_length > 0.0) {
            return Err(Error::Invalid("box_length must be positive".into()));
        }
        if !(self.mass > 0.0) {
            return Err(Error::Invalid(format!("mass must be positive, got {}", self.mass)));
        }
        Ok(())
    }

    pub fn spinor_dim(&self) -> usize {
        if self.spatial_dim == 1 {
            2
        } else {
            4
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_modes_per_axis.pow(self.spatial_dim as u32)
    }

    pub fn dim(&self) -> usize {
        self.spinor_dim() * self.n_sites()
    }

    /// Momentum spacing 2π/L.
    pub fn dk(&self) -> f64 {
        2.0 * PI / self.box_length
    }

    pub fn spacing(&self) -> f64 {
        self.box_length / self.n_modes_per_axis as f64
    }

    fn centre(&self) -> f64 {
        (self.n_modes_per_axis as f64 - 1.0) / 2.0
    }

    /// Grid momenta along one axis, symmetric about 0.
    pub fn axis_momenta(&self) -> Vec<f64> {
        let c = self.centre();
        (0..self.n_modes_per_axis).map(|j| self.dk() * (j as f64 - c)).collect()
    }

    /// Grid positions along one axis, symmetric about 0.
    pub fn axis_positions(&self) -> Vec<f64> {
        let c = self.centre();
        (0..self.n_modes_per_axis).map(|j| self.spacing() * (j as f64 - c)).collect()
    }

    /// Axis indices of a flattened mode or site.
    pub fn unflatten(&self, idx: usize) -> Vec<usize> {
        let n = self.n_modes_per_axis;
        let mut out = vec![0; self.spatial_dim];
        let mut r = idx;
        for a in (0..self.spatial_dim).rev() {
            out[a] = r % n;
            r /= n;
        }
        out
    }

    pub fn flatten(&self, axes: &[usize]) -> usize {
        axes.iter().fold(0, |acc, &j| acc * self.n_modes_per_axis + j)
    }

    pub fn momentum(&self, mode: usize) -> Vec<f64> {
        let k = self.axis_momenta();
        self.unflatten(mode).iter().map(|&j| k[j]).collect()
    }

    pub fn position(&self, site: usize) -> Vec<f64> {
        let x = self.axis_positions();
        self.unflatten(site).iter().map(|&j| x[j]).collect()
    }

    pub fn omega(&self, k: &[f64]) -> f64 {
        (k.iter().map(|v| v * v).sum::<f64>() + self.mass * self.mass).sqrt()
    }

    /// Whether a site lies in the first or last layer along some axis.
    pub fn is_boundary_site(&self, site: usize) -> bool {
        let n = self.n_modes_per_axis;
        self.unflatten(site).iter().any(|&j| j == 0 || j == n - 1)
    }

    /// Largest group velocity on the grid, always < 1.
    pub fn max_group_velocity(&self) -> f64 {
        let kmax = self.axis_momenta().iter().cloned().fold(0.0, f64::max) * (self.spatial_dim as f64).sqrt();
        kmax / (kmax * kmax + self.mass * self.mass).sqrt()
    }

    /// Same box and mass with a different number of modes.
    pub fn with_modes(&self, n: usize) -> LatticeModel {
        LatticeModel {
            n_modes_per_axis: n,
            ..self.clone()
        }
    }
}

fn pauli() -> [[[C64; 2]; 2]; 3] {
    let z = C64::new(0.0, 0.0);
    let o = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    [[[z, o], [o, z]], [[z, -i], [i, z]], [[o, z], [z, -o]]]
}

/// α matrices and β for the chosen representation.
///
/// One dimension: α = σ₁, β = σ₃. Three dimensions: Dirac representation.
pub fn dirac_matrices(spatial_dim: usize) -> (Vec<CMat>, CMat) {
    let s = pauli();
    if spatial_dim == 1 {
        let a = CMat::from_fn(2, 2, |r, c| s[0][r][c]);
        let b = CMat::from_fn(2, 2, |r, c| s[2][r][c]);
        return (vec![a], b);
    }
    let alphas = (0..3)
        .map(|k| {
            CMat::from_fn(4, 4, |r, c| match (r < 2, c < 2) {
                (true, false) => s[k][r][c - 2],
                (false, true) => s[k][r - 2][c],
                _ => C64::new(0.0, 0.0),
            })
        })
        .collect();
    let beta = CMat::from_fn(4, 4, |r, c| {
        if r != c {
            C64::new(0.0, 0.0)
        } else if r < 2 {
            C64::new(1.0, 0.0)
        } else {
            C64::new(-1.0, 0.0)
        }
    });
    (alphas, beta)
}

/// α·k + βm for a single momentum.
pub fn dirac_block(model: &LatticeModel, k: &[f64]) -> CMat {
    let (alphas, beta) = dirac_matrices(model.spatial_dim);
    let mut b = beta * C64::new(model.mass, 0.0);
    for (a, &kk) in alphas.iter().zip(k) {
        b += a * C64::new(kk, 0.0);
    }
    b
}

/// Free Dirac operator D − μ in the plane-wave basis.
///
/// The spectral decomposition is assembled block by block and attached.
pub fn build_dirac(model: &LatticeModel) -> Result<HermitianOperator> {
    model.validate()?;
    let s = model.spinor_dim();
    let n = model.dim();
    let mut m = CMat::zeros(n, n);
    let mut pairs: Vec<(f64, usize, Vec<C64>)> = Vec::with_capacity(n);
    for mode in 0..model.n_sites() {
        let k = model.momentum(mode);
        let block = dirac_block(model, &k);
        for r in 0..s {
            for c in 0..s {
                m[(mode * s + r, mode * s + c)] = block[(r, c)];
            }
            m[(mode * s + r, mode * s + r)] -= C64::new(model.mu, 0.0);
        }
        let eig = block.symmetric_eigen();
        for j in 0..s {
            pairs.push((eig.eigenvalues[j] - model.mu, mode * s, eig.eigenvectors.column(j).iter().cloned().collect()));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut vecs = CMat::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (col, (lam, off, v)) in pairs.into_iter().enumerate() {
        let lead = v.iter().find(|z| z.norm() > 1e-8).copied().unwrap_or(C64::new(1.0, 0.0));
        let phase = lead.conj() / lead.norm();
        for (r, z) in v.iter().enumerate() {
            vecs[(off + r, col)] = z * phase;
        }
        vals.push(lam);
    }
    Ok(HermitianOperator::from_parts(
        m,
        SpectralDecomposition {
            eigenvalues: vals,
            eigenvectors: vecs,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Smooth monotone switch from 0 at −window to 1 at 0.
    #[default]
    Switch,
    /// Smooth bump supported in [−window, 0], peak value 1.
    Pulse,
}

fn bump(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        (-1.0 / (x * (1.0 - x))).exp()
    }
}

/// b, b', b'' for b(x) = exp(−1/(x(1−x))).
fn bump_jet(x: f64) -> [f64; 3] {
    if x <= 0.0 || x >= 1.0 {
        return [0.0; 3];
    }
    let u = x * (1.0 - x);
    let du = 1.0 - 2.0 * x;
    let b = (-1.0 / u).exp();
    let q1 = du / (u * u);
    let q2 = (-2.0 * u - 2.0 * du * du) / (u * u * u);
    [b, q1 * b, (q2 + q1 * q1) * b]
}

const BUMP_NODES: usize = 96;

fn bump_rule() -> &'static (Rule, f64) {
    static RULE: OnceLock<(Rule, f64)> = OnceLock::new();
    RULE.get_or_init(|| {
        let r = Rule::gauss_legendre(BUMP_NODES, 0.0, 1.0);
        let z = r.integrate(bump);
        (r, z)
    })
}

/// ∫₀ˣ b / ∫₀¹ b, evaluated from whichever end is closer.
fn bump_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let (_, z) = bump_rule();
    if x > 0.5 {
        return 1.0 - bump_cdf(1.0 - x);
    }
    let r = Rule::gauss_legendre(BUMP_NODES, 0.0, x);
    r.integrate(bump) / z
}

/// Time profile g(t) with support in [−window, 0].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub window: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchValues {
    pub h: f64,
    pub hdot: f64,
    pub hddot: f64,
    pub hdddot: f64,
}

impl Schedule {
    pub fn switch(window: f64) -> Schedule {
        Schedule {
            window,
            kind: ScheduleKind::Switch,
        }
    }

    pub fn pulse(window: f64) -> Schedule {
        Schedule {
            window,
            kind: ScheduleKind::Pulse,
        }
    }

    pub fn support(&self) -> (f64, f64) {
        (-self.window, 0.0)
    }

    pub fn eval(&self, t: f64) -> SwitchValues {
        let w = self.window;
        let x = (t + w) / w;
        match self.kind {
            ScheduleKind::Switch => {
                let (_, z) = bump_rule();
                let j = bump_jet(x);
                SwitchValues {
                    h: bump_cdf(x),
                    hdot: j[0] / (z * w),
                    hddot: j[1] / (z * w * w),
                    hdddot: j[2] / (z * w * w * w),
                }
            }
            ScheduleKind::Pulse => {
                let peak = bump(0.5);
                let j = bump_jet(x);
                // third derivative by differencing the exact second derivative
                let e = 1e-5;
                let d3 = (bump_jet(x + e)[2] - bump_jet(x - e)[2]) / (2.0 * e);
                SwitchValues {
                    h: j[0] / peak,
                    hdot: j[1] / (peak * w),
                    hddot: j[2] / (peak * w * w),
                    hdddot: d3 / (peak * w * w * w),
                }
            }
        }
    }

    /// sup_t of |g|, |ġ|, |g̈|, |g⃛| sampled on a fine grid.
    pub fn sup_norms(&self) -> [f64; 4] {
        let mut out = [0.0f64; 4];
        let n = 4000;
        for i in 0..=n {
            let t = -self.window * (1.0 - i as f64 / n as f64);
            let v = self.eval(t);
            for (o, x) in out.iter_mut().zip([v.h, v.hdot, v.hddot, v.hdddot]) {
                *o = o.max(x.abs());
            }
        }
        out
    }

    /// ∫|g(t)| dt, ∫|ġ| dt and ∫|g̈| dt over the support.
    pub fn integrated_norms(&self) -> [f64; 3] {
        let r = Rule::gauss_legendre(400, -self.window, 0.0);
        [
            r.integrate(|t| self.eval(t).h.abs()),
            r.integrate(|t| self.eval(t).hdot.abs()),
            r.integrate(|t| self.eval(t).hddot.abs()),
        ]
    }
}

/// Spatial shape used to generate a profile component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    /// amplitude · exp(1 − 1/(1 − r²/R²)) for r < R, zero outside.
    Bump {
        amplitude: f64,
        radius: f64,
        #[serde(default)]
        centre: Vec<f64>,
    },
    /// Values given on the position grid.
    Samples { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// 0 for the electric potential, 1..=d for the vector potential.
    pub index: usize,
    #[serde(flatten)]
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialProfile {
    pub components: Vec<Component>,
    pub epsilon: f64,
    #[serde(default = "one")]
    pub t_adiabatic: f64,
    #[serde(default)]
    pub switch_kind: ScheduleKind,
    /// Constant electric potential on the whole box; only meant for tests.
    #[serde(default)]
    pub constant_override: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl PotentialProfile {
    pub fn zero(epsilon: f64) -> Self {
        PotentialProfile {
            components: vec![],
            epsilon,
            t_adiabatic: 1.0,
            switch_kind: ScheduleKind::Switch,
            constant_override: None,
        }
    }

    /// Electric bump well of depth `amplitude` centred at the origin.
    pub fn electric_bump(amplitude: f64, radius: f64, epsilon: f64) -> Self {
        PotentialProfile {
            components: vec![Component {
                index: 0,
                shape: Shape::Bump {
                    amplitude,
                    radius,
                    centre: vec![],
                },
            }],
            ..Self::zero(epsilon)
        }
    }

    pub fn constant(c: f64, epsilon: f64) -> Self {
        PotentialProfile {
            constant_override: Some(c),
            ..Self::zero(epsilon)
        }
    }

    pub fn with_t_adiabatic(mut self, t: f64) -> Self {
        self.t_adiabatic = t;
        self
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        let mut p = self.clone();
        for c in p.components.iter_mut() {
            match &mut c.shape {
                Shape::Bump { amplitude, .. } => *amplitude *= lambda,
                Shape::Samples { values } => values.iter_mut().for_each(|v| *v *= lambda),
            }
        }
        p.constant_override = p.constant_override.map(|c| c * lambda);
        p
    }

    pub fn window(&self) -> f64 {
        self.epsilon * self.t_adiabatic
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            window: self.window(),
            kind: self.switch_kind,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.components.is_empty() && self.constant_override.map(|c| c == 0.0).unwrap_or(true)
    }

    /// Component values on every site.
    pub fn sample(&self, model: &LatticeModel) -> Result<Vec<(usize, Vec<f64>)>> {
        let ns = model.n_sites();
        let mut out = Vec::new();
        for c in &self.components {
            if c.index > model.spatial_dim {
                return Err(Error::Invalid(format!(
                    "component index {} exceeds spatial dimension {}",
                    c.index, model.spatial_dim
                )));
            }
            let vals = match &c.shape {
                Shape::Samples { values } => {
                    if values.len() != ns {
                        return Err(Error::DimensionMismatch {
                            expected: ns,
                            got: values.len(),
                        });
                    }
                    values.clone()
                }
                Shape::Bump {
                    amplitude,
                    radius,
                    centre,
                } => (0..ns)
                    .map(|site| {
                        let x = model.position(site);
                        let r2: f64 = x
                            .iter()
                            .enumerate()
                            .map(|(a, xa)| {
                                let c0 = centre.get(a).copied().unwrap_or(0.0);
                                (xa - c0) * (xa - c0)
                            })
                            .sum();
                        let s = r2 / (radius * radius);
                        if s < 1.0 {
                            amplitude * (1.0 - 1.0 / (1.0 - s)).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            };
            out.push((c.index, vals));
        }
        Ok(out)
    }
}

/// Pointwise matrix Aslash(x) = A⁰(x) + α·A(x) at every site.
pub fn site_matrices(model: &LatticeModel, profile: &PotentialProfile) -> Result<Vec<CMat>> {
    let s = model.spinor_dim();
    let ns = model.n_sites();
    let (alphas, _) = dirac_matrices(model.spatial_dim);
    let mut out = vec![CMat::zeros(s, s); ns];
    for (idx, vals) in profile.sample(model)? {
        let mat = if idx == 0 {
            CMat::identity(s, s)
        } else {
            alphas[idx - 1].clone()
        };
        for (site, v) in vals.iter().enumerate() {
            if *v != 0.0 {
                if model.is_boundary_site(site) {
                    return Err(Error::Invalid(format!(
                        "potential component {idx} is nonzero on boundary site {site}"
                    )));
                }
                out[site] += &mat * C64::new(*v, 0.0);
            }
        }
    }
    if let Some(c) = profile.constant_override {
        for m in out.iter_mut() {
            *m += CMat::identity(s, s) * C64::new(c, 0.0);
        }
    }
    Ok(out)
}

/// Fourier coefficients c(Δ) = (1/N) Σ_x e^{−iΔ·x} Aslash(x), indexed by the
/// flattened difference of mode indices modulo n.
pub fn fourier_coefficients(model: &LatticeModel, sites: &[CMat]) -> Vec<CMat> {
    let s = model.spinor_dim();
    let ns = model.n_sites();
    let dk = model.dk();
    let pos = model.axis_positions();
    let axes: Vec<Vec<usize>> = (0..ns).map(|i| model.unflatten(i)).collect();
    let nonzero: Vec<usize> = (0..ns).filter(|&i| sites[i].iter().any(|z| z.norm() > 0.0)).collect();
    (0..ns)
        .map(|delta| {
            let d = model.unflatten(delta);
            let mut c = CMat::zeros(s, s);
            for &site in &nonzero {
                let mut phase = 0.0;
                for a in 0..model.spatial_dim {
                    // periodic in Δ mod n because n is odd and the grid is centred
                    let da = d[a] as f64;
                    phase -= dk * da * pos[axes[site][a]];
                }
                c += &sites[site] * C64::from_polar(1.0, phase);
            }
            c / C64::new(ns as f64, 0.0)
        })
        .collect()
}

/// Flattened index of (mode_p − mode_q) mod n.
pub fn difference_index(model: &LatticeModel, p: usize, q: usize) -> usize {
    let n = model.n_modes_per_axis;
    let a = model.unflatten(p);
    let b = model.unflatten(q);
    let d: Vec<usize> = a.iter().zip(&b).map(|(x, y)| (x + n - y) % n).collect();
    model.flatten(&d)
}

/// Aslash as an operator on the plane-wave basis.
pub fn potential_from_sites(model: &LatticeModel, sites: &[CMat]) -> HermitianOperator {
    let s = model.spinor_dim();
    let ns = model.n_sites();
    let coeffs = fourier_coefficients(model, sites);
    let mut m = CMat::zeros(model.dim(), model.dim());
    for p in 0..ns {
        for q in 0..ns {
            let c = &coeffs[difference_index(model, p, q)];
            for r in 0..s {
                for cc in 0..s {
                    m[(p * s + r, q * s + cc)] = c[(r, cc)];
                }
            }
        }
    }
    HermitianOperator::symmetrized(m, 0.0)
}

pub fn build_potential(model: &LatticeModel, profile: &PotentialProfile) -> Result<HermitianOperator> {
    model.validate()?;
    let sites = site_matrices(model, profile)?;
    Ok(potential_from_sites(model, &sites))
}

/// h, ḣ, ḧ of the profile's switch at time t.
pub fn switching(profile: &PotentialProfile, t: f64) -> SwitchValues {
    profile.schedule().eval(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::{op_norm, testutil::max_abs};
    use proptest::prelude::*;

    fn m1(n: usize) -> LatticeModel {
        LatticeModel::new(1, n, 20.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn rejects_bad_models() {
        assert!(LatticeModel::new(1, 4, 10.0, 1.0, 0.0).is_err());
        assert!(LatticeModel::new(2, 5, 10.0, 1.0, 0.0).is_err());
        assert!(build_dirac(&LatticeModel {
            spatial_dim: 1,
            n_modes_per_axis: 3,
            box_length: 1.0,
            mass: 0.0,
            mu: 0.0
        })
        .is_err());
    }

    #[test]
    fn single_mode_rest_frame() {
        let d = build_dirac(&LatticeModel::new(1, 1, 5.0, 1.7, 0.0).unwrap()).unwrap();
        let ev = d.eigenvalues();
        assert!((ev[0] + 1.7).abs() < 1e-14 && (ev[1] - 1.7).abs() < 1e-14);
    }

    #[test]
    fn dispersion_gap_and_symmetry() {
        for model in [m1(15), LatticeModel::new(3, 3, 8.0, 0.7, 0.0).unwrap()] {
            let d = build_dirac(&model).unwrap();
            let ev = d.eigenvalues();
            let n = ev.len();
            for i in 0..n {
                assert!(ev[i].abs() >= model.mass - 1e-12);
                assert!((ev[i] + ev[n - 1 - i]).abs() < 1e-12);
            }
            let mut expected: Vec<f64> = (0..model.n_sites())
                .flat_map(|m| {
                    let w = model.omega(&model.momentum(m));
                    vec![w; model.spinor_dim() / 2].into_iter().chain(vec![-w; model.spinor_dim() / 2])
                })
                .collect();
            expected.sort_by(|a, b| a.total_cmp(b));
            for (a, b) in ev.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
            let dense = d.matrix().clone().symmetric_eigen();
            let mut dv: Vec<f64> = dense.eigenvalues.iter().cloned().collect();
            dv.sort_by(|a, b| a.total_cmp(b));
            for (a, b) in ev.iter().zip(&dv) {
                assert!((a - b).abs() < 1e-12);
            }
            let sd = d.spectral();
            let rec = sd.from_real_diagonal(&sd.eigenvalues);
            assert!(op_norm(&(rec - d.matrix())) < 1e-12);
        }
    }

    #[test]
    fn chemical_potential_shifts_spectrum() {
        let model = LatticeModel::new(1, 5, 10.0, 1.0, 0.3).unwrap();
        let d = build_dirac(&model).unwrap();
        let ev = d.eigenvalues();
        let n = ev.len();
        for i in 0..n {
            assert!((ev[i] + ev[n - 1 - i] + 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn cutoff_doubling_keeps_low_blocks() {
        let a = build_dirac(&m1(7)).unwrap();
        let b = build_dirac(&m1(13)).unwrap();
        // mode j in the small lattice equals mode j+3 in the large one
        for j in 0..7 {
            for r in 0..2 {
                for c in 0..2 {
                    let x = a.matrix()[(2 * j + r, 2 * j + c)];
                    let y = b.matrix()[(2 * (j + 3) + r, 2 * (j + 3) + c)];
                    assert!((x - y).norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_and_constant_potentials() {
        let model = m1(9);
        let z = build_potential(&model, &PotentialProfile::zero(1.0)).unwrap();
        assert_eq!(max_abs(z.matrix()), 0.0);
        let c = build_potential(&model, &PotentialProfile::constant(0.4, 1.0)).unwrap();
        assert!(op_norm(&(c.matrix() - CMat::identity(18, 18) * C64::new(0.4, 0.0))) < 1e-13);
    }

    #[test]
    fn boundary_support_is_rejected() {
        let model = m1(9);
        let p = PotentialProfile::electric_bump(1.0, 50.0, 1.0);
        assert!(build_potential(&model, &p).is_err());
    }

    #[test]
    fn potential_norm_is_pointwise_max() {
        let model = LatticeModel::new(3, 5, 10.0, 1.0, 0.0).unwrap();
        let mut p = PotentialProfile::electric_bump(0.5, 3.5, 1.0);
        p.components.push(Component {
            index: 2,
            shape: Shape::Bump {
                amplitude: 0.8,
                radius: 3.0,
                centre: vec![0.5, 0.0, 0.0],
            },
        });
        let a = build_potential(&model, &p).unwrap();
        let sites = site_matrices(&model, &p).unwrap();
        let pointwise = sites.iter().map(op_norm).fold(0.0, f64::max);
        assert!((a.op_norm() - pointwise).abs() < 1e-12);
    }

    #[test]
    fn momentum_kernel_is_a_convolution() {
        let model = m1(11);
        let p = PotentialProfile::electric_bump(0.9, 6.0, 1.0);
        let a = build_potential(&model, &p).unwrap();
        let n = 11;
        for d in 0..n {
            let vals: Vec<f64> = (0..n)
                .map(|q| {
                    let pp = (q + d) % n;
                    a.matrix()[(2 * pp, 2 * q)].norm()
                })
                .collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(0.0, f64::max);
            assert!(hi - lo <= 1e-10);
        }
    }

    #[test]
    fn switch_limits_and_integral() {
        let p = PotentialProfile::zero(2.0).with_t_adiabatic(1.5);
        let w = p.window();
        let after = switching(&p, 0.3);
        assert_eq!((after.h, after.hdot), (1.0, 0.0));
        let before = switching(&p, -w - 0.1);
        assert_eq!((before.h, before.hdot, before.hddot), (0.0, 0.0, 0.0));
        let r = Rule::gauss_legendre(200, -w, 0.0);
        assert!((r.integrate(|t| switching(&p, t).hdot) - 1.0).abs() < 1e-12);
        assert!((switching(&p, -w / 2.0).h - 0.5).abs() < 1e-14);
    }

    #[test]
    fn switch_derivatives_match_differences() {
        let s = Schedule::switch(1.3);
        for t in [-1.1, -0.7, -0.3, -0.05] {
            let e = 1e-5;
            let v = s.eval(t);
            let vp = s.eval(t + e);
            let vm = s.eval(t - e);
            assert!(((vp.h - vm.h) / (2.0 * e) - v.hdot).abs() < 1e-7 * v.hdot.abs().max(1.0));
            assert!(((vp.hdot - vm.hdot) / (2.0 * e) - v.hddot).abs() < 1e-6 * v.hddot.abs().max(1.0));
            assert!(((vp.hddot - vm.hddot) / (2.0 * e) - v.hdddot).abs() < 1e-5 * v.hdddot.abs().max(1.0));
        }
        let p = Schedule::pulse(2.0);
        assert!((p.eval(-1.0).h - 1.0).abs() < 1e-15);
        assert_eq!(p.eval(0.0).h, 0.0);
    }

    proptest! {
        #[test]
        fn switch_is_monotone(a in -3.0f64..1.0, b in -3.0f64..1.0) {
            let s = Schedule::switch(2.0);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(s.eval(lo).h <= s.eval(hi).h + 1e-15);
            prop_assert!(s.eval(a).hdot >= 0.0);
        }

        #[test]
        fn potentials_are_hermitian(amp in -2.0f64..2.0, r in 1.0f64..8.0) {
            let model = m1(13);
            let a = build_potential(&model, &PotentialProfile::electric_bump(amp, r, 1.0)).unwrap();
            prop_assert!(max_abs(&(a.matrix() - a.matrix().adjoint())) < 1e-12);
        }
    }
}
