//! Bound states in the spectral gap, ergodic means of the free thermal
//! covariance under the perturbed dynamics, and the idealized steady state.
//!
//! In finite volume there is no absolutely continuous spectrum. Eigenvalues
//! of H = D + K outside the gap window form the quasi-continuum and play the
//! role of P_ac.

use crate::entropy::BoundStateDatum;
use crate::error::{Error, Result};
use crate::linop::{cmul, fermi_factor, logistic, op_norm, CMat, CVec, Covariance, HermitianOperator, Sign, C64};

/// Relative threshold for merging eigenvalues into one dephasing block.
pub const DEPHASING_MERGE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GapState {
    pub s: f64,
    pub vector: CVec,
}

#[derive(Debug, Clone)]
pub struct GapSpectrum {
    pub states: Vec<GapState>,
    pub quasi_continuum_projector: CMat,
    /// Pairs of gap states closer than the merge threshold.
    pub degenerate: Vec<(usize, usize)>,
    pub window: (f64, f64),
}

impl GapSpectrum {
    pub fn count(&self) -> usize {
        self.states.len()
    }

    pub fn projector(&self, j: usize) -> CMat {
        let v = &self.states[j].vector;
        v * v.adjoint()
    }
}

/// Eigenpairs of D+K inside (lo + edge_margin, hi − edge_margin).
pub fn bound_states_in(
    d: &HermitianOperator,
    k: &HermitianOperator,
    lo: f64,
    hi: f64,
    edge_margin: f64,
) -> Result<GapSpectrum> {
    if !(hi > lo) {
        return Err(Error::Invalid(format!("empty gap window ({lo}, {hi})")));
    }
    let h = d.add(k);
    let sd = h.spectral();
    let n = h.dim();
    let mut states = Vec::new();
    let mut qc = vec![1.0; n];
    for (i, &s) in sd.eigenvalues.iter().enumerate() {
        if s > lo + edge_margin && s < hi - edge_margin {
            states.push(GapState {
                s,
                vector: sd.eigenvectors.column(i).into_owned(),
            });
            qc[i] = 0.0;
        }
    }
    let thresh = DEPHASING_MERGE * sd.spread().max(f64::MIN_POSITIVE);
    let degenerate = states
        .windows(2)
        .enumerate()
        .filter(|(_, w)| (w[1].s - w[0].s).abs() < thresh)
        .map(|(i, _)| (i, i + 1))
        .collect();
    Ok(GapSpectrum {
        states,
        quasi_continuum_projector: sd.from_real_diagonal(&qc),
        degenerate,
        window: (lo, hi),
    })
}

/// Gap states in (−m, m), shrunk by `edge_margin` on each side.
///
/// The lattice spectrum contains ±m exactly (the k = 0 mode), and any K
/// moves those by up to ‖K‖, so the margin separates threshold states from
/// genuine bound states.
pub fn bound_states(d: &HermitianOperator, k: &HermitianOperator, m: f64, edge_margin: f64) -> Result<GapSpectrum> {
    if !(m > 0.0) {
        return Err(Error::Invalid(format!("mass must be positive, got {m}")));
    }
    bound_states_in(d, k, -m, m, edge_margin)
}

/// Occupations c_j = ⟨φ_j, F₋(D) φ_j⟩ of the gap states as entropy data.
pub fn bound_state_data(g: &GapSpectrum, d: &HermitianOperator, beta: f64) -> Result<Vec<BoundStateDatum>> {
    let f = fermi_factor(d, beta, Sign::Minus)?;
    g.states
        .iter()
        .map(|st| {
            let c = st.vector.dotc(&(f.matrix() * &st.vector)).re;
            BoundStateDatum::from_occupation(st.s, c, beta)
        })
        .collect()
}

/// |⟨φ_i, F₋(D) φ_j⟩| for i < j.
pub fn bound_cross_terms(g: &GapSpectrum, d: &HermitianOperator, beta: f64) -> Result<Vec<(usize, usize, f64)>> {
    let f = fermi_factor(d, beta, Sign::Minus)?;
    let mut out = Vec::new();
    for i in 0..g.count() {
        let fi = f.matrix().adjoint() * &g.states[i].vector;
        for j in (i + 1)..g.count() {
            out.push((i, j, fi.dotc(&g.states[j].vector).norm()));
        }
    }
    Ok(out)
}

/// Block labels of a sorted spectrum; neighbours closer than the merge
/// threshold share a block.
fn blocks(eigs: &[f64], spread: f64) -> Vec<usize> {
    let thresh = DEPHASING_MERGE * spread.max(f64::MIN_POSITIVE);
    let mut label = 0;
    let mut out = Vec::with_capacity(eigs.len());
    for (i, &l) in eigs.iter().enumerate() {
        if i > 0 && l - eigs[i - 1] >= thresh {
            label += 1;
        }
        out.push(label);
    }
    out
}

/// Σ_e P_e F₋(D) P_e over the eigenprojections of H = D + K.
pub fn ergodic_covariance(d: &HermitianOperator, k: &HermitianOperator, beta: f64) -> Result<Covariance> {
    let f = fermi_factor(d, beta, Sign::Minus)?;
    let h = d.add(k);
    let sd = h.spectral();
    let lab = blocks(&sd.eigenvalues, sd.spread());
    let mut x = sd.to_eigenbasis(f.matrix());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            if lab[i] != lab[j] {
                x[(i, j)] = C64::new(0.0, 0.0);
            }
        }
    }
    Covariance::new(HermitianOperator::symmetrized(sd.from_eigenbasis(&x), 0.0))
}

/// P_qc F₋(D+K) P_qc + Σ_j P_{s_j} F₋(D) P_{s_j}
pub fn ness_ideal_covariance(
    g: &GapSpectrum,
    d: &HermitianOperator,
    k: &HermitianOperator,
    beta: f64,
) -> Result<Covariance> {
    if let Some(&(i, j)) = g.degenerate.first() {
        return Err(Error::Hypothesis(format!(
            "the steady-state formula assumes nondegenerate gap eigenvalues; s_{i} = {} and s_{j} = {} coincide",
            g.states[i].s, g.states[j].s
        )));
    }
    let h = d.add(k);
    let fh = fermi_factor(&h, beta, Sign::Minus)?;
    let p = &g.quasi_continuum_projector;
    let mut t = cmul(&cmul(p, fh.matrix()), p);
    for (st, datum) in g.states.iter().zip(bound_state_data(g, d, beta)?) {
        let pj = &st.vector * st.vector.adjoint();
        t += pj * C64::new(datum.occupation, 0.0);
    }
    Covariance::new(HermitianOperator::symmetrized(t, 0.0))
}

/// ‖P_qc (ergodic − ideal) P_qc‖
pub fn ness_vs_ergodic_gap(
    d: &HermitianOperator,
    k: &HermitianOperator,
    beta: f64,
    m: f64,
    edge_margin: f64,
) -> Result<f64> {
    let g = bound_states(d, k, m, edge_margin)?;
    let e = ergodic_covariance(d, k, beta)?;
    let n = ness_ideal_covariance(&g, d, k, beta)?;
    let p = &g.quasi_continuum_projector;
    Ok(op_norm(&cmul(&cmul(p, &(e.op.matrix() - n.op.matrix())), p)))
}

/// (1/T)∫₀ᵀ e^{itH} F₋(D) e^{−itH} dt
pub fn cesaro_mean(d: &HermitianOperator, k: &HermitianOperator, beta: f64, horizon: f64) -> Result<CMat> {
    let f = fermi_factor(d, beta, Sign::Minus)?;
    let h = d.add(k);
    let sd = h.spectral();
    let mut x = sd.to_eigenbasis(f.matrix());
    if horizon > 0.0 {
        let l = &sd.eigenvalues;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let phase = (l[i] - l[j]) * horizon;
                if phase != 0.0 {
                    let w = (C64::new(0.0, phase).exp() - 1.0) / C64::new(0.0, phase);
                    x[(i, j)] *= w;
                }
            }
        }
    }
    Ok(sd.from_eigenbasis(&x))
}

#[derive(Debug, Clone)]
pub struct ReturnReport {
    pub horizons: Vec<f64>,
    /// |⟨f, ⟨U_t F₋(D) U_t†⟩_T f⟩ − ⟨f, F₋(D+K) f⟩| per horizon, per probe.
    pub gaps: Vec<Vec<f64>>,
    /// |c_j − (1+e^{−βs_j})⁻¹| per gap state: occupations the dynamics cannot change.
    pub conserved_mismatch: Vec<f64>,
    /// Σ_j |⟨φ_j, f⟩|² · mismatch_j per probe.
    pub probe_witness: Vec<f64>,
}

pub fn return_to_equilibrium_probe(
    d: &HermitianOperator,
    k: &HermitianOperator,
    beta: f64,
    probes: &[CVec],
    horizons: &[f64],
    gap: Option<&GapSpectrum>,
) -> Result<ReturnReport> {
    for f in probes {
        if f.len() != d.dim() {
            return Err(Error::DimensionMismatch {
                expected: d.dim(),
                got: f.len(),
            });
        }
        if (f.norm() - 1.0).abs() > 1e-10 {
            return Err(Error::Invalid(format!("probes must be normalized, got norm {}", f.norm())));
        }
    }
    let target = fermi_factor(&d.add(k), beta, Sign::Minus)?;
    let tv: Vec<f64> = probes.iter().map(|f| f.dotc(&(target.matrix() * f)).re).collect();
    let mut gaps = Vec::with_capacity(horizons.len());
    for &t in horizons {
        let c = cesaro_mean(d, k, beta, t)?;
        gaps.push(
            probes
                .iter()
                .zip(&tv)
                .map(|(f, v)| (f.dotc(&(&c * f)).re - v).abs())
                .collect(),
        );
    }
    let (conserved_mismatch, probe_witness) = match gap {
        Some(g) => {
            let data = bound_state_data(g, d, beta)?;
            let mm: Vec<f64> = data
                .iter()
                .map(|b| (b.occupation - logistic(beta * b.s)).abs())
                .collect();
            let w = probes
                .iter()
                .map(|f| {
                    g.states
                        .iter()
                        .zip(&mm)
                        .map(|(st, m)| st.vector.dotc(f).norm_sqr() * m)
                        .sum()
                })
                .collect();
            (mm, w)
        }
        None => (vec![], vec![0.0; probes.len()]),
    };
    Ok(ReturnReport {
        horizons: horizons.to_vec(),
        gaps,
        conserved_mismatch,
        probe_witness,
    })
}
