//! Scenario runner: JSON config in, report.json and CSV series out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{compute_k, cook_decay, gaussian_packet, moller, KReport};
use crate::entropy::{entropy_production, entropy_report, ness_rel_entropy_closed, BoundStateDatum};
use crate::error::{Error, Result};
use crate::estimates::{
    adiabatic_sweep, hs_bound_k, hs_bound_u, kernel_bound_h, k_for, random_profile, stationary_phase, BoundCheck,
    PhaseSetup,
};
use crate::fermi_derivatives::{derivative_consistency, FermiFamily};
use crate::kms::{kms_identity_defect, t_recursive_residual, t_series, t_series_terms, KmsSpec};
use crate::linop::{commutator, fermi_factor, op_norm, CMat, CVec, HermitianOperator, Sign, C64};
use crate::model::{LatticeModel, PotentialProfile};
use crate::ness::{bound_state_data, bound_states, bound_states_in, ness_ideal_covariance, return_to_equilibrium_probe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    KmsIdentity,
    EntropyCompare,
    Ness,
    Adiabatic,
    Decay,
    Bounds,
    Moller,
    AppendixDerivatives,
    EntropyProduction,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::KmsIdentity,
        Experiment::EntropyCompare,
        Experiment::Ness,
        Experiment::Adiabatic,
        Experiment::Decay,
        Experiment::Bounds,
        Experiment::Moller,
        Experiment::AppendixDerivatives,
        Experiment::EntropyProduction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::KmsIdentity => "kms_identity",
            Experiment::EntropyCompare => "entropy_compare",
            Experiment::Ness => "ness",
            Experiment::Adiabatic => "adiabatic",
            Experiment::Decay => "decay",
            Experiment::Bounds => "bounds",
            Experiment::Moller => "moller",
            Experiment::AppendixDerivatives => "appendix_derivatives",
            Experiment::EntropyProduction => "entropy_production",
        }
    }

    pub fn parse(s: &str) -> Result<Experiment> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(Experiment),
    Many(Vec<Experiment>),
}

impl OneOrMany {
    pub fn list(&self) -> Vec<Experiment> {
        match self {
            OneOrMany::One(e) => vec![*e],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Real matrix, or real and imaginary parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Real(Vec<Vec<f64>>),
    Complex { re: Vec<Vec<f64>>, im: Vec<Vec<f64>> },
}

impl MatrixSpec {
    fn to_operator(&self, name: &str) -> Result<HermitianOperator> {
        let (re, im) = match self {
            MatrixSpec::Real(r) => (r, None),
            MatrixSpec::Complex { re, im } => (re, Some(im)),
        };
        let n = re.len();
        if n == 0 || re.iter().any(|r| r.len() != n) || im.is_some_and(|m| m.len() != n || m.iter().any(|r| r.len() != n)) {
            return Err(Error::Config(format!("{name} must be a non-empty square matrix")));
        }
        let m = CMat::from_fn(n, n, |i, j| C64::new(re[i][j], im.map_or(0.0, |m| m[i][j])));
        HermitianOperator::new(m).map_err(|e| Error::Config(format!("{name}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitOperators {
    pub d: MatrixSpec,
    pub k: MatrixSpec,
    /// Spectral window searched for gap states.
    #[serde(default)]
    pub gap: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numeric {
    #[serde(default = "default_order")]
    pub series_order: usize,
    #[serde(default = "default_quad")]
    pub quad_points: usize,
    /// Integrator step; defaults to 1e-3 of the switching window.
    #[serde(default)]
    pub time_step: Option<f64>,
    /// Adiabatic T values, Cesàro horizons or Møller times depending on the experiment.
    #[serde(default)]
    pub t_grid: Option<Vec<f64>>,
    #[serde(default = "default_u_quad")]
    pub u_quad: usize,
    #[serde(default = "default_profiles")]
    pub profiles: usize,
    #[serde(default)]
    pub cutoffs: Option<Vec<usize>>,
    #[serde(default = "default_amp")]
    pub max_amplitude: f64,
    #[serde(default = "default_margin")]
    pub edge_margin: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_nodes")]
    pub time_nodes: usize,
}

fn default_order() -> usize {
    5
}
fn default_quad() -> usize {
    12
}
fn default_u_quad() -> usize {
    32
}
fn default_profiles() -> usize {
    20
}
fn default_amp() -> f64 {
    0.3
}
fn default_margin() -> f64 {
    1e-3
}
fn default_horizon() -> f64 {
    5.0
}
fn default_nodes() -> usize {
    200
}

impl Default for Numeric {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub model: Option<LatticeModel>,
    #[serde(default)]
    pub explicit: Option<ExplicitOperators>,
    #[serde(default)]
    pub profile: Option<PotentialProfile>,
    pub beta: f64,
    pub experiment: OneOrMany,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub numeric: Numeric,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<ScenarioConfig> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed JSON: {e}")))?;
        // name the offending experiment before serde reports a generic mismatch
        if let Some(v) = raw.get("experiment") {
            let names: Vec<&serde_json::Value> = match v {
                serde_json::Value::Array(a) => a.iter().collect(),
                other => vec![other],
            };
            for n in names {
                match n.as_str() {
                    Some(s) => {
                        Experiment::parse(s)?;
                    }
                    None => return Err(Error::Config("experiment names must be strings".into())),
                }
            }
        }
        let cfg: ScenarioConfig = serde_json::from_value(raw).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.model.is_some() == self.explicit.is_some() {
            return bad("exactly one of 'model' and 'explicit' must be given");
        }
        if self.explicit.is_some() && self.profile.is_some() {
            return bad("'profile' only applies to a lattice model");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.experiment.list().is_empty() {
            return bad("no experiment selected");
        }
        let n = &self.numeric;
        if n.series_order == 0 || n.quad_points == 0 || n.u_quad == 0 || n.profiles == 0 || n.time_nodes == 0 {
            return bad("numeric budgets must be positive");
        }
        if n.time_step.is_some_and(|s| !(s > 0.0)) || !(n.horizon > 0.0) || !(n.max_amplitude > 0.0) {
            return bad("numeric budgets must be positive");
        }
        if n.edge_margin < 0.0 {
            return bad("edge_margin must be nonnegative");
        }
        if let Some(t) = &n.t_grid {
            if t.is_empty() || t.iter().any(|x| !(*x >= 0.0)) {
                return bad("t_grid entries must be nonnegative");
            }
        }
        if let Some(m) = &self.model {
            LatticeModel::new(m.spatial_dim, m.n_modes_per_axis, m.box_length, m.mass, m.mu)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(e) = &self.explicit {
            let d = e.d.to_operator("d")?;
            let k = e.k.to_operator("k")?;
            if d.dim() != k.dim() {
                return bad("d and k must have the same dimension");
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn profile(&self) -> PotentialProfile {
        self.profile.clone().unwrap_or_else(|| PotentialProfile::zero(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub value: Option<f64>,
    pub relation: &'static str,
    pub tolerance: f64,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CheckRecord {
    pub fn le(name: &str, value: f64, tolerance: f64) -> Self {
        Self::cmp(name, value, "<=", tolerance, value <= tolerance)
    }

    pub fn ge(name: &str, value: f64, tolerance: f64) -> Self {
        Self::cmp(name, value, ">=", tolerance, value >= tolerance)
    }

    fn cmp(name: &str, value: f64, relation: &'static str, tolerance: f64, ok: bool) -> Self {
        CheckRecord {
            name: name.into(),
            value: Some(value),
            relation,
            tolerance,
            status: if ok { Status::Pass } else { Status::Fail },
            note: None,
        }
    }

    pub fn skipped(name: &str, note: &str) -> Self {
        CheckRecord {
            name: name.into(),
            value: None,
            relation: "",
            tolerance: 0.0,
            status: Status::Skipped,
            note: Some(note.into()),
        }
    }

    fn inconclusive_unless(mut self, trusted: bool, note: &str) -> Self {
        if !trusted {
            self.status = Status::Inconclusive;
            self.note = Some(note.into());
        }
        self
    }
}

/// A table written as CSV with `#` comment lines on top.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub notes: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Series {
    fn new(name: &str, notes: &[&str], columns: &[&str]) -> Series {
        Series {
            name: name.into(),
            notes: notes.iter().map(|s| s.to_string()).collect(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: vec![],
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        let _ = writeln!(s, "{}", self.columns.join(","));
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub experiment: Experiment,
    pub scalars: BTreeMap<String, f64>,
    pub checks: Vec<CheckRecord>,
    pub series: Vec<Series>,
}

impl ExperimentOutcome {
    fn new(e: Experiment) -> Self {
        ExperimentOutcome {
            experiment: e,
            scalars: BTreeMap::new(),
            checks: vec![],
            series: vec![],
        }
    }

    fn scalar(&mut self, k: &str, v: f64) {
        self.scalars.insert(k.into(), v);
    }

    pub fn status(&self) -> Status {
        if self.checks.iter().any(|c| c.status == Status::Fail) {
            Status::Fail
        } else {
            Status::Pass
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub name: &'static str,
    pub status: Status,
    pub scalars: BTreeMap<String, f64>,
    pub checks: Vec<CheckRecord>,
    pub series_files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub program: &'static str,
    pub version: &'static str,
    pub config_digest: String,
    pub seed: u64,
    pub beta: f64,
    pub budgets: Numeric,
    pub experiments: Vec<ExperimentSummary>,
    pub status: Status,
}

/// Unperturbed operator, perturbation and, for lattices, the 𝒦 run.
struct Operators {
    d: HermitianOperator,
    k: HermitianOperator,
    k_run: Option<KReport>,
}

fn operators(cfg: &ScenarioConfig) -> Result<Operators> {
    if let Some(e) = &cfg.explicit {
        return Ok(Operators {
            d: e.d.to_operator("d")?,
            k: e.k.to_operator("k")?,
            k_run: None,
        });
    }
    let model = cfg.model.as_ref().expect("validated");
    let (d, rep) = compute_k(model, &cfg.profile(), cfg.numeric.time_step)?;
    Ok(Operators {
        d,
        k: rep.k.clone(),
        k_run: Some(rep),
    })
}

fn require_model(cfg: &ScenarioConfig, e: Experiment) -> Result<&LatticeModel> {
    cfg.model
        .as_ref()
        .ok_or_else(|| Error::Config(format!("experiment {} needs a lattice model", e.name())))
}

/// Unit basis vectors, or wavepackets on a lattice.
fn probes(cfg: &ScenarioConfig, dim: usize) -> Vec<CVec> {
    match &cfg.model {
        Some(m) => {
            let l = m.box_length;
            vec![gaussian_packet(m, 0.0, 0.5, 0.1 * l), gaussian_packet(m, -0.1 * l, -1.0, 0.05 * l)]
        }
        None => (0..dim.min(2))
            .map(|i| {
                let mut v = CVec::zeros(dim);
                v[i] = C64::new(1.0, 0.0);
                v
            })
            .collect(),
    }
}

fn spec_of(cfg: &ScenarioConfig, ops: &Operators) -> Result<KmsSpec> {
    KmsSpec::new(cfg.beta, ops.d.clone(), ops.k.clone())
}

fn run_kms_identity(cfg: &ScenarioConfig) -> Result<ExperimentOutcome> {
    let mut out = ExperimentOutcome::new(Experiment::KmsIdentity);
    let ops = operators(cfg)?;
    let spec = spec_of(cfg, &ops)?;
    spec.require_contraction()?;
    let (n, q) = (cfg.numeric.series_order, cfg.numeric.quad_points);
    let c = spec.contraction;
    let exact = fermi_factor(&ops.d.add(&ops.k), cfg.beta, Sign::Minus)?;
    let terms = t_series_terms(&spec, cfg.beta, n, q)?;
    let mut s = Series::new(
        "partial_sums",
        &["partial sums of the KMS series against the perturbed Fermi factor"],
        &["order", "residual", "tail_bound"],
    );
    let mut partial = CMat::zeros(spec.dim(), spec.dim());
    for (j, t) in terms.iter().enumerate() {
        partial += t;
        let tail = c.powi(j as i32 + 1) / (1.0 - c);
        s.push(vec![j.to_string(), num(op_norm(&(&partial - exact.matrix()))), num(tail)]);
    }
    let ts = t_series(&spec, cfg.beta, n, q)?;
    let residual = op_norm(&(ts.value.matrix() - exact.matrix()));
    let allowed = c.powi(n as i32 + 1) / (1.0 - c) + 1e-4;
    let rec = t_recursive_residual(&spec, n, q)?;
    let defect = kms_identity_defect(&ops.d.add(&ops.k), cfg.beta)?;
    out.scalar("contraction", c);
    out.scalar("series_residual", residual);
    out.scalar("truncation_bound", ts.truncation_bound);
    out.scalar("quadrature_estimate", ts.quadrature_estimate);
    out.scalar("recursion_residual", rec.last());
    out.scalar("kms_defect", defect);
    out.checks.push(CheckRecord::le("series_vs_fermi", residual, allowed));
    out.checks.push(CheckRecord::le("recursion_residual", rec.last(), 1e-8));
    out.checks.push(CheckRecord::le("kms_boundary_defect", defect, 1e-10));
    out.series.push(s);
    Ok(out)
}

/// Joint eigenbasis of commuting D and K, as per-mode (d, k) pairs.
fn commuting_modes(d: &HermitianOperator, k: &HermitianOperator) -> Option<Vec<(f64, f64)>> {
    let scale = d.op_norm().max(k.op_norm()).max(1.0);
    if op_norm(&commutator(d.matrix(), k.matrix())) > 1e-12 * scale * scale {
        return None;
    }
    // a generic combination separates the joint eigenspaces
    let mix = d.add(&k.scale(std::f64::consts::SQRT_2));
    let v = &mix.spectral().eigenvectors;
    Some(
        (0..d.dim())
            .map(|j| {
                let col = v.column(j);
                let dv = (d.matrix() * col).dotc(&col).re;
                let kv = (k.matrix() * col).dotc(&col).re;
                (dv, kv)
            })
            .collect(),
    )
}

fn run_entropy_compare(cfg: &ScenarioConfig) -> Result<ExperimentOutcome> {
    let mut out = ExperimentOutcome::new(Experiment::EntropyCompare);
    let ops = operators(cfg)?;
    let spec = spec_of(cfg, &ops)?;
    let n = &cfg.numeric;
    let a = crate::linop::Covariance::fermi(&spec.d, spec.beta)?;
    let b = crate::linop::Covariance::fermi(&spec.d.add(&spec.k), spec.beta)?;
    let s_closed = crate::entropy::rel_entropy_closed(&spec)?;
    let s_integral = crate::entropy::rel_entropy_integral(&spec, n.u_quad)?;
    let s_kl = crate::entropy::rel_entropy_kl(&a, &b)?;
    out.scalar("s_closed", s_closed);
    out.scalar("s_integral", s_integral);
    out.scalar("s_kl", s_kl);
    out.scalar("contraction", spec.contraction);
    out.checks.push(CheckRecord::le("kl_vs_closed", (s_kl - s_closed).abs(), 1e-9));
    out.checks.push(CheckRecord::le("integral_vs_closed", (s_integral - s_closed).abs(), 1e-6));
    let mut values = vec![s_closed, s_integral, s_kl];
    if spec.contraction < 1.0 {
        let r = entropy_report(&spec, n.series_order, n.quad_points, n.u_quad)?;
        out.scalar("s_series", r.s_series.value);
        out.scalar("s_series_bound", r.s_series.truncation_bound);
        out.checks.push(CheckRecord::le(
            "series_vs_closed",
            (r.s_series.value - s_closed).abs(),
            r.s_series.truncation_bound + 5e-3,
        ));
        values.push(r.s_series.value);
    } else {
        out.checks.push(CheckRecord::skipped(
            "series_vs_closed",
            "series route needs beta*||K|| < 1",
        ));
    }
    if let Some(modes) = commuting_modes(&spec.d, &spec.k) {
        let data: Vec<BoundStateDatum> = modes
            .iter()
            .map(|&(s, k)| BoundStateDatum::from_shift(s, k, spec.beta))
            .collect();
        let s_ness = ness_rel_entropy_closed(spec.beta, &data)?;
        out.scalar("s_ness_closed", s_ness);
        out.checks.push(CheckRecord::le("ness_closed_vs_closed", (s_ness - s_closed).abs(), 1e-9));
        values.push(s_ness);
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    out.checks.push(CheckRecord::ge("nonnegative", min, -1e-9));
    let mut s = Series::new(
        "routes",
        &["route ids: 0 closed, 1 integral, 2 kl, 3 series, 4 ness_closed (when present)"],
        &["route", "value"],
    );
    for (k, v) in ["s_closed", "s_integral", "s_kl", "s_series", "s_ness_closed"].iter().enumerate() {
        if let Some(x) = out.scalars.get(*v) {
            s.push(vec![k.to_string(), num(*x)]);
        }
    }
    out.series.push(s);
    Ok(out)
}

fn run_ness(cfg: &ScenarioConfig) -> Result<ExperimentOutcome> {
    let mut out = ExperimentOutcome::new(Experiment::Ness);
    let ops = operators(cfg)?;
    let n = &cfg.numeric;
    let g = match (&cfg.model, &cfg.explicit) {
        (Some(m), _) => bound_states(&ops.d, &ops.k, m.mass, n.edge_margin)?,
        (None, Some(e)) => {
            let [lo, hi] = e
                .gap
                .ok_or_else(|| Error::Config("ness on explicit operators needs a 'gap' window".into()))?;
            bound_states_in(&ops.d, &ops.k, lo, hi, n.edge_margin)?
        }
        _ => unreachable!("validated"),
    };
    let ideal = ness_ideal_covariance(&g, &ops.d, &ops.k, cfg.beta)?;
    let h = ops.d.add(&ops.k);
    let comm = op_norm(&commutator(h.matrix(), ideal.op.matrix()));
    out.scalar("gap_states", g.count() as f64);
    out.scalar("commutator", comm);
    out.checks.push(CheckRecord::le("stationarity", comm, 1e-10 * h.op_norm()));
    let data = bound_state_data(&g, &ops.d, cfg.beta)?;
    let occ_err = g
        .states
        .iter()
        .zip(&data)
        .map(|(s, b)| (s.vector.dotc(&(ideal.op.matrix() * &s.vector)).re - b.occupation).abs())
        .fold(0.0, f64::max);
    out.checks.push(CheckRecord::le("bound_occupations", occ_err, 1e-12));
    if !data.is_empty() {
        out.scalar("ness_rel_entropy", ness_rel_entropy_closed(cfg.beta, &data)?);
    }
    let horizons = n.t_grid.clone().unwrap_or_else(|| vec![1.0, 4.0, 16.0, 64.0]);
    let mut ps = probes(cfg, ops.d.dim());
    let base = ps.len();
    ps.extend(g.states.iter().map(|s| s.vector.clone()));
    let r = return_to_equilibrium_probe(&ops.d, &ops.k, cfg.beta, &ps, &horizons, Some(&g))?;
    let mut s = Series::new(
        "cesaro_gaps",
        &[
            "|<f, cesaro mean of evolved F(D)> f> - <f, F(D+K) f>| per probe",
            "the last probes are the gap eigenvectors, one per gap state",
        ],
        &["horizon", "probe", "gap", "witness"],
    );
    for (t, row) in horizons.iter().zip(&r.gaps) {
        for (j, gval) in row.iter().enumerate() {
            s.push(vec![num(*t), j.to_string(), num(*gval), num(r.probe_witness[j])]);
        }
    }
    out.series.push(s);
    if g.count() > 0 {
        // the probes that are gap states never relax: their gap is the mismatch
        let worst = (0..g.count())
            .flat_map(|j| r.gaps.iter().map(move |row| (j, row)))
            .map(|(j, row)| (row[base + j] - r.conserved_mismatch[j]).abs())
            .fold(0.0, f64::max);
        out.checks.push(CheckRecord::le("persistent_gap", worst, 1e-10));
    } else {
        let first = &r.gaps[0];
        let last = &r.gaps[r.gaps.len() - 1];
        let ratio = first
            .iter()
            .zip(last)
            .map(|(a, b)| if *a > 0.0 { b / a } else { 0.0 })
            .fold(0.0, f64::max);
        out.scalar("cesaro_shrink_ratio", ratio);
        out.checks.push(
            CheckRecord::le("cesaro_shrinks", ratio, 0.5)
                .inconclusive_unless(horizons.len() >= 2, "needs at least two horizons"),
        );
    }
    Ok(out)
}

fn run_adiabatic(cfg: &ScenarioConfig) -> Result<ExperimentOutcome> {
    let e = Experiment::Adiabatic;
    let mut out = ExperimentOutcome::new(e);
    let model = require_model(cfg, e)?;
    let prof = cfg.profile();
    let t = cfg.numeric.t_grid.clone().unwrap_or_else(|| vec![1.0, 2.0, 4.0, 8.0, 16.0]);
    let step = cfg.numeric.time_step.unwrap_or(2.5e-3 * prof.epsilon);
    let sw = adiabatic_sweep(model, &prof, &t, step)?;
    out.scalar("fitted_exponent", sw.fitted_exponent);
    out.scalar("r_squared", sw.r_squared);
    out.scalar("step", step);
    out.checks.push(
        CheckRecord::le("decay_exponent", sw.fitted_exponent, -1.5)
            .inconclusive_unless(sw.conclusive(), "log-log fit has R^2 below 0.95"),
    );
    let mut s = Series::new("sweep", &["Hilbert-Schmidt norm of P K Q over the adiabatic time"], &["t_adiabatic", "hs_norm", "k_error", "hermitian_defect"]);
    for (i, ti) in t.iter().enumerate() {
        s.push(vec![num(*ti), num(sw.hs_norms[i]), num(sw.k_errors[i]), num(sw.hermitian_defects[i])]);
    }
    out.series.push(s);
    Ok(out)
}

fn run_decay(cfg: &ScenarioConfig) -> Result<ExperimentOutcome> {
    let mut out = ExperimentOutcome::new(Experiment::Decay);
    let mass = cfg.model.as_ref().map_or(1.0, |m| m.mass);
    for (dim, expected, tol) in [(1usize, -0.5, 0.1), (3, -1.5, 0.15)] {
        let setup = PhaseSetup {
            spatial_dim: dim,
            mass,
            p_max: 8.0,
            n_points: 4000,
        };
        let hi = 0.5 * setup.recurrence();
        let t: Vec<f64> = (0..24).map(|i| 10.0 * (hi / 10.0).powf(i as f64 / 23.0)).collect();
        let r = stationary_phase(&setup, |p| (-p * p / 2.0).exp(), &t)?;
        let name = format!("stationary_phase_{dim}d");
        out.scalar(&format!("{name}_slope"), r.fitted_exponent);
        out.scalar(&format!("{name}_r_squared"), r.r_squared);
        out.checks.push(
            CheckRecord::le(&name, (r.fitted_exponent - expected).abs(), tol)
                .inconclusive_unless(r.r_squared >= 0.95, "log-log fit has R^2 below 0.95"),
        );
        let mut s = Series::new(&name, &["modulus of the oscillatory integral with a gaussian profile"], &["t", "value"]);
        for (a, b) in r.t.iter().zip(&r.values) {
            s.push(vec![num(*a), num(*b)]);
        }
        out.series.push(s);
    }
    if let Some(m) = &cfg.model {
        let ops = operators(cfg)?;
        let h = ops.d.add(&ops.k);
        let f = &probes(cfg, h.dim())[0];
        let t: Vec<f64> = (0..=40).map(|i| i as f64 * 0.25 * m.box_length / 40.0).collect();
        let c = cook_decay(&h, ops.k.matrix(), f, &t, (0.05 * m.box_length, 0.25 * m.box_length));
        if let Some(fit) = c.fit {
            out.scalar("cook_slope", fit.slope);
        }
        let mut s = Series::new("cook", &["||K exp(-itH) f|| for a wavepacket probe, before the box recurrence"], &["t", "norm"]);
        for (a, b) in c.t.iter().zip(&c.norms) {
            s.push(vec![num(*a), num(*b)]);
        }
        out.series.push(s);
    }
    Ok(out)
}

fn run_bounds(cfg: &ScenarioConfig, seed: u64) -> Result<ExperimentOutcome> {
    let e = Experiment::Bounds;
    let mut out = ExperimentOutcome::new(e);
    let base = require_model(cfg, e)?;
    let n = &cfg.numeric;
    let cutoffs = n
        .cutoffs
        .clone()
        .unwrap_or_else(|| vec![base.n_modes_per_axis, 2 * base.n_modes_per_axis - 1]);
    let mut s = Series::new(
        "bounds",
        &["one row per bound evaluation; margin = rhs - lhs"],
        &["check_name", "lhs", "rhs", "margin", "cutoff", "seed"],
    );
    let mut violations = 0usize;
    let mut worst_pointwise = f64::NEG_INFINITY;
    for &c in &cutoffs {
        let m = base.with_modes(c);
        for j in 0..n.profiles as u64 {
            let ps = seed.wrapping_add(j);
            // profiles depend on the seed only, so both cutoffs see the same potentials
            let prof = random_profile(base, ps, n.max_amplitude);
            let step = n.time_step.unwrap_or(2e-3 * prof.schedule().window);
            let (d, rep) = k_for(&m, &prof, step)?;
            let kb = kernel_bound_h(&m, &prof, rep.k.matrix(), ps)?;
            worst_pointwise = worst_pointwise.max(kb.worst_excess);
            let checks: Vec<BoundCheck> = vec![
                hs_bound_u(&m, &prof, step, ps)?,
                hs_bound_k(&m, &prof, &d, rep.k.matrix(), ps)?,
                kb.l1_check,
                kb.l2_check,
            ];
            for b in checks {
                if !b.passes() {
                    violations += 1;
                }
                s.push(vec![b.name.clone(), num(b.lhs), num(b.rhs), num(b.margin), b.cutoff.to_string(), b.seed.to_string()]);
            }
            if !kb.pointwise_ok {
                violations += 1;
            }
        }
    }
    out.scalar("violations", violations as f64);
    out.scalar("worst_pointwise_excess", worst_pointwise);
    out.checks.push(CheckRecord::le("bound_violations", violations as f64, 0.0));
    out.checks.push(CheckRecord::le("kernel_domination", worst_pointwise, 1e-8));
    out.series.push(s);
    Ok(out)
}

fn run_moller(cfg: &ScenarioConfig) -> Result<ExperimentOutcome> {
    let mut out = ExperimentOutcome::new(Experiment::Moller);
    let ops = operators(cfg)?;
    let t = cfg
        .numeric
        .t_grid
        .clone()
        .unwrap_or_else(|| (0..=20).map(|i| i as f64).collect());
    let ps = probes(cfg, ops.d.dim());
    let r = moller(&ops.d, &ops.k, cfg.beta, &t, &ps)?;
    let iso = r.isometry_defect.iter().cloned().fold(0.0, f64::max);
    out.scalar("isometry_defect", iso);
    out.checks.push(CheckRecord::le("isometry", iso, 1e-10));
    if let Some(rep) = &ops.k_run {
        out.scalar("unitarity_defect", rep.unitarity_defect);
        out.checks.push(CheckRecord::le("unitarity", rep.unitarity_defect, 1e-9));
    }
    let mut s = Series::new(
        "moller",
        &["isometry defect and intertwining residual of the Moller approximants"],
        &["t", "probe", "isometry_defect", "intertwining", "intertwining_cesaro"],
    );
    for (j, _) in ps.iter().enumerate() {
        for (i, ti) in t.iter().enumerate() {
            s.push(vec![
                num(*ti),
                j.to_string(),
                num(r.isometry_defect[i]),
                num(r.intertwining[j][i]),
                num(r.intertwining_cesaro[j][i]),
            ]);
        }
    }
    out.series.push(s);
    Ok(out)
}

fn run_appendix(cfg: &ScenarioConfig) -> Result<ExperimentOutcome> {
    let mut out = ExperimentOutcome::new(Experiment::AppendixDerivatives);
    let ops = operators(cfg)?;
    let fam = FermiFamily::absorb_beta(cfg.beta, &ops.d, &ops.k)?;
    let u = 0.4;
    let q = cfg.numeric.quad_points.max(16);
    let r = derivative_consistency(&fam, u, 3, q)?;
    for (n, e) in r.relative_errors.iter().enumerate() {
        out.scalar(&format!("relative_error_n{}", n + 1), *e);
    }
    for n in 0..2 {
        out.checks.push(CheckRecord::le(&format!("formula_vs_fd_n{}", n + 1), r.relative_errors[n], 1e-5));
    }
    out.scalar("taylor_slope", r.taylor_slope);
    out.checks.push(
        CheckRecord::le("taylor_slope", (r.taylor_slope / 4.0 - 1.0).abs(), 0.1)
            .inconclusive_unless(r.taylor_remainders.iter().all(|x| *x > 1e-13), "remainders at rounding level"),
    );
    let mut s = Series::new("taylor", &["third-order Taylor remainder of A(u) in the coupling"], &["lambda", "remainder"]);
    for (a, b) in r.taylor_lambdas.iter().zip(&r.taylor_remainders) {
        s.push(vec![num(*a), num(*b)]);
    }
    out.series.push(s);
    Ok(out)
}

fn run_entropy_production(cfg: &ScenarioConfig) -> Result<ExperimentOutcome> {
    let mut out = ExperimentOutcome::new(Experiment::EntropyProduction);
    let ops = operators(cfg)?;
    let spec = spec_of(cfg, &ops)?;
    let n = &cfg.numeric;
    let t_end = n.horizon;
    let ts: Vec<f64> = (1..=10).map(|i| t_end * i as f64 / 10.0).collect();
    let mut s = Series::new(
        "production",
        &["entropy production rate by the trace formula and by differencing S(t)"],
        &["t", "e_t", "e_t_fd", "s_of_t", "cumulative_residual"],
    );
    let mut worst = 0.0f64;
    let mut last_residual = 0.0;
    for &t in &ts {
        let nodes = if t == t_end { n.time_nodes } else { 48 };
        let p = entropy_production(&spec, t, nodes)?;
        if p.e_t.abs() > 1e-8 {
            worst = worst.max((p.e_t - p.e_t_fd).abs() / p.e_t.abs());
        }
        if t == t_end {
            last_residual = p.cumulative_residual;
            out.scalar("s_of_t_end", p.s_of_t);
        }
        s.push(vec![num(t), num(p.e_t), num(p.e_t_fd), num(p.s_of_t), num(p.cumulative_residual)]);
    }
    out.scalar("worst_route_disagreement", worst);
    out.scalar("cumulative_residual", last_residual);
    out.checks.push(CheckRecord::le("routes_agree", worst, 1e-5));
    out.checks.push(CheckRecord::le("integrated_rate", last_residual, 1e-4));
    out.series.push(s);
    Ok(out)
}

pub fn run_experiment(cfg: &ScenarioConfig, e: Experiment, seed: u64) -> Result<ExperimentOutcome> {
    match e {
        Experiment::KmsIdentity => run_kms_identity(cfg),
        Experiment::EntropyCompare => run_entropy_compare(cfg),
        Experiment::Ness => run_ness(cfg),
        Experiment::Adiabatic => run_adiabatic(cfg),
        Experiment::Decay => run_decay(cfg),
        Experiment::Bounds => run_bounds(cfg, seed),
        Experiment::Moller => run_moller(cfg),
        Experiment::AppendixDerivatives => run_appendix(cfg),
        Experiment::EntropyProduction => run_entropy_production(cfg),
    }
}

/// Runs the selected experiments and writes report.json and the CSV files
/// into `out_dir`.
pub fn run(cfg: &ScenarioConfig, out_dir: &Path, only: Option<Experiment>, seed: Option<u64>) -> Result<Report> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let list: Vec<Experiment> = match only {
        Some(e) => vec![e],
        None => cfg.experiment.list(),
    };
    std::fs::create_dir_all(out_dir)?;
    let mut summaries = Vec::new();
    for e in list {
        let o = run_experiment(&cfg, e, cfg.seed)?;
        let mut files = Vec::new();
        for s in &o.series {
            let file = format!("{}_{}.csv", e.name(), s.name);
            std::fs::write(out_dir.join(&file), s.to_csv())?;
            files.push(file);
        }
        summaries.push(ExperimentSummary {
            name: e.name(),
            status: o.status(),
            scalars: o.scalars,
            checks: o.checks,
            series_files: files,
        });
    }
    let status = if summaries.iter().any(|s| s.status == Status::Fail) {
        Status::Fail
    } else {
        Status::Pass
    };
    let report = Report {
        program: "fermikms",
        version: env!("CARGO_PKG_VERSION"),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        beta: cfg.beta,
        budgets: cfg.numeric.clone(),
        experiments: summaries,
        status,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out_dir.join("report.json"), text + "\n")?;
    Ok(report)
}

/// Exit status for a finished or failed run.
pub fn exit_code(r: &Result<Report>) -> i32 {
    match r {
        Ok(rep) if rep.status == Status::Pass => 0,
        Ok(_) => 1,
        Err(Error::Config(_)) => 2,
        Err(Error::Hypothesis(_)) | Err(Error::DegenerateGap(_)) => 3,
        Err(_) => 1,
    }
}
