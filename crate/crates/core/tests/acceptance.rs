//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! Reference values come from oracles written here on top of nalgebra.

use std::process::ExitCode;
use std::time::Instant;

use fermikms::dynamics::{cocycle_defect, compute_k_with, gaussian_packet};
use fermikms::entropy::{
    entropy_production, entropy_report, eulerian, eulerian_generating_check, ness_mode_eulerian,
    ness_rel_entropy_closed, rel_entropy_closed, rel_entropy_integral, rel_entropy_kl, BoundStateDatum,
};
use fermikms::estimates::{
    adiabatic_sweep, hs_bound_k, hs_bound_u, k_for, kernel_bound_h, powers_stormer, random_profile, stationary_phase,
    PhaseSetup,
};
use fermikms::fermi_derivatives::{da_dlambda, derivative_consistency, FermiFamily};
use fermikms::kms::{t_series, t_series_terms, KmsSpec};
use fermikms::linop::{commutator, op_norm, CMat, Covariance, HermitianOperator, C64};
use fermikms::model::{build_dirac, build_potential, LatticeModel, PotentialProfile};
use fermikms::ness::{bound_state_data, bound_states, ness_ideal_covariance, return_to_equilibrium_probe};
use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria whose failure is understood and recorded; they still print FAIL.
const KNOWN_FAILURES: &[(u32, &str)] = &[(
    4,
    "the N = 15 truncation of the Eulerian generating function at (0.3, -2) leaves a tail of 8.6e-10; \
     the 1e-10 target is first met at N = 17",
)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------- oracles ----------

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian_matrix(n: usize, r: &mut ChaCha8Rng) -> CMat {
    CMat::from_fn(n, n, |_, _| {
        // Box–Muller
        let (u1, u2): (f64, f64) = (r.random_range(1e-12..1.0), r.random_range(0.0..1.0));
        let rad = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        C64::new(rad * th.cos(), rad * th.sin())
    })
}

fn random_unitary(n: usize, r: &mut ChaCha8Rng) -> CMat {
    gaussian_matrix(n, r).qr().q()
}

/// U diag(λ) U† with λ uniform in [−half_width, half_width].
fn hermitian_with_spectrum(n: usize, half_width: f64, r: &mut ChaCha8Rng) -> CMat {
    let u = random_unitary(n, r);
    let lam: Vec<f64> = (0..n).map(|_| r.random_range(-half_width..half_width)).collect();
    let diag = CMat::from_diagonal(&nalgebra::DVector::from_iterator(n, lam.iter().map(|&x| C64::new(x, 0.0))));
    &u * diag * u.adjoint()
}

/// Random hermitian matrix rescaled to operator norm `norm`.
fn hermitian_with_norm(n: usize, norm: f64, r: &mut ChaCha8Rng) -> CMat {
    let g = gaussian_matrix(n, r);
    let h = (&g + g.adjoint()) * C64::new(0.5, 0.0);
    let e = SymmetricEigen::new(h.clone());
    let s = e.eigenvalues.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    h * C64::new(norm / s, 0.0)
}

fn oracle_function(h: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let e = SymmetricEigen::new(h.clone());
    let v = &e.eigenvectors;
    let d = CMat::from_diagonal(&nalgebra::DVector::from_iterator(
        h.nrows(),
        e.eigenvalues.iter().map(|&x| C64::new(f(x), 0.0)),
    ));
    v * d * v.adjoint()
}

fn oracle_fermi(h: &CMat, beta: f64) -> CMat {
    oracle_function(h, |x| 1.0 / (1.0 + (-beta * x).exp()))
}

/// Tr[A(log A − log B) + (1−A)(log(1−A) − log(1−B))] by direct logarithms.
fn oracle_rel_entropy(d: &CMat, k: &CMat, beta: f64) -> f64 {
    let h = d + k;
    let la = oracle_function(d, |x| -(1.0 + (-beta * x).exp()).ln());
    let l1a = oracle_function(d, |x| -(1.0 + (beta * x).exp()).ln());
    let lb = oracle_function(&h, |x| -(1.0 + (-beta * x).exp()).ln());
    let l1b = oracle_function(&h, |x| -(1.0 + (beta * x).exp()).ln());
    let a = oracle_fermi(d, beta);
    let n = d.nrows();
    let one_a = CMat::identity(n, n) - &a;
    ((&a * (la - lb)).trace() + (&one_a * (l1a - l1b)).trace()).re
}

fn op(m: CMat) -> HermitianOperator {
    HermitianOperator::new(m).expect("hermitian")
}

fn opnorm_dense(m: &CMat) -> f64 {
    m.singular_values().max()
}

/// Eulerian numbers by enumerating permutations (Heap's algorithm).
fn brute_force_eulerian(n: usize) -> Vec<u64> {
    let mut a: Vec<usize> = (0..n).collect();
    let mut counts = vec![0u64; n];
    let mut c = vec![0usize; n];
    let count = |a: &[usize], counts: &mut Vec<u64>| {
        let asc = a.windows(2).filter(|w| w[0] < w[1]).count();
        counts[asc] += 1;
    };
    count(&a, &mut counts);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            count(&a, &mut counts);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    counts
}

fn single_mode_exact() -> f64 {
    // β = 1, s = 0, |k| = 1
    0.5 + ((1.0 + (-1.0f64).exp()) / 2.0).ln()
}

fn well_1d(n: usize, l: f64, amp: f64, eps: f64) -> (LatticeModel, PotentialProfile) {
    (
        LatticeModel::new(1, n, l, 1.0, 0.0).unwrap(),
        PotentialProfile::electric_bump(amp, 3.0, eps),
    )
}

// ---------- criteria ----------

fn criterion_1() -> Outcome {
    let beta = 1.0;
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (seed, n) in [(101u64, 32usize), (102, 20), (103, 8)] {
        let mut r = rng(seed);
        let d = hermitian_with_spectrum(n, 3.0, &mut r);
        let k = hermitian_with_norm(n, 0.3, &mut r);
        let exact = oracle_fermi(&(&d + &k), beta);
        let spec = KmsSpec::new(beta, op(d), op(k)).unwrap();
        let ts = t_series(&spec, beta, 5, 12).unwrap();
        let c = spec.contraction;
        let res = opnorm_dense(&(ts.value.matrix() - exact));
        let allowed = c.powi(6) / (1.0 - c) + 1e-4;
        worst = worst.max(res / allowed);
        ok &= res <= allowed;
    }
    outcome(ok, format!("worst residual/allowance {worst:.3e}"))
}

fn criterion_2() -> Outcome {
    let mut ok = true;
    let mut worst = [0.0f64; 4];
    for seed in 0..20u64 {
        let mut r = rng(200 + seed);
        let n = r.random_range(4..=32);
        let c = r.random_range(0.05..0.3);
        let beta = r.random_range(0.5..2.0);
        let d = hermitian_with_spectrum(n, 3.0, &mut r);
        let k = hermitian_with_norm(n, c / beta, &mut r);
        let oracle = oracle_rel_entropy(&d, &k, beta);
        let spec = KmsSpec::new(beta, op(d), op(k)).unwrap();
        let rep = entropy_report(&spec, 5, 12, 32).unwrap();
        let e = [
            (rep.s_kl - rep.s_closed).abs(),
            (rep.s_integral - rep.s_closed).abs(),
            (rep.s_series.value - rep.s_closed).abs(),
            (oracle - rep.s_closed).abs(),
        ];
        ok &= e[0] <= 1e-9 && e[1] <= 1e-6 && e[2] <= rep.s_series.truncation_bound + 5e-3 && e[3] <= 1e-9;
        ok &= rep.values().iter().all(|v| *v >= -1e-9);
        for (w, x) in worst.iter_mut().zip(e) {
            *w = w.max(x);
        }
    }
    outcome(
        ok,
        format!(
            "max |kl-closed| {:.1e}, |integral-closed| {:.1e}, |series-closed| {:.1e}, |oracle-closed| {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn criterion_3() -> Outcome {
    let exact = single_mode_exact();
    let mut ok = (exact - 0.120115).abs() <= 1e-6;
    let mut worst: f64 = 0.0;
    for k in [1.0, -1.0] {
        let spec = KmsSpec::new(
            1.0,
            HermitianOperator::from_real_diagonal(&[0.0]),
            HermitianOperator::from_real_diagonal(&[k]),
        )
        .unwrap();
        let a = Covariance::fermi(&spec.d, 1.0).unwrap();
        let b = Covariance::fermi(&spec.d.add(&spec.k), 1.0).unwrap();
        let vals = [
            rel_entropy_closed(&spec).unwrap(),
            rel_entropy_integral(&spec, 32).unwrap(),
            rel_entropy_kl(&a, &b).unwrap(),
            ness_rel_entropy_closed(1.0, &[BoundStateDatum::from_shift(0.0, k, 1.0)]).unwrap(),
        ];
        for v in vals {
            worst = worst.max((v - 0.120115).abs());
            ok &= (v - 0.120115).abs() <= 1e-6 && (v - exact).abs() <= 1e-9;
        }
    }
    let mut series_gap: f64 = 0.0;
    for s in [-1.0, -0.3, 0.0, 0.5, 2.0] {
        for k in [-1.0, -0.5, 0.2, 0.6, 1.0] {
            let x = k / (1.0 + f64::exp(s));
            if x.abs() > 0.5 {
                continue;
            }
            let closed = ness_rel_entropy_closed(1.0, &[BoundStateDatum::from_shift(s, k, 1.0)]).unwrap();
            series_gap = series_gap.max((ness_mode_eulerian(1.0, s, k, 34) - closed).abs());
        }
    }
    ok &= series_gap <= 1e-10;
    outcome(ok, format!("max deviation from 0.120115 {worst:.1e}, Eulerian series gap {series_gap:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut ok = true;
    for n in 1..=8 {
        ok &= eulerian(n).unwrap() == brute_force_eulerian(n);
    }
    let mut fact: u128 = 1;
    for n in 1..=20usize {
        fact *= n as u128;
        ok &= eulerian(n).unwrap().iter().map(|&x| x as u128).sum::<u128>() == fact;
    }
    let combinatorics = ok;
    let g = eulerian_generating_check(0.3, -2.0, 15).unwrap();
    ok &= g.gap <= 1e-10;
    outcome(
        ok,
        format!(
            "exact rows and row sums {}, generating-function gap at N=15 {:.2e} (integrated form {:.2e})",
            if combinatorics { "match" } else { "MISMATCH" },
            g.gap,
            g.gap_integrated
        ),
    )
}

fn criterion_5() -> Outcome {
    let (m, prof) = well_1d(21, 16.0, -1.0, 1.0);
    let d = build_dirac(&m).unwrap();
    let a = build_potential(&m, &prof).unwrap();
    let step = 1e-3 * prof.schedule().window;
    let rep = compute_k_with(&d, &a, prof.schedule(), step).unwrap();
    let c = rep.cocycle(&d);
    let mut co: f64 = 0.0;
    for (t, s) in [(0.7, 1.3), (-2.0, 0.4), (5.0, -3.5), (0.0, 2.0)] {
        co = co.max(cocycle_defect(&c, t, s));
    }
    let ok = co <= 1e-8 && rep.unitarity_defect <= 1e-9 && rep.disagreement <= 1e-6;
    outcome(
        ok,
        format!(
            "cocycle {co:.1e}, unitarity {:.1e}, dual-formula disagreement {:.1e}",
            rep.unitarity_defect, rep.disagreement
        ),
    )
}

fn criterion_6() -> Outcome {
    let (m, prof) = well_1d(21, 16.0, 0.5, 2.0);
    let s = adiabatic_sweep(&m, &prof, &[1.0, 2.0, 4.0, 8.0, 16.0], 5e-3).unwrap();
    outcome(
        s.passes(),
        format!(
            "exponent {:.2}, R^2 {:.3}, norms {:?}",
            s.fitted_exponent,
            s.r_squared,
            s.hs_norms.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>()
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut ok = true;
    let mut msg = Vec::new();
    for (dim, expected, tol) in [(3usize, -1.5, 0.15), (1, -0.5, 0.1)] {
        let setup = PhaseSetup {
            spatial_dim: dim,
            mass: 1.0,
            p_max: 8.0,
            n_points: 4000,
        };
        let hi = 0.5 * setup.recurrence();
        let t: Vec<f64> = (0..24).map(|i| 10.0 * (hi / 10.0).powf(i as f64 / 23.0)).collect();
        let r = stationary_phase(&setup, |p| (-p * p / 2.0).exp(), &t).unwrap();
        ok &= (r.fitted_exponent - expected).abs() <= tol && r.r_squared >= 0.95;
        msg.push(format!("{dim}D slope {:.3} (R^2 {:.3})", r.fitted_exponent, r.r_squared));
    }
    outcome(ok, msg.join(", "))
}

fn criterion_8() -> Outcome {
    let base = LatticeModel::new(1, 17, 16.0, 1.0, 0.0).unwrap();
    let mut violations = 0;
    let mut evaluations = 0;
    let mut worst_ratio: f64 = 0.0;
    for n in [17, 25] {
        let m = base.with_modes(n);
        for seed in 0..20u64 {
            let prof = random_profile(&base, 800 + seed, 0.3);
            let step = 2e-3 * prof.schedule().window;
            let (d, rep) = k_for(&m, &prof, step).unwrap();
            let kb = kernel_bound_h(&m, &prof, rep.k.matrix(), seed).unwrap();
            let checks = [
                hs_bound_u(&m, &prof, step, seed).unwrap(),
                hs_bound_k(&m, &prof, &d, rep.k.matrix(), seed).unwrap(),
                kb.l1_check,
                kb.l2_check,
            ];
            for c in &checks {
                evaluations += 1;
                worst_ratio = worst_ratio.max(c.lhs / c.rhs);
                if !c.passes() {
                    violations += 1;
                }
            }
            evaluations += 1;
            if !kb.pointwise_ok {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations in {evaluations} evaluations, largest lhs/rhs {worst_ratio:.3}"),
    )
}

fn criterion_9() -> Outcome {
    // deep well: gap eigenstates exist
    let m = LatticeModel::new(1, 41, 20.0, 1.0, 0.0).unwrap();
    let d = build_dirac(&m).unwrap();
    let k = build_potential(&m, &PotentialProfile::electric_bump(-3.0, 3.0, 1.0)).unwrap();
    let g = bound_states(&d, &k, 1.0, 1e-3).unwrap();
    let ideal = ness_ideal_covariance(&g, &d, &k, 1.0).unwrap();
    let h = d.add(&k);
    let comm = op_norm(&commutator(h.matrix(), ideal.op.matrix()));
    let data = bound_state_data(&g, &d, 1.0).unwrap();
    let occ = g
        .states
        .iter()
        .zip(&data)
        .map(|(s, b)| (s.vector.dotc(&(ideal.op.matrix() * &s.vector)).re - b.occupation).abs())
        .fold(0.0, f64::max);
    let probes: Vec<_> = g.states.iter().map(|s| s.vector.clone()).collect();
    let r = return_to_equilibrium_probe(&d, &k, 1.0, &probes, &[10.0, 100.0, 1000.0], Some(&g)).unwrap();
    let persistent = (0..g.count())
        .flat_map(|j| r.gaps.iter().map(move |row| (j, row)))
        .map(|(j, row)| (row[j] - r.conserved_mismatch[j]).abs())
        .fold(0.0, f64::max);
    let mismatch_min = r.conserved_mismatch.iter().cloned().fold(f64::INFINITY, f64::min);
    // shallow well: nothing inside the shrunken gap window
    let horizons = [1.0, 4.0, 16.0, 64.0, 1024.0];
    let mut shrink: f64 = 0.0;
    let mut floors = Vec::new();
    let mut none = true;
    for (n, l) in [(41usize, 20.0), (81, 40.0)] {
        let m = LatticeModel::new(1, n, l, 1.0, 0.0).unwrap();
        let d = build_dirac(&m).unwrap();
        let k = build_potential(&m, &PotentialProfile::electric_bump(0.05, 3.0, 1.0)).unwrap();
        let g = bound_states(&d, &k, 1.0, 0.05).unwrap();
        none &= g.count() == 0;
        let ps = [gaussian_packet(&m, 0.0, 0.5, 1.5), gaussian_packet(&m, -2.0, -1.0, 1.0)];
        let r = return_to_equilibrium_probe(&d, &k, 1.0, &ps, &horizons, Some(&g)).unwrap();
        for j in 0..ps.len() {
            shrink = shrink.max(r.gaps[3][j] / r.gaps[0][j]);
        }
        floors.push(r.gaps[4].iter().cloned().fold(0.0, f64::max));
    }
    let ok = comm <= 1e-10 * h.op_norm()
        && occ <= 1e-12
        && g.count() > 0
        && persistent <= 1e-10
        && mismatch_min > 1e-3
        && none
        && shrink <= 0.5
        && floors[1] < floors[0];
    outcome(
        ok,
        format!(
            "{} gap states, commutator {comm:.1e}, occupation error {occ:.1e}, persistent-gap error {persistent:.1e}; \
             no gap states: Cesaro gap ratio T=64/T=1 {shrink:.2}, plateau {:.1e} (L=20) -> {:.1e} (L=40)",
            g.count(),
            floors[0],
            floors[1]
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut r = rng(1000);
    let n = 8;
    let beta = 1.0;
    let d = hermitian_with_spectrum(n, 3.0, &mut r);
    let k = hermitian_with_norm(n, 0.3, &mut r);
    let spec = KmsSpec::new(beta, op(d.clone()), op(k)).unwrap();
    let mut worst: f64 = 0.0;
    for i in 1..=10 {
        let t = 0.5 * i as f64;
        let p = entropy_production(&spec, t, if i == 10 { 200 } else { 8 }).unwrap();
        if p.e_t.abs() > 1e-8 {
            worst = worst.max((p.e_t - p.e_t_fd).abs() / p.e_t.abs());
        }
    }
    let p5 = entropy_production(&spec, 5.0, 200).unwrap();
    // K a function of D commutes with it
    let kc = oracle_function(&d, |x| 0.1 * (x * 0.7).sin());
    let cspec = KmsSpec::new(beta, op(d), op(kc)).unwrap();
    let mut comm: f64 = 0.0;
    for t in [0.3, 1.7, 4.2] {
        let p = entropy_production(&cspec, t, 16).unwrap();
        comm = comm.max(p.e_t.abs()).max(p.cumulative_residual);
    }
    let ok = worst <= 1e-5 && p5.cumulative_residual <= 1e-4 && comm <= 1e-12;
    outcome(
        ok,
        format!(
            "route disagreement {worst:.1e}, |int E - S(5)| {:.1e}, commuting case {comm:.1e}",
            p5.cumulative_residual
        ),
    )
}

fn criterion_11() -> Outcome {
    let mut r = rng(1100);
    let n = 8;
    let beta = 1.5;
    let d = hermitian_with_spectrum(n, 3.0, &mut r);
    let k = hermitian_with_norm(n, 0.25, &mut r);
    let fam = FermiFamily::absorb_beta(beta, &op(d.clone()), &op(k.clone())).unwrap();
    let mut ok = true;
    let mut errs = Vec::new();
    let mut slopes = Vec::new();
    for u in [0.0, 0.4] {
        let rep = derivative_consistency(&fam, u, 3, 16).unwrap();
        ok &= rep.relative_errors[0] <= 1e-5 && rep.relative_errors[1] <= 1e-5;
        ok &= (rep.taylor_slope / 4.0 - 1.0).abs() <= 0.1;
        errs.push(rep.relative_errors[0].max(rep.relative_errors[1]));
        slopes.push(rep.taylor_slope);
    }
    // order-n terms of the KMS series are dⁿA/dλⁿ/n! at u = 0
    let spec = KmsSpec::new(beta, op(d), op(k)).unwrap();
    let terms = t_series_terms(&spec, beta, 3, 14).unwrap();
    let mut cross: f64 = 0.0;
    let mut fact = 1.0;
    for j in 1..=3 {
        fact *= j as f64;
        let dn = da_dlambda(&fam, 0.0, j, 14).unwrap() * C64::new(1.0 / fact, 0.0);
        cross = cross.max(opnorm_dense(&(dn - &terms[j - 1])));
    }
    ok &= cross <= 1e-8;
    outcome(
        ok,
        format!("max relative FD error {:.1e}, Taylor slopes {:.3?}, cross-module gap {cross:.1e}", errs[0].max(errs[1]), slopes),
    )
}

fn criterion_12() -> Outcome {
    let prof = PotentialProfile::electric_bump(0.3, 3.0, 1.0);
    let models: Vec<LatticeModel> = [17, 33, 65]
        .iter()
        .map(|&n| LatticeModel::new(1, n, 16.0, 1.0, 0.0).unwrap())
        .collect();
    let s = powers_stormer(&models, &prof, 1.0, 2e-3 * prof.schedule().window, 1.0).unwrap();
    let nonzero = s.rows.iter().all(|r| r.hs1 > 0.0 && r.lundberg_k > 0.0);
    outcome(
        s.stable(0.05) && nonzero,
        format!(
            "growth over the last doubling: PS {:.2e} / {:.2e}, Lundberg K {:.2e}, cocycle {:.2e}",
            s.last_growth[0], s.last_growth[1], s.last_growth[2], s.last_growth[3]
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(u32, fn() -> Outcome); 12] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
        (12, criterion_12),
    ];
    let mut unexpected = Vec::new();
    let mut passed = 0;
    for (id, f) in criteria {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {id:>2}: {} ({secs:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if o.pass {
            passed += 1;
        } else if let Some((_, why)) = KNOWN_FAILURES.iter().find(|(k, _)| *k == id) {
            println!("              known failure: {why}");
        } else {
            unexpected.push(id);
        }
    }
    println!("acceptance: {passed}/12 PASS");
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
