//! End-to-end acceptance checks. Each test prints one pass/fail line
//! (visible with `cargo test --test acceptance -- --nocapture`) and asserts
//! the same verdict, so the suite doubles as a human-readable report.

use std::sync::LazyLock;
use viscosim::dynamics::{
    residual_refinement_pair, simulate, InitialCondition, NonlinearOp, RecordSpec, SimConfig,
    SpectralState,
};
use viscosim::noise::{make_noise_spec, NoiseRule, NoiseSpec, RandomStream};
use viscosim::statistics::{
    consistency_rate, delta_method_transform, estimate_sigma_m_sq, ks_distance, moment_scaling,
    quadratic_variation_lln, run_ensemble, sigma_nu_from_sigma_m, supermartingale_exceedance,
    supermartingale_gamma, EnsembleSummary,
};
use viscosim::stokes::{assemble_basis, ChannelGeometry, StokesBasis};

const TAU: f64 = 2.0 * std::f64::consts::PI;

fn verdict(name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{name}: {detail}");
}

fn build_basis(fourier_cutoff: usize, wall_order: usize, basis_size: usize) -> StokesBasis {
    let geo = ChannelGeometry::new(TAU, fourier_cutoff, wall_order, basis_size).unwrap();
    assemble_basis(&geo).unwrap()
}

fn power_law(basis: &StokesBasis) -> NoiseSpec {
    make_noise_spec(&NoiseRule::PowerLaw { c: 1.0, r: 1.0 }, basis).unwrap()
}

fn sim_config(nu: f64, dt: f64, horizon: f64, linear_only: bool) -> SimConfig {
    SimConfig {
        viscosity: nu,
        dt,
        horizon,
        linear_only,
        initial: InitialCondition::Zero,
        output_stride: 1,
    }
}

/// 32-mode basis shared by the nonlinearity and energy-balance checks.
static WIDE_BASIS: LazyLock<StokesBasis> = LazyLock::new(|| build_basis(2, 40, 32));

/// One nonlinear ensemble feeds the rate, tail-bound, and moment checks:
/// 256 runs to t = 1000 with probes on a decade-spanning checkpoint grid.
static ENSEMBLE: LazyLock<(StokesBasis, NoiseSpec, EnsembleSummary)> = LazyLock::new(|| {
    let basis = build_basis(1, 24, 6);
    let spec = power_law(&basis);
    let record = RecordSpec {
        probe_times: vec![10.0, 30.0, 100.0, 300.0, 1000.0],
        unit_records: true,
        sample_stride: 0,
    };
    let summary = run_ensemble(
        &sim_config(ENSEMBLE_NU, 0.005, 1000.0, false),
        &spec,
        &basis,
        256,
        5,
        &record,
        "acceptance",
    )
    .unwrap();
    (basis, spec, summary)
});
const ENSEMBLE_NU: f64 = 0.5;

#[test]
fn basis_correctness() {
    let basis = build_basis(0, 32, 8);
    let mut spec_err: f64 = 0.0;
    for (n, mode) in basis.modes.iter().enumerate() {
        let exact = ((n + 1) as f64 * std::f64::consts::PI / 2.0).powi(2);
        spec_err = spec_err.max((mode.alpha - exact).abs() / exact);
    }
    let gram = basis.gram();
    let mut gram_err: f64 = 0.0;
    for i in 0..basis.len() {
        for j in 0..basis.len() {
            let expect = if i == j { 1.0 } else { 0.0 };
            gram_err = gram_err.max((gram[(i, j)] - expect).abs());
        }
    }
    let mut div_err: f64 = 0.0;
    for j in 0..basis.len() {
        let f = basis.mode_field(j);
        let scale = f.d1u1.amax().max(f.d2u2.amax()).max(1.0);
        for r in 0..f.u1.len() {
            div_err = div_err.max((f.d1u1[r] + f.d2u2[r]).abs() / scale);
        }
    }
    let pass = spec_err <= 1e-8 && gram_err <= 1e-10 && div_err <= 1e-8;
    verdict(
        "basis correctness",
        pass,
        &format!(
            "wall spectrum rel err {spec_err:.2e} <= 1e-8, gram err {gram_err:.2e} <= 1e-10, \
             divergence {div_err:.2e} <= 1e-8"
        ),
    );
}

#[test]
fn nonlinearity_energy_neutrality() {
    let basis = &*WIDE_BASIS;
    let op = NonlinearOp::new(basis);
    let mut stream = RandomStream::new(77, 0);
    let mut u = vec![0.0; basis.len()];
    let mut bu = vec![0.0; basis.len()];
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        stream.standard_normals(&mut u);
        op.apply(&u, &mut bu);
        let pairing: f64 = u.iter().zip(&bu).map(|(a, b)| a * b).sum();
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(pairing.abs() / (1.0 + norm.powi(3)));
    }
    verdict(
        "nonlinearity energy neutrality",
        worst <= 1e-8,
        &format!("max |(B(u), u)| / (1 + ||u||^3) = {worst:.2e} <= 1e-8 over 100 states, J = 32"),
    );
}

#[test]
fn energy_balance_first_order_in_dt() {
    let basis = &*WIDE_BASIS;
    let spec = power_law(basis);
    let (coarse, fine) =
        residual_refinement_pair(basis, &spec, 0.5, 2e-3, 10.0, 2024, false).unwrap();
    let ratio = fine / coarse;
    verdict(
        "energy balance first order in dt",
        ratio <= 0.6,
        &format!("residual ratio dt=1e-3 over dt=2e-3 is {ratio:.3} <= 0.6"),
    );
}

#[test]
fn linear_subcase_estimates() {
    let basis = build_basis(1, 24, 6);
    let spec = power_law(&basis);
    let nu = 0.5;
    let config = sim_config(nu, 0.005, 500.0, true);
    let mut stream = RandomStream::new(1, 0);
    let traj = simulate(
        &SpectralState::zero(basis.len()),
        &config,
        &basis,
        &spec,
        &mut stream,
        &RecordSpec::default(),
    )
    .unwrap();
    let target = spec.aggregate / (2.0 * nu);
    let xi_rel = (traj.trace.xi().unwrap() - target).abs() / target;
    let nu_rel = (traj.trace.nu_hat().unwrap() - nu).abs() / nu;
    verdict(
        "linear subcase estimates",
        xi_rel <= 0.05 && nu_rel <= 0.1,
        &format!("xi rel err {xi_rel:.4} <= 0.05, nu_hat rel err {nu_rel:.4} <= 0.1 at T = 500"),
    );
}

#[test]
fn consistency_rate_of_nu_hat() {
    let (_, _, summary) = &*ENSEMBLE;
    let fit = consistency_rate(summary, ENSEMBLE_NU).unwrap();
    verdict(
        "consistency rate",
        (-0.65..=-0.35).contains(&fit.slope),
        &format!("median |nu_hat - nu| decays with slope {:.3} in [-0.65, -0.35]", fit.slope),
    );
}

#[test]
fn asymptotic_normality() {
    let basis = build_basis(1, 24, 6);
    let spec = power_law(&basis);
    let (nu, t, runs, seed) = (0.2, 200.0, 512usize, 9u64);
    let config = sim_config(nu, 0.001, t, false);
    let record = RecordSpec {
        probe_times: vec![t],
        unit_records: false,
        sample_stride: 0,
    };
    let summary = run_ensemble(&config, &spec, &basis, runs, seed, &record, "acceptance").unwrap();
    let samples: Vec<f64> = summary
        .runs
        .iter()
        .map(|r| t.sqrt() * (r.probes[0].nu_hat - nu))
        .collect();

    // Long-run ergodic estimate of sigma_M on a fresh stream.
    let mut stream = RandomStream::new(seed, runs as u64);
    let long_record = RecordSpec {
        probe_times: vec![],
        unit_records: true,
        sample_stride: 0,
    };
    let traj = simulate(
        &SpectralState::zero(basis.len()),
        &config,
        &basis,
        &spec,
        &mut stream,
        &long_record,
    )
    .unwrap();
    let sigma_m = estimate_sigma_m_sq(&traj.units, 0.2).unwrap().sqrt();
    let sigma_nu = sigma_nu_from_sigma_m(sigma_m, nu, spec.aggregate).unwrap();
    let ks = ks_distance(&samples, sigma_nu).unwrap();
    verdict(
        "asymptotic normality",
        ks <= 0.12,
        &format!(
            "KS distance of sqrt(t)(nu_hat - nu) to N(0, sigma_nu^2) is {ks:.4} <= 0.12 \
             (R = {runs}, t = {t}, sigma_nu = {sigma_nu:.4})"
        ),
    );
}

#[test]
fn supermartingale_tail_bound() {
    let (basis, spec, summary) = &*ENSEMBLE;
    let gamma = supermartingale_gamma(basis, spec);
    let rows = supermartingale_exceedance(summary, &[1.0, 2.0, 4.0, 8.0, 16.0], gamma, ENSEMBLE_NU);
    let n = summary.run_count() as f64;
    let mut pass = true;
    let mut detail = String::new();
    for (rho, emp, bound) in &rows {
        let se = (emp * (1.0 - emp) / n).sqrt();
        pass &= *emp <= bound + 2.0 * se;
        detail.push_str(&format!("rho {rho}: {emp:.3} vs {bound:.3}+2se; "));
    }
    verdict("supermartingale tail bound", pass, detail.trim_end_matches("; "));
}

#[test]
fn quadratic_variation_lln_matches_sigma_m() {
    let basis = build_basis(1, 24, 6);
    let spec = power_law(&basis);
    let nu = 0.5;
    let record = RecordSpec {
        probe_times: vec![],
        unit_records: true,
        sample_stride: 0,
    };
    let run = |linear: bool, stream: u64| {
        let mut s = RandomStream::new(21, stream);
        simulate(
            &SpectralState::zero(basis.len()),
            &sim_config(nu, 0.005, 1000.0, linear),
            &basis,
            &spec,
            &mut s,
            &record,
        )
        .unwrap()
    };

    let traj = run(false, 0);
    let sigma_sq = estimate_sigma_m_sq(&traj.units, 0.2).unwrap();
    let lln = quadratic_variation_lln(&traj.units);
    let at_200 = lln.iter().find(|(k, _)| *k == 200).unwrap().1;
    let lln_rel = (at_200 - sigma_sq).abs() / sigma_sq;

    let lin = run(true, 1);
    let lin_sq = estimate_sigma_m_sq(&lin.units, 0.2).unwrap();
    let exact: f64 = basis
        .alphas()
        .iter()
        .zip(&spec.amplitudes)
        .map(|(a, b)| b.powi(4) / (2.0 * nu * a))
        .sum();
    let lin_rel = (lin_sq - exact).abs() / exact;

    verdict(
        "quadratic variation lln",
        lln_rel <= 0.1 && lin_rel <= 0.1,
        &format!(
            "<M>_200 / 200 off sigma_M^2 by {lln_rel:.4} <= 0.1; linear sigma_M^2 off \
             sum b^4/(2 nu alpha) by {lin_rel:.4} <= 0.1"
        ),
    );
}

#[test]
fn martingale_moment_scaling() {
    let (_, _, summary) = &*ENSEMBLE;
    let sigma_m = estimate_sigma_m_sq(&summary.runs[0].units, 0.2)
        .unwrap()
        .sqrt();
    let scaling = moment_scaling(summary, 1, sigma_m).unwrap();

    // Per-interval exponential moments of |M_k - M_{k-1}|, worst over k vs
    // best over k: stationarity keeps the spread tight.
    let theta = 0.1 / sigma_m;
    let n_units = summary.runs.iter().map(|r| r.units.len()).min().unwrap();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for k in 0..n_units {
        let mut acc = 0.0;
        for run in &summary.runs {
            let prev = if k == 0 { 0.0 } else { run.units[k - 1].m };
            acc += (theta * (run.units[k].m - prev).abs()).exp();
        }
        let mean = acc / summary.run_count() as f64;
        lo = lo.min(mean);
        hi = hi.max(mean);
    }
    let spread = hi / lo;
    let pass = (0.85..=1.15).contains(&scaling.exponent) && spread < 2.0;
    verdict(
        "martingale moment scaling",
        pass,
        &format!(
            "E sup |M|^2 grows with exponent {:.3} in [0.85, 1.15]; unit-increment \
             exponential moment spread {spread:.3} < 2",
            scaling.exponent
        ),
    );
}

#[test]
fn delta_method_transfer() {
    let (a, sigma, c, n) = (0.8f64, 0.5f64, 1.0f64, 10_000usize);
    let mut stream = RandomStream::new(31, 0);
    let mut z = vec![0.0; n];
    stream.standard_normals(&mut z);

    let mut prev_ks = f64::INFINITY;
    let mut pass = true;
    let mut detail = String::new();
    for t in [1e2f64, 1e4] {
        let eta: Vec<f64> = z.iter().map(|&zi| a + sigma / t.sqrt() * zi).collect();
        let input: Vec<f64> = eta.iter().map(|&e| t.sqrt() * (e - a)).collect();
        let ks_in = ks_distance(&input, sigma).unwrap();
        let out = delta_method_transform(&eta, a, c, t).unwrap();
        let ks_out = ks_distance(&out, c * sigma / (a * a)).unwrap();
        pass &= ks_out <= ks_in + 0.05 && ks_out < prev_ks;
        prev_ks = ks_out;
        detail.push_str(&format!("t = {t:.0}: KS {ks_out:.4} vs input {ks_in:.4}; "));
    }
    verdict(
        "delta method transfer",
        pass,
        &format!("{}decreasing in t", detail),
    );
}

#[test]
fn subcommand_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        format!(
            "dynamics.horizon = 5\ndynamics.output_stride = 20\noutput.dir = {}\n",
            dir.path().join("out").display()
        ),
    )
    .unwrap();
    let run = || {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_viscosim"))
            .args(["simulate", "--config"])
            .arg(&cfg_path)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        let read = |name: &str| std::fs::read(dir.path().join("out").join(name)).unwrap();
        (read("timeseries.csv"), read("run.ckpt"))
    };
    let first = run();
    let second = run();
    verdict(
        "subcommand determinism",
        first == second,
        "two identical simulate invocations produced byte-identical timeseries and checkpoint",
    );
}
