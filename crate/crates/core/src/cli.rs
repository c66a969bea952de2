//! Command-line front end: config loading, basis caching, experiment
//! orchestration, and report files. Every artifact is stamped with the
//! config hash and reproducible byte-for-byte from (config, seed).

use crate::config::{parse_config, ExperimentConfig, KsSigmaSource};
use crate::dynamics::{
    read_checkpoint, residual_refinement_pair, simulate, simulate_resumed, skip_draws,
    timeseries_csv, write_checkpoint, RecordSpec, SpectralState,
};
use crate::error::{Error, Result};
use crate::noise::{make_noise_spec, NoiseSpec, RandomStream};
use crate::statistics::{
    consistency_csv, consistency_rate, estimate_sigma_m_sq, ks_distance, normality_csv,
    qv_lln_csv, quadratic_variation_lln, run_ensemble, sigma_nu_from_sigma_m, supermartingale_csv,
    supermartingale_exceedance, supermartingale_gamma, NormalityReport,
};
use crate::stokes::{assemble_basis, StokesBasis};
use clap::{Parser, Subcommand};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Simulator and statistical test harness for viscosity estimation in 2D
/// stochastic channel flow.
#[derive(Parser)]
#[command(name = "viscosim", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build (or load from cache) the Stokes eigenbasis and print the
    /// eigenvalue table.
    Basis(CommonArgs),
    /// Integrate one trajectory; write the time-series CSV and a checkpoint.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from this checkpoint instead of the configured initial
        /// condition (config hash must match).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run one trajectory and print the viscosity estimate and the energy
    /// balance residual.
    Estimate(CommonArgs),
    /// Monte Carlo consistency study: ensemble, error-decay fit, and the
    /// supermartingale tail table.
    McConsistency(CommonArgs),
    /// Monte Carlo normality study: ensemble at a fixed time, CLT scales,
    /// and the KS verdict.
    McNormality(CommonArgs),
    /// Run the built-in oracle suite against this config's discretization.
    Validate(CommonArgs),
    /// Aggregate previously written artifacts into one summary document
    /// (no recomputation).
    Report(CommonArgs),
}

#[derive(Parser)]
pub struct CommonArgs {
    /// Path to the experiment config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override ensemble.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override ensemble.runs.
    #[arg(long)]
    pub runs: Option<usize>,
}

/// Exit codes: 0 success, 1 validation failure, 2 config error, 3 divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } | Error::EnsembleFailure { .. } => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Basis(args) => cmd_basis(&args),
        Command::Simulate { common, resume } => cmd_simulate(&common, resume.as_deref()),
        Command::Estimate(args) => cmd_estimate(&args),
        Command::McConsistency(args) => cmd_mc_consistency(&args),
        Command::McNormality(args) => cmd_mc_normality(&args),
        Command::Validate(args) => cmd_validate(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match outcome {
        Ok(checks_passed) => {
            if checks_passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error:");
            for line in e.to_string().lines() {
                eprintln!("  {line}");
            }
            exit_code(&e)
        }
    }
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = args.runs {
        cfg.runs = runs;
    }
    if let Ok(dir) = std::env::var("VISCOSIM_OUTPUT_DIR") {
        cfg.output_dir = PathBuf::from(dir);
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg)
}

/// Load the eigenbasis from the cache in the output directory, rebuilding
/// (and re-caching) on miss or key mismatch.
fn load_basis(cfg: &ExperimentConfig) -> Result<StokesBasis> {
    let geometry = cfg.geometry()?;
    let cache = cfg.output_dir.join("basis.cache");
    if cache.exists() {
        if let Some(basis) = StokesBasis::load_cache(&cache, &geometry)? {
            return Ok(basis);
        }
    }
    let basis = assemble_basis(&geometry)?;
    basis.save_cache(&cache)?;
    Ok(basis)
}

fn noise_spec(cfg: &ExperimentConfig, basis: &StokesBasis) -> Result<NoiseSpec> {
    make_noise_spec(&cfg.noise_rule, basis)
}

fn cmd_basis(args: &CommonArgs) -> Result<bool> {
    let cfg = load_config(args)?;
    let basis = load_basis(&cfg)?;
    println!("# config {}", cfg.hash());
    println!("{:>4} {:>4} {:>6} {:>22}", "j", "k", "parity", "alpha");
    for (j, mode) in basis.modes.iter().enumerate() {
        println!(
            "{:>4} {:>4} {:>6} {:>22.15e}",
            j + 1,
            mode.wavenumber,
            match mode.parity {
                crate::stokes::Parity::Cos => "cos",
                crate::stokes::Parity::Sin => "sin",
            },
            mode.alpha
        );
    }
    Ok(true)
}

fn cmd_simulate(args: &CommonArgs, resume: Option<&Path>) -> Result<bool> {
    let cfg = load_config(args)?;
    let basis = load_basis(&cfg)?;
    let spec = noise_spec(&cfg, &basis)?;
    let hash = cfg.hash();
    let record = RecordSpec {
        probe_times: vec![],
        unit_records: false,
        sample_stride: cfg.output_stride,
    };
    let mut stream = RandomStream::new(cfg.seed, 0);
    let traj = match resume {
        Some(path) => {
            let ck = read_checkpoint(path, Some(&hash))?;
            skip_draws(&mut stream, ck.steps, basis.len());
            simulate_resumed(&ck, &cfg.sim_config(), &basis, &spec, &mut stream, &record)?
        }
        None => {
            let u0 = initial_state(&cfg, &basis)?;
            simulate(&u0, &cfg.sim_config(), &basis, &spec, &mut stream, &record)?
        }
    };
    std::fs::write(
        cfg.output_dir.join("timeseries.csv"),
        timeseries_csv(&traj.samples, &hash),
    )?;
    write_checkpoint(
        &cfg.output_dir.join("run.ckpt"),
        &hash,
        &traj.final_state,
        &traj.trace,
        traj.steps,
    )?;
    println!("# config {hash}");
    println!("t = {:.6}", traj.trace.t);
    println!("energy = {:.12e}", traj.trace.energy);
    println!("steps = {}", traj.steps);
    Ok(true)
}

fn initial_state(cfg: &ExperimentConfig, basis: &StokesBasis) -> Result<SpectralState> {
    use crate::dynamics::InitialCondition::*;
    Ok(match &cfg.initial {
        Zero => SpectralState::zero(basis.len()),
        Explicit(c) => SpectralState {
            t: 0.0,
            coefficients: c.clone(),
        },
        Checkpoint(path) => {
            let ck = read_checkpoint(path, None)?;
            SpectralState {
                t: 0.0,
                coefficients: ck.state.coefficients,
            }
        }
    })
}

fn cmd_estimate(args: &CommonArgs) -> Result<bool> {
    let cfg = load_config(args)?;
    let basis = load_basis(&cfg)?;
    let spec = noise_spec(&cfg, &basis)?;
    let mut stream = RandomStream::new(cfg.seed, 0);
    let u0 = initial_state(&cfg, &basis)?;
    let traj = simulate(
        &u0,
        &cfg.sim_config(),
        &basis,
        &spec,
        &mut stream,
        &RecordSpec::default(),
    )?;
    println!("# config {}", cfg.hash());
    println!("t = {:.6}", traj.trace.t);
    println!("nu_hat = {:.12e}", traj.trace.nu_hat()?);
    println!("xi = {:.12e}", traj.trace.xi()?);
    println!(
        "energy_residual = {:.12e}",
        traj.trace.energy_residual(cfg.viscosity)
    );
    Ok(true)
}

fn cmd_mc_consistency(args: &CommonArgs) -> Result<bool> {
    let cfg = load_config(args)?;
    let basis = load_basis(&cfg)?;
    let spec = noise_spec(&cfg, &basis)?;
    let hash = cfg.hash();
    let mut sim = cfg.sim_config();
    let last = *cfg.checkpoints.last().expect("validated non-empty");
    sim.horizon = sim.horizon.max(last);
    let record = RecordSpec {
        probe_times: cfg.checkpoints.clone(),
        unit_records: false,
        sample_stride: 0,
    };
    let summary = run_ensemble(&sim, &spec, &basis, cfg.runs, cfg.seed, &record, &hash)?;
    let fit = consistency_rate(&summary, cfg.viscosity)?;
    std::fs::write(
        cfg.output_dir.join("consistency.csv"),
        consistency_csv(&fit, &hash),
    )?;
    let gamma = supermartingale_gamma(&basis, &spec);
    let tail = supermartingale_exceedance(&summary, &cfg.rho_grid, gamma, cfg.viscosity);
    std::fs::write(
        cfg.output_dir.join("supermartingale.csv"),
        supermartingale_csv(&tail, &hash),
    )?;
    let slope_ok = fit.slope > -0.65 && fit.slope < -0.35;
    let mut text = String::new();
    let _ = writeln!(text, "# config {hash}");
    let _ = writeln!(text, "runs = {}", summary.run_count());
    let _ = writeln!(text, "failed = {}", summary.failed);
    let _ = writeln!(text, "slope = {:.6}", fit.slope);
    let _ = writeln!(text, "slope_in_range = {slope_ok}");
    std::fs::write(cfg.output_dir.join("consistency.txt"), &text)?;
    print!("{text}");
    Ok(slope_ok)
}

fn cmd_mc_normality(args: &CommonArgs) -> Result<bool> {
    let cfg = load_config(args)?;
    let basis = load_basis(&cfg)?;
    let spec = noise_spec(&cfg, &basis)?;
    let hash = cfg.hash();
    let t = cfg.horizon;
    let record = RecordSpec {
        probe_times: vec![t],
        unit_records: false,
        sample_stride: 0,
    };
    let sim = cfg.sim_config();
    let summary = run_ensemble(&sim, &spec, &basis, cfg.runs, cfg.seed, &record, &hash)?;
    let samples: Vec<f64> = summary
        .runs
        .iter()
        .map(|r| t.sqrt() * (r.probes[0].nu_hat - cfg.viscosity))
        .collect();

    let sigma_nu = match cfg.ks_sigma {
        KsSigmaSource::Derived => {
            // One long run on a fresh stream estimates sigma_M ergodically.
            let mut stream = RandomStream::new(cfg.seed, cfg.runs as u64);
            let long_record = RecordSpec {
                probe_times: vec![],
                unit_records: true,
                sample_stride: 0,
            };
            let u0 = initial_state(&cfg, &basis)?;
            let traj = simulate(&u0, &sim, &basis, &spec, &mut stream, &long_record)?;
            let sigma_m_sq = estimate_sigma_m_sq(&traj.units, cfg.burn_in)?;
            sigma_nu_from_sigma_m(sigma_m_sq.sqrt(), cfg.viscosity, spec.aggregate)?
        }
        KsSigmaSource::Empirical => {
            let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
            (samples.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>()
                / (samples.len() - 1) as f64)
                .sqrt()
        }
    };
    let ks = ks_distance(&samples, sigma_nu)?;
    let report = NormalityReport {
        sigma_m: sigma_nu * spec.aggregate / (2.0 * cfg.viscosity),
        sigma_nu,
        ks,
        sample_count: samples.len(),
        t,
    };
    std::fs::write(
        cfg.output_dir.join("normality.csv"),
        normality_csv(&samples, sigma_nu, &hash),
    )?;
    let pass = ks <= 0.12;
    let mut text = String::new();
    let _ = writeln!(text, "# config {hash}");
    let _ = writeln!(text, "t = {:.6}", report.t);
    let _ = writeln!(text, "samples = {}", report.sample_count);
    let _ = writeln!(text, "sigma_M = {:.12e}", report.sigma_m);
    let _ = writeln!(text, "sigma_nu = {:.12e}", report.sigma_nu);
    let _ = writeln!(text, "ks = {:.6}", report.ks);
    let _ = writeln!(text, "ks_pass = {pass}");
    std::fs::write(cfg.output_dir.join("normality.txt"), &text)?;
    print!("{text}");
    Ok(pass)
}

struct OracleRow {
    name: &'static str,
    residual: f64,
    tolerance: f64,
}

fn cmd_validate(args: &CommonArgs) -> Result<bool> {
    let cfg = load_config(args)?;
    let basis = load_basis(&cfg)?;
    let mut rows = Vec::new();

    // Wall-normal spectrum of the x1-independent modes has a closed form.
    let mut spec_err: f64 = 0.0;
    let mut n = 0usize;
    for mode in &basis.modes {
        if mode.wavenumber == 0 {
            n += 1;
            let exact = (n as f64 * std::f64::consts::PI / 2.0).powi(2);
            spec_err = spec_err.max((mode.alpha - exact).abs() / exact);
        }
    }
    rows.push(OracleRow {
        name: "k0_spectrum_rel_err",
        residual: spec_err,
        tolerance: 1e-8,
    });

    // Orthonormality on the quadrature grid.
    let gram = basis.gram();
    let mut gram_err: f64 = 0.0;
    for i in 0..basis.len() {
        for j in 0..basis.len() {
            let expect = if i == j { 1.0 } else { 0.0 };
            gram_err = gram_err.max((gram[(i, j)] - expect).abs());
        }
    }
    rows.push(OracleRow {
        name: "gram_identity_err",
        residual: gram_err,
        tolerance: 1e-10,
    });

    // Pointwise incompressibility, scaled by the gradient magnitude.
    let mut div_err: f64 = 0.0;
    for j in 0..basis.len() {
        let f = basis.mode_field(j);
        let scale = f.d1u1.amax().max(f.d2u2.amax()).max(1.0);
        for r in 0..f.u1.len() {
            div_err = div_err.max((f.d1u1[r] + f.d2u2[r]).abs() / scale);
        }
    }
    rows.push(OracleRow {
        name: "grid_divergence_err",
        residual: div_err,
        tolerance: 1e-8,
    });

    // Linear flow: time-averaged enstrophy approaches B/(2 nu) for any
    // amplitude profile.
    let flat = NoiseSpec::from_amplitudes(vec![0.3; basis.len()])?;
    let mut lin = cfg.sim_config();
    lin.linear_only = true;
    lin.horizon = 400.0;
    lin.initial = crate::dynamics::InitialCondition::Zero;
    let mut stream = RandomStream::new(1234, 0);
    let traj = simulate(
        &SpectralState::zero(basis.len()),
        &lin,
        &basis,
        &flat,
        &mut stream,
        &RecordSpec::default(),
    )?;
    let target = flat.aggregate / (2.0 * cfg.viscosity);
    rows.push(OracleRow {
        name: "ou_time_average_rel_err",
        residual: (traj.trace.xi()? - target).abs() / target,
        tolerance: 0.1,
    });

    // Energy-balance residual is first order in dt: on a shared noise path
    // (coarse increments are sums of fine pairs) halving dt must shrink it
    // by at least 0.6x. The window is long enough that the O(dt) bias, which
    // grows linearly in T, dominates the O(sqrt(dt)) noise floor.
    let (coarse, fine) = residual_refinement_pair(
        &basis,
        &flat,
        cfg.viscosity,
        0.01,
        400.0,
        4321,
        true,
    )?;
    rows.push(OracleRow {
        name: "residual_halving_ratio",
        residual: fine / coarse,
        tolerance: 0.6,
    });

    println!("# config {}", cfg.hash());
    println!("{:<28} {:>14} {:>12} {:>6}", "oracle", "residual", "tol", "pass");
    let mut all_pass = true;
    for row in &rows {
        let pass = row.residual <= row.tolerance;
        all_pass &= pass;
        println!(
            "{:<28} {:>14.3e} {:>12.1e} {:>6}",
            row.name, row.residual, row.tolerance, pass
        );
    }
    Ok(all_pass)
}

fn cmd_report(args: &CommonArgs) -> Result<bool> {
    let cfg = load_config(args)?;
    let mut text = String::new();
    let _ = writeln!(text, "# config {}", cfg.hash());
    let mut found = 0usize;
    for name in [
        "consistency.txt",
        "normality.txt",
        "consistency.csv",
        "normality.csv",
        "supermartingale.csv",
        "qv_lln.csv",
        "timeseries.csv",
    ] {
        let path = cfg.output_dir.join(name);
        if !path.exists() {
            continue;
        }
        found += 1;
        let contents = std::fs::read_to_string(&path)?;
        if name.ends_with(".txt") {
            let _ = writeln!(text, "\n## {name}");
            let _ = write!(text, "{contents}");
        } else {
            let _ = writeln!(text, "\n## {name}");
            let _ = writeln!(text, "rows = {}", contents.lines().count().saturating_sub(2));
            for line in contents.lines().take(2) {
                let _ = writeln!(text, "{line}");
            }
        }
    }
    if found == 0 {
        return Err(Error::InsufficientData(format!(
            "no artifacts found in {}",
            cfg.output_dir.display()
        )));
    }
    std::fs::write(cfg.output_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(true)
}

/// Write the quadratic-variation LLN table for a single long run; used by
/// the estimate path when unit records were collected.
pub fn write_qv_table(
    units: &[crate::dynamics::UnitRecord],
    hash: &str,
    dir: &Path,
) -> Result<()> {
    let rows = quadratic_variation_lln(units);
    std::fs::write(dir.join("qv_lln.csv"), qv_lln_csv(&rows, hash))?;
    Ok(())
}
