//! Monte Carlo ensembles and the empirical checks built on them: the
//! consistency rate of nu_hat, asymptotic normality of the estimation
//! martingale, the energy supermartingale tail bound, quadratic-variation
//! laws of large numbers, and moment-growth diagnostics.

use crate::dynamics::{
    simulate_with, Integrator, ProbeStat, RecordSpec, SimConfig, SpectralState, Trajectory,
    UnitRecord,
};
use crate::error::{Error, Result};
use crate::noise::{NoiseSpec, RandomStream};
use crate::stokes::StokesBasis;
use rayon::prelude::*;
use std::fmt::Write as _;

/// Per-run outcome kept by an ensemble.
#[derive(Debug, Clone)]
pub struct RunRecord {
    /// Noise stream index of the run.
    pub stream: u64,
    /// One entry per checkpoint time, in order.
    pub probes: Vec<ProbeStat>,
    /// Martingale state at integer times (present when requested).
    pub units: Vec<UnitRecord>,
}

/// Rectangular ensemble: every surviving run has every checkpoint.
#[derive(Debug, Clone)]
pub struct EnsembleSummary {
    pub checkpoint_times: Vec<f64>,
    pub runs: Vec<RunRecord>,
    /// Number of runs launched (surviving runs = runs.len()).
    pub launched: usize,
    pub failed: usize,
    pub config_hash: String,
}

impl EnsembleSummary {
    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    /// Values of one probe field at checkpoint index `ci` across runs.
    pub fn column<F: Fn(&ProbeStat) -> f64>(&self, ci: usize, f: F) -> Vec<f64> {
        self.runs.iter().map(|r| f(&r.probes[ci])).collect()
    }
}

/// Scales of the two central limit theorems plus the KS verdict at time t.
#[derive(Debug, Clone)]
pub struct NormalityReport {
    pub sigma_m: f64,
    pub sigma_nu: f64,
    pub ks: f64,
    pub sample_count: usize,
    pub t: f64,
}

/// Run R independent trajectories on noise streams `base .. base+R`, sharing
/// one integrator. Reductions happen in run-index order, so the summary is
/// identical under any parallel schedule.
pub fn run_ensemble(
    config: &SimConfig,
    spec: &NoiseSpec,
    basis: &StokesBasis,
    r: usize,
    base_seed: u64,
    record: &RecordSpec,
    config_hash: &str,
) -> Result<EnsembleSummary> {
    if r == 0 {
        return Err(Error::InsufficientData("ensemble needs at least 1 run".into()));
    }
    let integrator = Integrator::new(basis, config)?;
    let u0 = initial_state(config, basis)?;
    let outcomes: Vec<(u64, std::result::Result<Trajectory, String>)> = (0..r as u64)
        .into_par_iter()
        .map(|run| {
            let mut stream = RandomStream::new(base_seed, run);
            let res = simulate_with(&u0, config, basis, spec, &mut stream, record, &integrator)
                .map_err(|e| e.to_string());
            (run, res)
        })
        .collect();

    let mut runs = Vec::with_capacity(r);
    let mut failed = 0usize;
    let mut first_failure = None;
    for (run, outcome) in outcomes {
        match outcome {
            Ok(traj) => runs.push(RunRecord {
                stream: run,
                probes: traj.probes,
                units: traj.units,
            }),
            Err(msg) => {
                failed += 1;
                if first_failure.is_none() {
                    first_failure = Some(format!("run {run}: {msg}"));
                }
            }
        }
    }
    if failed * 20 > r {
        return Err(Error::EnsembleFailure {
            failed,
            total: r,
            first: first_failure.unwrap_or_default(),
        });
    }
    Ok(EnsembleSummary {
        checkpoint_times: record.probe_times.clone(),
        runs,
        launched: r,
        failed,
        config_hash: config_hash.to_string(),
    })
}

fn initial_state(config: &SimConfig, basis: &StokesBasis) -> Result<SpectralState> {
    use crate::dynamics::InitialCondition::*;
    Ok(match &config.initial {
        Zero => SpectralState::zero(basis.len()),
        Explicit(c) => {
            if c.len() != basis.len() {
                return Err(Error::Dimension {
                    expected: basis.len(),
                    got: c.len(),
                });
            }
            SpectralState {
                t: 0.0,
                coefficients: c.clone(),
            }
        }
        Checkpoint(path) => {
            let ck = crate::dynamics::read_checkpoint(path, None)?;
            SpectralState {
                t: 0.0,
                coefficients: ck.state.coefficients,
            }
        }
    })
}

/// Result of the log-log rate fit for |nu_hat - nu|.
#[derive(Debug, Clone)]
pub struct ConsistencyFit {
    /// Fitted slope of log(median |nu_hat - nu|) against log t.
    pub slope: f64,
    /// (t, median absolute error) for every checkpoint, including burn-in.
    pub medians: Vec<(f64, f64)>,
    /// Checkpoint indices dropped because the median was exactly zero.
    pub dropped: Vec<usize>,
}

/// Median of a sample (averaging the middle pair for even counts).
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Ordinary least-squares slope of y against x.
fn ls_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx: f64 = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my: f64 = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in points {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Fit the decay rate of the estimation error across checkpoints.
///
/// The first 20% of checkpoints are discarded as burn-in; the slope is
/// fitted to log(median |nu_hat - nu|) vs log t over the rest. Checkpoints
/// whose median error is exactly zero are flagged and dropped.
pub fn consistency_rate(summary: &EnsembleSummary, nu: f64) -> Result<ConsistencyFit> {
    let nt = summary.checkpoint_times.len();
    if nt < 4 {
        return Err(Error::InsufficientData(format!(
            "rate fit needs >= 4 checkpoints, got {nt}"
        )));
    }
    let span = summary.checkpoint_times[nt - 1] / summary.checkpoint_times[0];
    if !(span >= 10.0) {
        return Err(Error::InsufficientData(format!(
            "checkpoints must span at least a decade in t (span {span:.2})"
        )));
    }
    let mut medians = Vec::with_capacity(nt);
    for (ci, &t) in summary.checkpoint_times.iter().enumerate() {
        let mut errs = summary.column(ci, |p| (p.nu_hat - nu).abs());
        medians.push((t, median(&mut errs)));
    }
    let burn = nt / 5;
    let mut pts = Vec::new();
    let mut dropped = Vec::new();
    for (ci, &(t, m)) in medians.iter().enumerate().skip(burn) {
        if m == 0.0 {
            dropped.push(ci);
        } else {
            pts.push((t.ln(), m.ln()));
        }
    }
    if pts.len() < 2 {
        return Err(Error::InsufficientData(
            "fewer than 2 usable checkpoints after burn-in".into(),
        ));
    }
    Ok(ConsistencyFit {
        slope: ls_slope(&pts),
        medians,
        dropped,
    })
}

/// Ergodic estimate of the martingale CLT scale sigma_M^2 from one long run.
///
/// Uses the realized quadratic variation at integer times: the average of
/// its increments past the burn-in fraction converges to the stationary
/// expectation of sum_j b_j^2 u_j^2.
pub fn estimate_sigma_m_sq(units: &[UnitRecord], burn_in: f64) -> Result<f64> {
    if units.is_empty() {
        return Err(Error::InsufficientData("no unit-time records".into()));
    }
    let n = units.last().unwrap().k as f64;
    let nb = (n * burn_in).floor();
    if n - nb < 100.0 {
        return Err(Error::InsufficientData(format!(
            "post-burn-in window is {:.0} time units, need >= 100",
            n - nb
        )));
    }
    let qv_b = if nb < 1.0 {
        0.0
    } else {
        units
            .iter()
            .find(|u| u.k as f64 >= nb)
            .map(|u| u.qv)
            .unwrap_or(0.0)
    };
    let qv_n = units.last().unwrap().qv;
    Ok((qv_n - qv_b) / (n - nb))
}

/// sigma_nu = 2 nu sigma_M / B: the CLT scale of sqrt(t)(nu_hat - nu)
/// obtained by transporting the scale of sqrt(t)(xi_t - B/(2 nu)) through
/// the reciprocal map. This composition is derived, not quoted.
pub fn sigma_nu_from_sigma_m(sigma_m: f64, nu: f64, aggregate: f64) -> Result<f64> {
    for (name, v) in [("sigma_M", sigma_m), ("nu", nu), ("B", aggregate)] {
        if !(v > 0.0) {
            return Err(Error::NonPositive(format!("{name} = {v}")));
        }
    }
    Ok(2.0 * nu * sigma_m / aggregate)
}

/// CDF of a centered normal with standard deviation sigma.
pub fn normal_cdf(z: f64, sigma: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / (sigma * std::f64::consts::SQRT_2)))
}

/// Kolmogorov-Smirnov distance between the empirical law of `samples` and
/// the centered normal of standard deviation sigma, taking both one-sided
/// gaps at each sorted sample point.
pub fn ks_distance(samples: &[f64], sigma: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "KS distance needs >= 2 samples, got {}",
            samples.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::NonPositive(format!("sigma = {sigma}")));
    }
    let mut z: Vec<f64> = samples.to_vec();
    z.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = z.len() as f64;
    let mut sup: f64 = 0.0;
    for (i, &zi) in z.iter().enumerate() {
        let phi = normal_cdf(zi, sigma);
        sup = sup
            .max((i as f64 + 1.0) / n - phi)
            .max(phi - i as f64 / n);
    }
    Ok(sup)
}

/// Normalized realized quadratic variation n -> <M>_n / n from the integer-
/// time records of one run. Approaches sigma_M^2 as n grows.
pub fn quadratic_variation_lln(units: &[UnitRecord]) -> Vec<(u64, f64)> {
    units.iter().map(|u| (u.k, u.qv / u.k as f64)).collect()
}

/// gamma = alpha_1 / (4 max_j b_j^2), the exponent of the energy
/// supermartingale tail bound.
pub fn supermartingale_gamma(basis: &StokesBasis, spec: &NoiseSpec) -> f64 {
    basis.alpha_min() / (4.0 * spec.max_sq_amplitude())
}

/// Empirical tail of sup_{s<=T} (||u(s)||^2 - ||u_0||^2 - B s) against the
/// theoretical bound e^{-gamma nu rho}, per grid point.
pub fn supermartingale_exceedance(
    summary: &EnsembleSummary,
    rho_grid: &[f64],
    gamma: f64,
    nu: f64,
) -> Vec<(f64, f64, f64)> {
    let sups: Vec<f64> = summary
        .runs
        .iter()
        .map(|r| r.probes.last().map(|p| p.sup_excess).unwrap_or(0.0))
        .collect();
    let n = sups.len().max(1) as f64;
    rho_grid
        .iter()
        .map(|&rho| {
            let count = sups.iter().filter(|&&s| s > rho).count() as f64;
            (rho, count / n, (-gamma * nu * rho).exp())
        })
        .collect()
}

/// Growth diagnostics of the estimation martingale.
#[derive(Debug, Clone)]
pub struct MomentScaling {
    /// Fitted exponent of log E sup_{s<=t} |M_s|^{2p} vs log t; NaN when the
    /// zero flag is set.
    pub exponent: f64,
    /// True when every recorded sup is zero (noise-free runs).
    pub all_zero: bool,
    /// Per-checkpoint (t, ensemble mean of sup|M|^{2p}).
    pub moments: Vec<(f64, f64)>,
    /// Largest per-interval mean of exp(theta |M_k - M_{k-1}|) across k,
    /// theta = 0.1 / sigma_M; NaN when unit records are absent.
    pub max_exp_moment: f64,
}

/// Fit the time exponent of the 2p-th sup-moment of M and probe the
/// exponential integrability of its unit-time increments.
pub fn moment_scaling(
    summary: &EnsembleSummary,
    p: u32,
    sigma_m: f64,
) -> Result<MomentScaling> {
    if !(p == 1 || p == 2) {
        return Err(Error::InsufficientData(format!("p must be 1 or 2, got {p}")));
    }
    let nt = summary.checkpoint_times.len();
    if nt < 4 {
        return Err(Error::InsufficientData(format!(
            "moment fit needs >= 4 checkpoints, got {nt}"
        )));
    }
    let mut moments = Vec::with_capacity(nt);
    let mut all_zero = true;
    for (ci, &t) in summary.checkpoint_times.iter().enumerate() {
        let col = summary.column(ci, |pr| pr.sup_abs_m);
        let mean: f64 =
            col.iter().map(|s| s.powi(2 * p as i32)).sum::<f64>() / col.len() as f64;
        if mean > 0.0 {
            all_zero = false;
        }
        moments.push((t, mean));
    }
    let exponent = if all_zero {
        f64::NAN
    } else {
        let pts: Vec<(f64, f64)> = moments
            .iter()
            .filter(|&&(_, m)| m > 0.0)
            .map(|&(t, m)| (t.ln(), m.ln()))
            .collect();
        if pts.len() < 2 {
            return Err(Error::InsufficientData(
                "fewer than 2 nonzero moment checkpoints".into(),
            ));
        }
        ls_slope(&pts)
    };

    // Unit-increment exponential moment: mean over runs of
    // exp(theta |M_k - M_{k-1}|) for each k, report the worst k.
    let mut max_exp_moment = f64::NAN;
    let n_units = summary.runs.iter().map(|r| r.units.len()).min().unwrap_or(0);
    if n_units > 0 && sigma_m > 0.0 {
        let theta = 0.1 / sigma_m;
        let mut worst: f64 = 0.0;
        for k in 0..n_units {
            let mut acc = 0.0;
            for run in &summary.runs {
                let prev = if k == 0 { 0.0 } else { run.units[k - 1].m };
                acc += (theta * (run.units[k].m - prev).abs()).exp();
            }
            worst = worst.max(acc / summary.runs.len() as f64);
        }
        max_exp_moment = worst;
    }

    Ok(MomentScaling {
        exponent,
        all_zero,
        moments,
        max_exp_moment,
    })
}

/// c sqrt(t) (1/eta - 1/a) applied elementwise: maps samples of a process
/// converging to `a` at rate 1/sqrt(t) into the frame where the reciprocal's
/// limit law has scale c sigma / a^2.
pub fn delta_method_transform(samples: &[f64], a: f64, c: f64, t: f64) -> Result<Vec<f64>> {
    if a == 0.0 {
        return Err(Error::NonPositive("reference value a must be nonzero".into()));
    }
    if !(c > 0.0) {
        return Err(Error::NonPositive(format!("scale c = {c}")));
    }
    if !(t >= 1.0) {
        return Err(Error::NonPositive(format!("time t = {t} (need t >= 1)")));
    }
    let zeros: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 0.0)
        .map(|(i, _)| i)
        .collect();
    if !zeros.is_empty() {
        return Err(Error::ZeroSamples(zeros));
    }
    let sqrt_t = t.sqrt();
    Ok(samples
        .iter()
        .map(|&eta| c * sqrt_t * (1.0 / eta - 1.0 / a))
        .collect())
}

/// t -> sample mean of exp(kappa_nu ||u(t)||^2) across the ensemble, with an
/// overflow guard on the exponent.
pub fn exponential_moment_curve(
    summary: &EnsembleSummary,
    kappa_nu: f64,
) -> Result<Vec<(f64, f64)>> {
    let mut curve = Vec::with_capacity(summary.checkpoint_times.len());
    for (ci, &t) in summary.checkpoint_times.iter().enumerate() {
        let mut acc = 0.0;
        for run in &summary.runs {
            let x = kappa_nu * run.probes[ci].energy;
            if x > 50.0 {
                return Err(Error::KappaTooLarge(x));
            }
            acc += x.exp();
        }
        curve.push((t, acc / summary.runs.len() as f64));
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// CSV reports
// ---------------------------------------------------------------------------

pub fn consistency_csv(fit: &ConsistencyFit, config_hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# config {config_hash}");
    let _ = writeln!(s, "# slope {:.6}", fit.slope);
    let _ = writeln!(s, "t,median_abs_err,fit");
    // The fitted line through the mean of the log points.
    let pts: Vec<(f64, f64)> = fit
        .medians
        .iter()
        .filter(|&&(_, m)| m > 0.0)
        .map(|&(t, m)| (t.ln(), m.ln()))
        .collect();
    let (mx, my) = if pts.is_empty() {
        (0.0, 0.0)
    } else {
        let n = pts.len() as f64;
        (
            pts.iter().map(|p| p.0).sum::<f64>() / n,
            pts.iter().map(|p| p.1).sum::<f64>() / n,
        )
    };
    for &(t, m) in &fit.medians {
        let fitted = (my + fit.slope * (t.ln() - mx)).exp();
        let _ = writeln!(s, "{:.17e},{:.17e},{:.17e}", t, m, fitted);
    }
    s
}

pub fn normality_csv(samples: &[f64], sigma: f64, config_hash: &str) -> String {
    let mut z: Vec<f64> = samples.to_vec();
    z.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = z.len() as f64;
    let mut s = String::new();
    let _ = writeln!(s, "# config {config_hash}");
    let _ = writeln!(s, "z,F_emp,Phi_sigma");
    for (i, &zi) in z.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:.17e},{:.17e},{:.17e}",
            zi,
            (i as f64 + 1.0) / n,
            normal_cdf(zi, sigma)
        );
    }
    s
}

pub fn supermartingale_csv(rows: &[(f64, f64, f64)], config_hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# config {config_hash}");
    let _ = writeln!(s, "rho,empirical,bound");
    for &(rho, emp, bound) in rows {
        let _ = writeln!(s, "{:.17e},{:.17e},{:.17e}", rho, emp, bound);
    }
    s
}

pub fn qv_lln_csv(rows: &[(u64, f64)], config_hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# config {config_hash}");
    let _ = writeln!(s, "n,value");
    for &(n, v) in rows {
        let _ = writeln!(s, "{},{:.17e}", n, v);
    }
    s
}
