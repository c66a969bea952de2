//! Time integration of the projected stochastic Navier-Stokes system
//! du = (-nu L u - B(u)) dt + d zeta in Galerkin coordinates.
//!
//! The stiff linear part is treated exactly by an exponential integrator,
//! the nonlinearity explicitly at the left endpoint, and the noise increment
//! enters with the decay factor:
//!
//!   u_j <- e^{-nu a_j dt} u_j + phi_j(dt) N_j(u) + e^{-nu a_j dt} dzeta_j,
//!   phi_j(dt) = (1 - e^{-nu a_j dt}) / (nu a_j).
//!
//! With the nonlinearity switched off this reproduces the exact
//! Ornstein-Uhlenbeck drift, which the oracle tests rely on.

use crate::error::{Error, Result};
use crate::estimator::EstimatorTrace;
use crate::noise::{sample_increment, NoiseSpec, RandomStream};
use crate::stokes::StokesBasis;
use std::fmt::Write as _;
use std::path::Path;

/// Any coefficient beyond this magnitude aborts the trajectory.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Galerkin coordinates of the velocity field at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub t: f64,
    pub coefficients: Vec<f64>,
}

impl SpectralState {
    pub fn zero(j: usize) -> Self {
        Self {
            t: 0.0,
            coefficients: vec![0.0; j],
        }
    }

    /// ||u||^2 = sum u_j^2.
    pub fn energy(&self) -> f64 {
        self.coefficients.iter().map(|u| u * u).sum()
    }
}

/// Initial condition of a run.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Zero,
    Explicit(Vec<f64>),
    /// Coefficients taken from a stored checkpoint, standing in for a
    /// near-stationary initial measure.
    Checkpoint(std::path::PathBuf),
}

/// Integration parameters for a single trajectory.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub viscosity: f64,
    pub dt: f64,
    pub horizon: f64,
    pub linear_only: bool,
    pub initial: InitialCondition,
    pub output_stride: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.viscosity > 0.0) {
            problems.push(format!("viscosity must be positive, got {}", self.viscosity));
        }
        if !(self.dt > 0.0) {
            problems.push(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon >= 0.0) {
            problems.push(format!("horizon must be non-negative, got {}", self.horizon));
        }
        if self.output_stride == 0 {
            problems.push("output stride must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Precomputed Galerkin form of the advective term.
///
/// tensor[i][j][l] = -((e_j . grad) e_l, e_i), assembled once from the
/// quadrature-grid evaluations, so each step costs one J^2-fold contraction
/// instead of a full grid reconstruction. The grid margin N1 >= 3K and the
/// full-accuracy wall quadrature make the projection alias-free, which is
/// what keeps (B(u), u) = 0 at the discrete level.
pub struct NonlinearOp {
    j: usize,
    tensor: Vec<f64>,
}

impl NonlinearOp {
    pub fn new(basis: &StokesBasis) -> Self {
        let jm = basis.len();
        let mut tensor = vec![0.0; jm * jm * jm];
        for l in 0..jm {
            let fl = basis.mode_field(l);
            for jj in 0..jm {
                let fj = basis.mode_field(jj);
                let n = fj.u1.len();
                let mut adv1 = nalgebra::DVector::zeros(n);
                let mut adv2 = nalgebra::DVector::zeros(n);
                for r in 0..n {
                    adv1[r] = fj.u1[r] * fl.d1u1[r] + fj.u2[r] * fl.d2u1[r];
                    adv2[r] = fj.u1[r] * fl.d1u2[r] + fj.u2[r] * fl.d2u2[r];
                }
                let proj = basis.project(&adv1, &adv2);
                for i in 0..jm {
                    tensor[(i * jm + jj) * jm + l] = -proj[i];
                }
            }
        }
        Self { j: jm, tensor }
    }

    /// out_i = sum_{j,l} tensor[i][j][l] u_j u_l.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let jm = self.j;
        debug_assert_eq!(u.len(), jm);
        for i in 0..jm {
            let base = i * jm * jm;
            let mut acc = 0.0;
            for jj in 0..jm {
                let row = base + jj * jm;
                let uj = u[jj];
                if uj == 0.0 {
                    continue;
                }
                let mut inner = 0.0;
                for l in 0..jm {
                    inner += self.tensor[row + l] * u[l];
                }
                acc += uj * inner;
            }
            out[i] = acc;
        }
    }
}

/// Coefficients of -B(u) by direct pseudospectral evaluation: reconstruct u
/// and grad u on the quadrature grid, form (u . grad) u pointwise, project
/// onto each mode, negate. This is the reference route; `NonlinearOp` is its
/// precomputed equivalent.
pub fn nonlinear_tendency(state: &SpectralState, basis: &StokesBasis) -> Result<Vec<f64>> {
    let f = basis.pointwise_field(&state.coefficients)?;
    let n = f.u1.len();
    let mut adv1 = nalgebra::DVector::zeros(n);
    let mut adv2 = nalgebra::DVector::zeros(n);
    for r in 0..n {
        adv1[r] = f.u1[r] * f.d1u1[r] + f.u2[r] * f.d2u1[r];
        adv2[r] = f.u1[r] * f.d1u2[r] + f.u2[r] * f.d2u2[r];
        if !adv1[r].is_finite() || !adv2[r].is_finite() {
            return Err(Error::Divergence {
                t: state.t,
                max_abs: f.u1.amax().max(f.u2.amax()),
            });
        }
    }
    let proj = basis.project(&adv1, &adv2);
    Ok(proj.iter().map(|v| -v).collect())
}

/// (energy, enstrophy) = (||u||^2, ||grad u||^2) via the spectral identities
/// sum u_j^2 and sum alpha_j u_j^2.
pub fn observables(state: &SpectralState, basis: &StokesBasis) -> (f64, f64) {
    let mut energy = 0.0;
    let mut enstrophy = 0.0;
    for (j, &u) in state.coefficients.iter().enumerate() {
        energy += u * u;
        enstrophy += basis.modes[j].alpha * u * u;
    }
    (energy, enstrophy)
}

/// One-step integrator with per-mode exponential factors cached for the
/// nominal dt.
pub struct Integrator {
    pub nu: f64,
    pub dt: f64,
    pub linear_only: bool,
    alphas: Vec<f64>,
    decay: Vec<f64>,
    phi: Vec<f64>,
    nonlinear: Option<NonlinearOp>,
}

impl Integrator {
    pub fn new(basis: &StokesBasis, config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let alphas = basis.alphas();
        let (decay, phi) = exp_factors(&alphas, config.viscosity, config.dt);
        let nonlinear = if config.linear_only {
            None
        } else {
            Some(NonlinearOp::new(basis))
        };
        Ok(Self {
            nu: config.viscosity,
            dt: config.dt,
            linear_only: config.linear_only,
            alphas,
            decay,
            phi,
            nonlinear,
        })
    }

    /// Advance one step of the nominal dt.
    pub fn step(&self, state: &SpectralState, increment: &[f64]) -> Result<SpectralState> {
        self.step_with(state, increment, self.dt, &self.decay, &self.phi)
    }

    /// Advance one step of arbitrary length h (used for the shortened final
    /// step when dt does not divide the horizon, and for dt > T).
    pub fn step_with_dt(&self, state: &SpectralState, increment: &[f64], h: f64) -> Result<SpectralState> {
        let (decay, phi) = exp_factors(&self.alphas, self.nu, h);
        self.step_with(state, increment, h, &decay, &phi)
    }

    fn step_with(
        &self,
        state: &SpectralState,
        increment: &[f64],
        h: f64,
        decay: &[f64],
        phi: &[f64],
    ) -> Result<SpectralState> {
        let jm = state.coefficients.len();
        if increment.len() != jm {
            return Err(Error::Dimension {
                expected: jm,
                got: increment.len(),
            });
        }
        let mut tendency = vec![0.0; jm];
        if let Some(nl) = &self.nonlinear {
            nl.apply(&state.coefficients, &mut tendency);
        }
        let mut next = vec![0.0; jm];
        let mut max_abs: f64 = 0.0;
        for j in 0..jm {
            let v = decay[j] * state.coefficients[j] + phi[j] * tendency[j] + decay[j] * increment[j];
            max_abs = max_abs.max(v.abs());
            next[j] = v;
        }
        let t = state.t + h;
        if !max_abs.is_finite() || max_abs > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { t, max_abs });
        }
        Ok(SpectralState {
            t,
            coefficients: next,
        })
    }
}

fn exp_factors(alphas: &[f64], nu: f64, h: f64) -> (Vec<f64>, Vec<f64>) {
    let mut decay = Vec::with_capacity(alphas.len());
    let mut phi = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let lambda = nu * a;
        decay.push((-lambda * h).exp());
        phi.push(-(-lambda * h).exp_m1() / lambda);
    }
    (decay, phi)
}

/// One row of the emitted time series.
#[derive(Debug, Clone)]
pub struct SampleRow {
    pub t: f64,
    pub energy: f64,
    pub enstrophy: f64,
    pub xi: f64,
    pub nu_hat: f64,
    pub m: f64,
}

/// Estimator and bound statistics captured at a requested probe time.
#[derive(Debug, Clone)]
pub struct ProbeStat {
    pub t: f64,
    pub nu_hat: f64,
    pub xi: f64,
    pub m: f64,
    pub energy: f64,
    /// Running sup over s <= t of ||u(s)||^2 - ||u_0||^2 - B s.
    pub sup_excess: f64,
    /// Running sup over s <= t of |M_s|.
    pub sup_abs_m: f64,
}

/// Martingale statistics at integer times, used by the quadratic-variation
/// and increment-moment diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct UnitRecord {
    pub k: u64,
    pub m: f64,
    pub qv: f64,
}

/// What a simulation should record beyond the final trace.
#[derive(Debug, Clone, Default)]
pub struct RecordSpec {
    /// Probe times (increasing) at which ProbeStats are captured.
    pub probe_times: Vec<f64>,
    /// Record (M, <M>) at every integer time.
    pub unit_records: bool,
    /// Emit SampleRows every `sample_stride` steps (0 = only t=0 and t=T).
    pub sample_stride: usize,
}

/// Full outcome of one trajectory.
pub struct Trajectory {
    pub samples: Vec<SampleRow>,
    pub probes: Vec<ProbeStat>,
    pub units: Vec<UnitRecord>,
    pub trace: EstimatorTrace,
    pub final_state: SpectralState,
    pub sup_excess: f64,
    pub sup_abs_m: f64,
    /// Number of integration steps taken (noise draws consumed = steps * J).
    pub steps: u64,
}

/// Integrate one trajectory. Deterministic given (u0, config, spec, stream).
pub fn simulate(
    u0: &SpectralState,
    config: &SimConfig,
    basis: &StokesBasis,
    spec: &NoiseSpec,
    stream: &mut RandomStream,
    record: &RecordSpec,
) -> Result<Trajectory> {
    let integrator = Integrator::new(basis, config)?;
    simulate_with(u0, config, basis, spec, stream, record, &integrator)
}

/// Continue a checkpointed trajectory until the configured horizon (measured
/// from the original start). The caller must position `stream` exactly where
/// the original run left off; `skip_draws` does that from the stored step
/// count.
pub fn simulate_resumed(
    ck: &Checkpoint,
    config: &SimConfig,
    basis: &StokesBasis,
    spec: &NoiseSpec,
    stream: &mut RandomStream,
    record: &RecordSpec,
) -> Result<Trajectory> {
    let integrator = Integrator::new(basis, config)?;
    simulate_core(
        &ck.state,
        config,
        basis,
        spec,
        stream,
        record,
        &integrator,
        Some(ck),
    )
}

/// Advance `stream` past the draws a run of `steps` steps on `j` modes has
/// consumed, reproducing the per-step call pattern exactly.
pub fn skip_draws(stream: &mut RandomStream, steps: u64, j: usize) {
    let mut scratch = vec![0.0; j];
    for _ in 0..steps {
        stream.standard_normals(&mut scratch);
    }
}

/// Same as `simulate`, reusing a prebuilt integrator (ensembles share the
/// nonlinear tensor across runs).
pub fn simulate_with(
    u0: &SpectralState,
    config: &SimConfig,
    basis: &StokesBasis,
    spec: &NoiseSpec,
    stream: &mut RandomStream,
    record: &RecordSpec,
    integrator: &Integrator,
) -> Result<Trajectory> {
    simulate_core(u0, config, basis, spec, stream, record, integrator, None)
}

#[allow(clippy::too_many_arguments)]
fn simulate_core(
    u0: &SpectralState,
    config: &SimConfig,
    basis: &StokesBasis,
    spec: &NoiseSpec,
    stream: &mut RandomStream,
    record: &RecordSpec,
    integrator: &Integrator,
    resume: Option<&Checkpoint>,
) -> Result<Trajectory> {
    config.validate()?;
    let jm = basis.len();
    if u0.coefficients.len() != jm || spec.len() != jm {
        return Err(Error::Dimension {
            expected: jm,
            got: u0.coefficients.len().min(spec.len()),
        });
    }
    let horizon = config.horizon;
    let dt = config.dt;
    let alphas = basis.alphas();

    let mut state = u0.clone();
    let mut trace = EstimatorTrace::new(&alphas, spec, &state);
    // On resume the trajectory's clock runs from the original start, so the
    // accumulators and the time origin come from the checkpoint.
    let origin = if let Some(ck) = resume {
        trace.q = ck.q;
        trace.m = ck.m;
        trace.qv = ck.qv;
        trace.initial_energy = ck.initial_energy;
        0.0
    } else {
        u0.t
    };
    let mut samples = Vec::new();
    let mut probes = Vec::new();
    let mut units = Vec::new();
    let mut sup_excess: f64 = 0.0;
    let mut sup_abs_m: f64 = 0.0;
    let mut next_probe = 0usize;
    let mut next_unit: u64 = (state.t - origin).floor() as u64 + 1;
    let mut increment = vec![0.0; jm];
    let tol = 1e-9 * dt.max(1.0);

    let push_sample = |samples: &mut Vec<SampleRow>, state: &SpectralState, trace: &EstimatorTrace, basis: &StokesBasis| {
        let (energy, enstrophy) = observables(state, basis);
        samples.push(SampleRow {
            t: state.t,
            energy,
            enstrophy,
            xi: trace.xi().unwrap_or(f64::NAN),
            nu_hat: trace.nu_hat().unwrap_or(f64::NAN),
            m: trace.m,
        });
    };

    push_sample(&mut samples, &state, &trace, basis);

    let mut step_index: u64 = resume.map(|ck| ck.steps).unwrap_or(0);
    loop {
        let remaining = horizon - (state.t - origin);
        if remaining <= tol {
            break;
        }
        // Treat a remainder within rounding of dt as a full step so the cached
        // exponential factors are used and resumed runs replay bit-exactly.
        let h = if remaining < dt - tol { remaining } else { dt };
        sample_increment(spec, h, stream, &mut increment);
        let next = if h == dt {
            integrator.step(&state, &increment)?
        } else {
            integrator.step_with_dt(&state, &increment, h)?
        };
        trace.accumulate(&state, &increment, h, &next)?;
        state = next;
        step_index += 1;

        let excess = trace.energy - trace.initial_energy - trace.aggregate * (state.t - origin);
        sup_excess = sup_excess.max(excess);
        sup_abs_m = sup_abs_m.max(trace.m.abs());

        if record.unit_records {
            while state.t - origin + tol >= next_unit as f64 {
                units.push(UnitRecord {
                    k: next_unit,
                    m: trace.m,
                    qv: trace.qv,
                });
                next_unit += 1;
                if next_unit as f64 > horizon + 1.0 {
                    break;
                }
            }
        }
        while next_probe < record.probe_times.len()
            && state.t - origin + tol >= record.probe_times[next_probe]
        {
            probes.push(ProbeStat {
                t: record.probe_times[next_probe],
                nu_hat: trace.nu_hat().unwrap_or(f64::NAN),
                xi: trace.xi().unwrap_or(f64::NAN),
                m: trace.m,
                energy: trace.energy,
                sup_excess,
                sup_abs_m,
            });
            next_probe += 1;
        }
        if record.sample_stride > 0 && step_index % record.sample_stride as u64 == 0 {
            push_sample(&mut samples, &state, &trace, basis);
        }
    }

    if record.sample_stride == 0 || samples.last().map(|s| s.t) != Some(state.t) {
        if state.t > u0.t {
            push_sample(&mut samples, &state, &trace, basis);
        }
    }

    Ok(Trajectory {
        samples,
        probes,
        units,
        trace,
        final_state: state,
        sup_excess,
        sup_abs_m,
        steps: step_index,
    })
}

/// Integrate the same noise path at step sizes dt and dt/2 (the coarse
/// increments are sums of consecutive fine pairs) and return the absolute
/// energy-balance residuals (|r_coarse|, |r_fine|). Isolates the
/// discretization error of the Ito identity from path-to-path variation.
pub fn residual_refinement_pair(
    basis: &StokesBasis,
    spec: &NoiseSpec,
    nu: f64,
    dt: f64,
    horizon: f64,
    seed: u64,
    linear_only: bool,
) -> Result<(f64, f64)> {
    let jm = basis.len();
    let steps = (horizon / dt).round() as usize;
    let mk = |step: f64| SimConfig {
        viscosity: nu,
        dt: step,
        horizon,
        linear_only,
        initial: InitialCondition::Zero,
        output_stride: 1,
    };
    let coarse_cfg = mk(dt);
    let fine_cfg = mk(dt / 2.0);
    let coarse_int = Integrator::new(basis, &coarse_cfg)?;
    let fine_int = Integrator::new(basis, &fine_cfg)?;
    let alphas = basis.alphas();

    let mut stream = RandomStream::new(seed, 0);
    let mut coarse = SpectralState::zero(jm);
    let mut fine = SpectralState::zero(jm);
    let mut coarse_trace = EstimatorTrace::new(&alphas, spec, &coarse);
    let mut fine_trace = EstimatorTrace::new(&alphas, spec, &fine);
    let mut inc1 = vec![0.0; jm];
    let mut inc2 = vec![0.0; jm];
    let mut sum = vec![0.0; jm];
    for _ in 0..steps {
        sample_increment(spec, dt / 2.0, &mut stream, &mut inc1);
        sample_increment(spec, dt / 2.0, &mut stream, &mut inc2);
        for j in 0..jm {
            sum[j] = inc1[j] + inc2[j];
        }
        let next = fine_int.step(&fine, &inc1)?;
        fine_trace.accumulate(&fine, &inc1, dt / 2.0, &next)?;
        fine = next;
        let next = fine_int.step(&fine, &inc2)?;
        fine_trace.accumulate(&fine, &inc2, dt / 2.0, &next)?;
        fine = next;
        let next = coarse_int.step(&coarse, &sum)?;
        coarse_trace.accumulate(&coarse, &sum, dt, &next)?;
        coarse = next;
    }
    Ok((
        coarse_trace.energy_residual(nu).abs(),
        fine_trace.energy_residual(nu).abs(),
    ))
}

/// Serialize the time series as CSV: t,energy,enstrophy,xi,nu_hat,M.
pub fn timeseries_csv(samples: &[SampleRow], config_hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# config {config_hash}");
    let _ = writeln!(s, "t,energy,enstrophy,xi,nu_hat,M");
    for row in samples {
        let _ = writeln!(
            s,
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            row.t, row.energy, row.enstrophy, row.xi, row.nu_hat, row.m
        );
    }
    s
}

const CHECKPOINT_MAGIC: &str = "viscosim checkpoint v1";

/// Write a resumable checkpoint stamped with the config hash.
pub fn write_checkpoint(
    path: &Path,
    config_hash: &str,
    state: &SpectralState,
    trace: &EstimatorTrace,
    steps: u64,
) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(s, "config {config_hash}");
    let _ = writeln!(s, "t {:.17e}", state.t);
    let _ = write!(s, "u");
    for c in &state.coefficients {
        let _ = write!(s, " {:.17e}", c);
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "trace q={:.17e} m={:.17e} qv={:.17e} e0={:.17e}",
        trace.q, trace.m, trace.qv, trace.initial_energy
    );
    let _ = writeln!(s, "steps {steps}");
    std::fs::write(path, s)?;
    Ok(())
}

/// Parsed checkpoint contents.
pub struct Checkpoint {
    pub config_hash: String,
    pub state: SpectralState,
    pub q: f64,
    pub m: f64,
    pub qv: f64,
    pub initial_energy: f64,
    pub steps: u64,
}

/// Read a checkpoint; if `expected_hash` is given, a mismatch is a hard error.
pub fn read_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let bad = |detail: &str| Error::Format {
        kind: "checkpoint",
        detail: detail.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing magic line"));
    }
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("config "))
        .ok_or_else(|| bad("missing config hash"))?
        .to_string();
    if let Some(expected) = expected_hash {
        if hash != expected {
            return Err(Error::HashMismatch {
                expected: hash,
                got: expected.to_string(),
            });
        }
    }
    let t: f64 = lines
        .next()
        .and_then(|l| l.strip_prefix("t "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing time"))?;
    let coeffs: Vec<f64> = lines
        .next()
        .and_then(|l| l.strip_prefix("u"))
        .ok_or_else(|| bad("missing coefficients"))?
        .split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|_| bad("non-numeric coefficient")))
        .collect::<Result<_>>()?;
    let trace_line = lines.next().ok_or_else(|| bad("missing trace line"))?;
    let mut q = None;
    let mut m = None;
    let mut qv = None;
    let mut e0 = None;
    for field in trace_line.strip_prefix("trace ").unwrap_or("").split_whitespace() {
        let (key, val) = field.split_once('=').ok_or_else(|| bad("malformed trace field"))?;
        let num: f64 = val.parse().map_err(|_| bad("non-numeric trace field"))?;
        match key {
            "q" => q = Some(num),
            "m" => m = Some(num),
            "qv" => qv = Some(num),
            "e0" => e0 = Some(num),
            _ => return Err(bad("unknown trace field")),
        }
    }
    let steps: u64 = lines
        .next()
        .and_then(|l| l.strip_prefix("steps "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing step count"))?;
    Ok(Checkpoint {
        config_hash: hash,
        state: SpectralState {
            t,
            coefficients: coeffs,
        },
        q: q.ok_or_else(|| bad("missing q"))?,
        m: m.ok_or_else(|| bad("missing m"))?,
        qv: qv.ok_or_else(|| bad("missing qv"))?,
        initial_energy: e0.ok_or_else(|| bad("missing e0"))?,
        steps,
    })
}
