//! Experiment configuration: a strict flat `section.key = value` text format
//! with `#` comments. Unknown keys and duplicates are fatal, every violation
//! is reported at once, and the canonical serialization (sorted keys) is
//! hashed so each output file can be traced back to the exact configuration
//! that produced it.

use crate::dynamics::{InitialCondition, SimConfig};
use crate::error::{Error, Result};
use crate::noise::NoiseRule;
use crate::stokes::ChannelGeometry;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::PathBuf;

/// Which sigma the normality KS test is run against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KsSigmaSource {
    /// sigma_nu = 2 nu sigma_M / B with sigma_M from the long-run estimate.
    Derived,
    /// Sample standard deviation of the transformed ensemble.
    Empirical,
}

/// Fully validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    // geometry
    pub period: f64,
    pub fourier_cutoff: usize,
    pub wall_order: usize,
    pub basis_size: usize,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    // noise
    pub noise_rule: NoiseRule,
    // dynamics
    pub viscosity: f64,
    pub dt: f64,
    pub horizon: f64,
    pub linear_only: bool,
    pub initial: InitialCondition,
    pub output_stride: usize,
    // ensemble
    pub runs: usize,
    pub seed: u64,
    pub checkpoints: Vec<f64>,
    // analysis
    pub rho_grid: Vec<f64>,
    pub kappa_nu: f64,
    pub burn_in: f64,
    pub ks_sigma: KsSigmaSource,
    // output
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            period: 2.0 * std::f64::consts::PI,
            fourier_cutoff: 1,
            wall_order: 24,
            basis_size: 6,
            n1: None,
            n2: None,
            noise_rule: NoiseRule::PowerLaw { c: 1.0, r: 1.0 },
            viscosity: 0.5,
            dt: 0.005,
            horizon: 100.0,
            linear_only: false,
            initial: InitialCondition::Zero,
            output_stride: 100,
            runs: 64,
            seed: 1,
            checkpoints: vec![10.0, 30.0, 100.0],
            rho_grid: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            kappa_nu: 0.1,
            burn_in: 0.2,
            ks_sigma: KsSigmaSource::Derived,
            output_dir: PathBuf::from("out"),
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "geometry.period",
    "geometry.fourier_cutoff",
    "geometry.wall_order",
    "geometry.basis_size",
    "geometry.n1",
    "geometry.n2",
    "noise.rule",
    "noise.amplitudes",
    "noise.c",
    "noise.r",
    "noise.amplitude",
    "noise.count",
    "dynamics.viscosity",
    "dynamics.dt",
    "dynamics.horizon",
    "dynamics.linear_only",
    "dynamics.initial",
    "dynamics.output_stride",
    "ensemble.runs",
    "ensemble.seed",
    "ensemble.checkpoints",
    "analysis.rho_grid",
    "analysis.kappa_nu",
    "analysis.burn_in",
    "analysis.ks_sigma",
    "output.dir",
];

struct RawConfig {
    entries: Vec<(String, String, usize)>, // key, value, line number
}

impl RawConfig {
    fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }
}

fn parse_raw(text: &str) -> Result<RawConfig> {
    let mut entries: Vec<(String, String, usize)> = Vec::new();
    let mut problems = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(p) => &raw_line[..p],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            problems.push(format!("line {line_no}: expected `key = value`, got `{line}`"));
            continue;
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            problems.push(format!("line {line_no}: unknown key `{key}`"));
            continue;
        }
        if let Some((_, _, prev)) = entries.iter().find(|(k, _, _)| *k == key) {
            problems.push(format!(
                "line {line_no}: duplicate key `{key}` (first set on line {prev})"
            ));
            continue;
        }
        entries.push((key, value, line_no));
    }
    if problems.is_empty() {
        Ok(RawConfig { entries })
    } else {
        Err(Error::Config(problems))
    }
}

fn parse_list(value: &str) -> std::result::Result<Vec<f64>, String> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{}` is not a number", v.trim()))
        })
        .collect()
}

/// Parse and validate a config text, filling defaults for absent keys.
/// All violations are reported together, not just the first.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw = parse_raw(text)?;
    let mut cfg = ExperimentConfig::default();
    let mut problems: Vec<String> = Vec::new();

    macro_rules! set {
        ($key:expr, $target:expr, $ty:ty) => {
            if let Some(v) = raw.get($key) {
                match v.parse::<$ty>() {
                    Ok(parsed) => $target = parsed,
                    Err(_) => problems.push(format!("{}: cannot parse `{}`", $key, v)),
                }
            }
        };
    }

    set!("geometry.period", cfg.period, f64);
    set!("geometry.fourier_cutoff", cfg.fourier_cutoff, usize);
    set!("geometry.wall_order", cfg.wall_order, usize);
    set!("geometry.basis_size", cfg.basis_size, usize);
    if let Some(v) = raw.get("geometry.n1") {
        match v.parse::<usize>() {
            Ok(n) => cfg.n1 = Some(n),
            Err(_) => problems.push(format!("geometry.n1: cannot parse `{v}`")),
        }
    }
    if let Some(v) = raw.get("geometry.n2") {
        match v.parse::<usize>() {
            Ok(n) => cfg.n2 = Some(n),
            Err(_) => problems.push(format!("geometry.n2: cannot parse `{v}`")),
        }
    }

    set!("dynamics.viscosity", cfg.viscosity, f64);
    set!("dynamics.dt", cfg.dt, f64);
    set!("dynamics.horizon", cfg.horizon, f64);
    set!("dynamics.linear_only", cfg.linear_only, bool);
    set!("dynamics.output_stride", cfg.output_stride, usize);
    set!("ensemble.runs", cfg.runs, usize);
    set!("ensemble.seed", cfg.seed, u64);
    set!("analysis.kappa_nu", cfg.kappa_nu, f64);
    set!("analysis.burn_in", cfg.burn_in, f64);

    if let Some(v) = raw.get("dynamics.initial") {
        if v == "zero" {
            cfg.initial = InitialCondition::Zero;
        } else if let Some(path) = v.strip_prefix("checkpoint:") {
            cfg.initial = InitialCondition::Checkpoint(PathBuf::from(path.trim()));
        } else if let Some(list) = v.strip_prefix("explicit:") {
            match parse_list(list) {
                Ok(c) => cfg.initial = InitialCondition::Explicit(c),
                Err(e) => problems.push(format!("dynamics.initial: {e}")),
            }
        } else {
            problems.push(format!(
                "dynamics.initial: `{v}` is not zero, checkpoint:<path>, or explicit:<list>"
            ));
        }
    }

    if let Some(v) = raw.get("ensemble.checkpoints") {
        match parse_list(v) {
            Ok(times) => {
                if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|&t| t <= 0.0) {
                    problems
                        .push("ensemble.checkpoints: times must be positive and increasing".into());
                } else {
                    cfg.checkpoints = times;
                }
            }
            Err(e) => problems.push(format!("ensemble.checkpoints: {e}")),
        }
    }

    if let Some(v) = raw.get("analysis.rho_grid") {
        match parse_list(v) {
            Ok(grid) => cfg.rho_grid = grid,
            Err(e) => problems.push(format!("analysis.rho_grid: {e}")),
        }
    }

    if let Some(v) = raw.get("analysis.ks_sigma") {
        match v {
            "derived" => cfg.ks_sigma = KsSigmaSource::Derived,
            "empirical" => cfg.ks_sigma = KsSigmaSource::Empirical,
            _ => problems.push(format!(
                "analysis.ks_sigma: `{v}` is not derived or empirical"
            )),
        }
    }

    if let Some(v) = raw.get("output.dir") {
        cfg.output_dir = PathBuf::from(v);
    }

    // Noise block: the rule decides which parameter keys apply.
    let rule_name = raw.get("noise.rule").unwrap_or("power_law");
    match rule_name {
        "explicit" => match raw.get("noise.amplitudes") {
            Some(v) => match parse_list(v) {
                Ok(list) => cfg.noise_rule = NoiseRule::Explicit(list),
                Err(e) => problems.push(format!("noise.amplitudes: {e}")),
            },
            None => problems.push("noise.rule = explicit requires noise.amplitudes".into()),
        },
        "power_law" => {
            let mut c = 1.0;
            let mut r = 1.0;
            set!("noise.c", c, f64);
            set!("noise.r", r, f64);
            cfg.noise_rule = NoiseRule::PowerLaw { c, r };
        }
        "flat" => {
            let mut amplitude = 1.0;
            let mut count = cfg.basis_size;
            set!("noise.amplitude", amplitude, f64);
            set!("noise.count", count, usize);
            cfg.noise_rule = NoiseRule::Flat { amplitude, count };
        }
        other => problems.push(format!(
            "noise.rule: `{other}` is not explicit, power_law, or flat"
        )),
    }

    // Cross-field validity.
    if let NoiseRule::Explicit(list) = &cfg.noise_rule {
        if list.len() != cfg.basis_size {
            problems.push(format!(
                "noise.amplitudes has {} entries but geometry.basis_size = {}",
                list.len(),
                cfg.basis_size
            ));
        }
        if list.iter().map(|b| b * b).sum::<f64>() <= 0.0 {
            problems.push(
                "noise.amplitudes: aggregate intensity B = sum b_j^2 must be strictly positive"
                    .into(),
            );
        }
    }
    if let InitialCondition::Explicit(c) = &cfg.initial {
        if c.len() != cfg.basis_size {
            problems.push(format!(
                "dynamics.initial has {} coefficients but geometry.basis_size = {}",
                c.len(),
                cfg.basis_size
            ));
        }
    }
    if !(cfg.viscosity > 0.0) {
        problems.push(format!(
            "dynamics.viscosity must be positive, got {}",
            cfg.viscosity
        ));
    }
    if !(cfg.dt > 0.0) {
        problems.push(format!("dynamics.dt must be positive, got {}", cfg.dt));
    }
    if !(cfg.horizon >= 0.0) {
        problems.push(format!(
            "dynamics.horizon must be non-negative, got {}",
            cfg.horizon
        ));
    }
    if cfg.runs == 0 {
        problems.push("ensemble.runs must be >= 1".into());
    }
    if !(cfg.burn_in >= 0.0 && cfg.burn_in < 1.0) {
        problems.push(format!(
            "analysis.burn_in must be in [0, 1), got {}",
            cfg.burn_in
        ));
    }
    if let Err(e) = cfg.geometry() {
        problems.push(e.to_string());
    }

    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(problems))
    }
}

impl ExperimentConfig {
    pub fn geometry(&self) -> Result<ChannelGeometry> {
        match (self.n1, self.n2) {
            (Some(n1), Some(n2)) => ChannelGeometry::with_grid(
                self.period,
                self.fourier_cutoff,
                self.wall_order,
                self.basis_size,
                n1,
                n2,
            ),
            _ => ChannelGeometry::new(
                self.period,
                self.fourier_cutoff,
                self.wall_order,
                self.basis_size,
            ),
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            viscosity: self.viscosity,
            dt: self.dt,
            horizon: self.horizon,
            linear_only: self.linear_only,
            initial: self.initial.clone(),
            output_stride: self.output_stride,
        }
    }

    /// Canonical serialization: every key in sorted order with normalized
    /// value formatting, independent of the input layout.
    pub fn canonical(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("geometry.period".into(), fmt_f64(self.period)),
            (
                "geometry.fourier_cutoff".into(),
                self.fourier_cutoff.to_string(),
            ),
            ("geometry.wall_order".into(), self.wall_order.to_string()),
            ("geometry.basis_size".into(), self.basis_size.to_string()),
            (
                "geometry.n1".into(),
                self.n1.map(|n| n.to_string()).unwrap_or_else(|| "auto".into()),
            ),
            (
                "geometry.n2".into(),
                self.n2.map(|n| n.to_string()).unwrap_or_else(|| "auto".into()),
            ),
            ("dynamics.viscosity".into(), fmt_f64(self.viscosity)),
            ("dynamics.dt".into(), fmt_f64(self.dt)),
            ("dynamics.horizon".into(), fmt_f64(self.horizon)),
            ("dynamics.linear_only".into(), self.linear_only.to_string()),
            ("dynamics.initial".into(), fmt_initial(&self.initial)),
            (
                "dynamics.output_stride".into(),
                self.output_stride.to_string(),
            ),
            ("ensemble.runs".into(), self.runs.to_string()),
            ("ensemble.seed".into(), self.seed.to_string()),
            ("ensemble.checkpoints".into(), fmt_list(&self.checkpoints)),
            ("analysis.rho_grid".into(), fmt_list(&self.rho_grid)),
            ("analysis.kappa_nu".into(), fmt_f64(self.kappa_nu)),
            ("analysis.burn_in".into(), fmt_f64(self.burn_in)),
            (
                "analysis.ks_sigma".into(),
                match self.ks_sigma {
                    KsSigmaSource::Derived => "derived".into(),
                    KsSigmaSource::Empirical => "empirical".into(),
                },
            ),
            ("noise.rule".into(), fmt_noise(&self.noise_rule)),
            ("output.dir".into(), self.output_dir.display().to_string()),
        ];
        pairs.sort();
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 of the canonical form, truncated to 16 bytes.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex::encode(&digest[..16])
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

fn fmt_initial(init: &InitialCondition) -> String {
    match init {
        InitialCondition::Zero => "zero".into(),
        InitialCondition::Explicit(c) => format!("explicit:{}", fmt_list(c)),
        InitialCondition::Checkpoint(p) => format!("checkpoint:{}", p.display()),
    }
}

fn fmt_noise(rule: &NoiseRule) -> String {
    match rule {
        NoiseRule::Explicit(list) => format!("explicit:{}", fmt_list(list)),
        NoiseRule::PowerLaw { c, r } => format!("power_law:c={},r={}", fmt_f64(*c), fmt_f64(*r)),
        NoiseRule::Flat { amplitude, count } => {
            format!("flat:amplitude={},count={}", fmt_f64(*amplitude), count)
        }
    }
}
