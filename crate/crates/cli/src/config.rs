use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use clg_core::adaptive::AdaptiveConfig;
use clg_core::efficiency::EfficiencyParams;
use clg_core::equilibrium::EquilibriumConfig;
use clg_core::scenario::{ArrivalSpec, ScenarioSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fixed user population; adaptive run against the equilibrium.
    Static,
    /// Users joining mid-run at the --arrivals epochs.
    Dynamic,
    /// Equilibrium only, one row per realization.
    Benchmark,
    /// Print the target SINR for --packet-size.
    Gamma,
    /// Run the invariant checks.
    Selftest,
}

const AFTER_HELP: &str = "\
Units: SINR columns are 10 log10(gamma) in dB; power columns are dB-Watt
(10 log10 of the power in W); utility is bit/Joule.

Outputs (run modes): <out>/trajectory.csv or <out>/benchmark.csv, plus
<out>/manifest.json. Passing the manifest back with --config reproduces
the CSV byte for byte.

Config files are JSON objects whose keys are the long flag names
(\"packet-size\": 120, \"arrivals\": [1000, 1700], ...). Flags given on
the command line override the file.

Set CLG_FAULT_INJECT=1 to make selftest use a deliberately biased
interference estimator; the unbiasedness check should then fail.";

/// Energy-efficient power, code, and receiver allocation for a CDMA uplink.
#[derive(Debug, Parser)]
#[command(name = "clg", version = crate::VERSION, after_help = AFTER_HELP)]
pub struct Cli {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Initial number of users K.
    #[arg(long)]
    pub users: Option<usize>,
    /// Processing gain N.
    #[arg(long = "gain", value_name = "N")]
    pub processing_gain: Option<usize>,
    /// Packet length M in symbols.
    #[arg(long)]
    pub packet_size: Option<u32>,
    /// Training symbols T per user.
    #[arg(long = "train", value_name = "T")]
    pub training_len: Option<usize>,
    /// LMS step size.
    #[arg(long)]
    pub rho: Option<f64>,
    /// RLS forgetting factor.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// RLS initialization R(0) = epsilon I.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Symbols per realization.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub realizations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated 1-based arrival epochs (dynamic mode).
    #[arg(long, value_delimiter = ',')]
    pub arrivals: Option<Vec<usize>>,
    /// Output directory.
    #[arg(long = "out", value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Fewer instances per selftest check.
    #[arg(long)]
    pub quick: bool,
    /// Cap in dB-Watt.
    #[arg(long)]
    pub p_max_db: Option<f64>,
    /// Noise PSD N0 in W/Hz.
    #[arg(long)]
    pub noise_psd: Option<f64>,
    /// Bit rate R in bit/s.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Information symbols L per packet.
    #[arg(long)]
    pub info_symbols: Option<u32>,
    /// Largest tolerated fraction of failed realizations before a nonzero exit.
    #[arg(long)]
    pub max_failure_fraction: Option<f64>,
    /// JSON config or a manifest from an earlier run.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

/// Every knob of a run with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub users: usize,
    #[serde(rename = "gain")]
    pub processing_gain: usize,
    pub packet_size: u32,
    pub info_symbols: u32,
    pub rate: f64,
    #[serde(rename = "train")]
    pub training_len: usize,
    pub rho: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub horizon: usize,
    pub realizations: usize,
    pub seed: u64,
    pub arrivals: Vec<usize>,
    #[serde(rename = "out")]
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub quick: bool,
    pub p_max_db: f64,
    pub noise_psd: f64,
    pub max_failure_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ScenarioSpec::default();
        let params = EfficiencyParams::default();
        Self {
            mode: Mode::Static,
            users: spec.initial_users,
            processing_gain: spec.processing_gain,
            packet_size: params.packet_len,
            info_symbols: params.info_symbols,
            rate: params.rate,
            training_len: 80,
            rho: 0.01,
            lambda: 0.995,
            epsilon: 100.0,
            horizon: 2000,
            realizations: spec.realizations,
            seed: spec.seed,
            arrivals: Vec::new(),
            out_dir: PathBuf::from("out"),
            jobs: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            quick: false,
            p_max_db: spec.p_max_db,
            noise_psd: spec.noise_psd,
            max_failure_fraction: 0.05,
        }
    }
}

/// Same keys as [`RunConfig`], all optional.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct PartialConfig {
    mode: Option<Mode>,
    users: Option<usize>,
    #[serde(rename = "gain")]
    processing_gain: Option<usize>,
    packet_size: Option<u32>,
    info_symbols: Option<u32>,
    rate: Option<f64>,
    #[serde(rename = "train")]
    training_len: Option<usize>,
    rho: Option<f64>,
    lambda: Option<f64>,
    epsilon: Option<f64>,
    horizon: Option<usize>,
    realizations: Option<usize>,
    seed: Option<u64>,
    arrivals: Option<Vec<usize>>,
    #[serde(rename = "out")]
    out_dir: Option<PathBuf>,
    jobs: Option<usize>,
    quick: Option<bool>,
    p_max_db: Option<f64>,
    noise_psd: Option<f64>,
    max_failure_fraction: Option<f64>,
}

fn read_file(path: &Path) -> Result<PartialConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    // a manifest nests the resolved config under "config"
    let flat = match value.get("config") {
        Some(inner) if value.get("version").is_some() => inner.clone(),
        _ => value,
    };
    serde_json::from_value(flat).with_context(|| format!("invalid config in {}", path.display()))
}

macro_rules! layer {
    ($cfg:ident, $src:expr, $($field:ident),+) => {
        $( if let Some(v) = $src.$field { $cfg.$field = v; } )+
    };
}

impl RunConfig {
    /// Defaults, then the config file, then explicit flags.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &cli.config {
            let file = read_file(path)?;
            layer!(
                cfg, file, mode, users, processing_gain, packet_size, info_symbols, rate, training_len, rho, lambda,
                epsilon, horizon, realizations, seed, arrivals, out_dir, jobs, quick, p_max_db, noise_psd,
                max_failure_fraction
            );
        }
        let flags = PartialConfig {
            mode: cli.mode,
            users: cli.users,
            processing_gain: cli.processing_gain,
            packet_size: cli.packet_size,
            info_symbols: cli.info_symbols,
            rate: cli.rate,
            training_len: cli.training_len,
            rho: cli.rho,
            lambda: cli.lambda,
            epsilon: cli.epsilon,
            horizon: cli.horizon,
            realizations: cli.realizations,
            seed: cli.seed,
            arrivals: cli.arrivals.clone(),
            out_dir: cli.out_dir.clone(),
            jobs: cli.jobs,
            quick: cli.quick.then_some(true),
            p_max_db: cli.p_max_db,
            noise_psd: cli.noise_psd,
            max_failure_fraction: cli.max_failure_fraction,
        };
        layer!(
            cfg, flags, mode, users, processing_gain, packet_size, info_symbols, rate, training_len, rho, lambda,
            epsilon, horizon, realizations, seed, arrivals, out_dir, jobs, quick, p_max_db, noise_psd,
            max_failure_fraction
        );
        if cfg.mode == Mode::Dynamic && cfg.arrivals.is_empty() {
            cfg.arrivals = vec![1000, 1700];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            bail!("--max-failure-fraction must lie in [0, 1]");
        }
        if matches!(self.mode, Mode::Static | Mode::Benchmark) && !self.arrivals.is_empty() {
            bail!("--arrivals applies to dynamic mode only");
        }
        if matches!(self.mode, Mode::Static | Mode::Dynamic) && self.horizon == 0 {
            bail!("--horizon must be positive");
        }
        if self.arrivals.iter().any(|&a| a > self.horizon) && self.mode == Mode::Dynamic {
            bail!("arrival epoch beyond the horizon of {} symbols", self.horizon);
        }
        Ok(())
    }

    pub fn params(&self) -> Result<EfficiencyParams> {
        Ok(EfficiencyParams::new(self.packet_size, self.info_symbols, self.rate)?)
    }

    pub fn scenario(&self) -> Result<ScenarioSpec> {
        let spec = ScenarioSpec {
            processing_gain: self.processing_gain,
            initial_users: self.users,
            arrivals: self
                .arrivals
                .iter()
                .map(|&at| ArrivalSpec { at, distance: None })
                .collect(),
            p_max_db: self.p_max_db,
            noise_psd: self.noise_psd,
            seed: self.seed,
            realizations: self.realizations,
            ..ScenarioSpec::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn adaptive(&self) -> Result<AdaptiveConfig> {
        let mut cfg = AdaptiveConfig::new(self.params()?)?;
        cfg.training_len = self.training_len;
        cfg.rho = self.rho;
        cfg.lambda = self.lambda;
        cfg.epsilon = self.epsilon;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn equilibrium(&self) -> Result<EquilibriumConfig> {
        let cfg = EquilibriumConfig::new(clg_core::solve_target_sinr(self.packet_size)?);
        cfg.validate()?;
        Ok(cfg)
    }
}
