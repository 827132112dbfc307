//! Random single-cell scenarios and Monte Carlo averaging.
//!
//! A realization draws user positions uniformly in distance, Rayleigh
//! amplitudes with mean `d^-2`, and binary spreading codes with entries
//! `+-1/sqrt(N)`. The same realization seeds both the benchmark equilibrium
//! and the adaptive run so the two can be compared symbol by symbol.
//! Realization `i` draws from ChaCha stream `i` of the master seed, which
//! makes results independent of how many threads run them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{self, AdaptiveConfig, AdaptiveUserState, RealizationTrace};
use crate::efficiency::{self, EfficiencyParams};
use crate::equilibrium::{self, EquilibriumConfig, EquilibriumResult};
use crate::error::{domain, Error, Result};
use crate::model::NetworkState;

/// A user joining mid-run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSpec {
    /// First symbol (1-based) the user transmits.
    pub at: usize,
    /// Fixed distance in meters; drawn from the cell range when absent.
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub processing_gain: usize,
    pub initial_users: usize,
    pub arrivals: Vec<ArrivalSpec>,
    /// `[d_min, d_max]` in meters.
    pub distance_range: (f64, f64),
    /// `N0` in W/Hz.
    pub noise_psd: f64,
    /// Power cap in dB-Watt.
    pub p_max_db: f64,
    /// Starting power as a fraction of the cap.
    pub initial_power_fraction: f64,
    pub seed: u64,
    pub realizations: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            processing_gain: 15,
            initial_users: 8,
            arrivals: Vec::new(),
            distance_range: (10.0, 500.0),
            noise_psd: 1e-5,
            p_max_db: 25.0,
            initial_power_fraction: 0.01,
            seed: 1,
            realizations: 50,
        }
    }
}

impl ScenarioSpec {
    pub fn p_max(&self) -> f64 {
        efficiency::from_db(self.p_max_db)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.distance_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("invalid distance range [{lo}, {hi}]")));
        }
        if self.processing_gain == 0 {
            return Err(Error::Config("processing gain must be positive".into()));
        }
        if self.realizations == 0 {
            return Err(Error::Config("at least one realization is required".into()));
        }
        if !(self.noise_psd > 0.0 && self.noise_psd.is_finite()) {
            return Err(Error::Config("noise PSD must be positive".into()));
        }
        if !self.p_max_db.is_finite() {
            return Err(Error::Config("power cap must be finite".into()));
        }
        if !(self.initial_power_fraction > 0.0 && self.initial_power_fraction <= 1.0) {
            return Err(Error::Config("initial power fraction must lie in (0, 1]".into()));
        }
        if self.arrivals.windows(2).any(|w| w[1].at <= w[0].at) {
            return Err(Error::Config("arrival epochs must be strictly increasing".into()));
        }
        if self.arrivals.iter().any(|a| a.at == 0) {
            return Err(Error::Config("arrival epochs are 1-based".into()));
        }
        if let Some(d) = self.arrivals.iter().filter_map(|a| a.distance).find(|&d| !(d > 0.0)) {
            return Err(Error::Config(format!("arrival distance must be positive, got {d}")));
        }
        Ok(())
    }
}

/// A user that joins after the start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivingUser {
    pub at: usize,
    pub code: DVector<f64>,
    pub gain: f64,
    pub power: f64,
    pub p_max: f64,
}

/// Geometry, fading, and starting codes of one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub initial: NetworkState,
    pub arrivals: Vec<ArrivingUser>,
}

impl Realization {
    /// State with every user that is active at symbol `n`.
    pub fn active_at(&self, n: usize) -> NetworkState {
        let joined: Vec<&ArrivingUser> = self.arrivals.iter().filter(|a| a.at <= n).collect();
        let base = &self.initial;
        let k = base.users() + joined.len();
        let mut codes = DMatrix::zeros(base.processing_gain(), k);
        codes.columns_mut(0, base.users()).copy_from(&base.codes);
        let mut powers = base.powers.clone().resize_vertically(k, 0.0);
        let mut gains = base.gains.clone().resize_vertically(k, 0.0);
        let mut p_max = base.p_max.clone().resize_vertically(k, 0.0);
        for (j, a) in joined.iter().enumerate() {
            let i = base.users() + j;
            codes.set_column(i, &a.code);
            powers[i] = a.power;
            gains[i] = a.gain;
            p_max[i] = a.p_max;
        }
        NetworkState {
            codes,
            powers,
            gains,
            p_max,
            noise_psd: base.noise_psd,
        }
    }

    /// Symbols at which the active set changes, including symbol 1.
    pub fn epochs(&self) -> Vec<usize> {
        let mut e = vec![1];
        e.extend(self.arrivals.iter().map(|a| a.at).filter(|&a| a > 1));
        e.dedup();
        e
    }
}

/// Rayleigh amplitude with mean `distance^-2`.
pub fn sample_channel<R: Rng + ?Sized>(distance: f64, rng: &mut R) -> Result<f64> {
    if !(distance > 0.0 && distance.is_finite()) {
        return Err(domain(format!("distance must be positive, got {distance}")));
    }
    let mean = distance.powi(-2);
    let sigma = mean * (2.0 / std::f64::consts::PI).sqrt();
    // inverse CDF on (0, 1]; u = 1 maps to h = 0 which has probability zero
    let u: f64 = 1.0 - rng.random::<f64>();
    let h = sigma * (-2.0 * u.ln()).sqrt();
    Ok(if h > 0.0 { h } else { f64::MIN_POSITIVE })
}

/// `N x K` matrix of i.i.d. equiprobable `+-1/sqrt(N)` entries.
pub fn sample_codes<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    let a = 1.0 / (n as f64).sqrt();
    DMatrix::from_fn(n, k, |_, _| if rng.random::<bool>() { a } else { -a })
}

fn sample_distance<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> f64 {
    let (lo, hi) = spec.distance_range;
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Initial users of a realization; powers start at a fixed fraction of the cap.
pub fn build_state<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<NetworkState> {
    spec.validate()?;
    let k = spec.initial_users;
    let gains = (0..k)
        .map(|_| sample_channel(sample_distance(spec, rng), rng))
        .collect::<Result<Vec<_>>>()?;
    let codes = sample_codes(spec.processing_gain, k, rng);
    let p_max = spec.p_max();
    NetworkState::new(
        codes,
        DVector::from_element(k, spec.initial_power_fraction * p_max),
        DVector::from_vec(gains),
        DVector::from_element(k, p_max),
        spec.noise_psd,
    )
}

/// Initial users followed by every scheduled arrival, drawn in that order.
pub fn build_realization<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<Realization> {
    let initial = build_state(spec, rng)?;
    let p_max = spec.p_max();
    let arrivals = spec
        .arrivals
        .iter()
        .map(|a| {
            let d = a.distance.unwrap_or_else(|| sample_distance(spec, rng));
            let gain = sample_channel(d, rng)?;
            let code = sample_codes(spec.processing_gain, 1, rng).column(0).into_owned();
            Ok(ArrivingUser {
                at: a.at,
                code,
                gain,
                power: spec.initial_power_fraction * p_max,
                p_max,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Realization { initial, arrivals })
}

/// Generator for realization `index` of a master seed.
pub fn realization_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Users active in an equilibrium, averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UserAverages {
    pub utility: f64,
    /// Linear mean.
    pub sinr: f64,
    /// Linear mean in W.
    pub power: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl UserAverages {
    pub fn of(result: &EquilibriumResult) -> Self {
        Self {
            utility: mean(&result.utility),
            sinr: mean(&result.sinr),
            power: mean(result.state.powers.as_slice()),
        }
    }
}

/// Equilibria of one realization, one per active set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRealization {
    pub index: usize,
    /// `(first symbol, equilibrium)` per active-set epoch.
    pub segments: Vec<(usize, EquilibriumResult)>,
}

impl BenchmarkRealization {
    pub fn converged(&self) -> bool {
        self.segments.iter().all(|(_, r)| r.converged)
    }

    /// Equilibrium governing symbol `n`.
    pub fn at(&self, n: usize) -> Option<&EquilibriumResult> {
        self.segments.iter().rev().find(|(start, _)| *start <= n).map(|(_, r)| r)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub realizations: Vec<BenchmarkRealization>,
    /// Indices of realizations with a non-converged equilibrium.
    pub non_converged: Vec<usize>,
    /// Average over converged realizations of the first-epoch equilibrium.
    pub aggregate: UserAverages,
}

fn solve_realization(
    index: usize,
    realization: &Realization,
    eq_cfg: &EquilibriumConfig,
    params: &EfficiencyParams,
) -> Result<BenchmarkRealization> {
    let segments = realization
        .epochs()
        .into_iter()
        .map(|start| {
            let state = realization.active_at(start);
            equilibrium::solve_nash_equilibrium(&state, eq_cfg, params).map(|r| (start, r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkRealization { index, segments })
}

fn summarize(realizations: Vec<BenchmarkRealization>) -> BenchmarkSummary {
    let non_converged: Vec<usize> = realizations
        .iter()
        .filter(|r| !r.converged())
        .map(|r| r.index)
        .collect();
    let firsts: Vec<UserAverages> = realizations
        .iter()
        .filter(|r| r.converged())
        .map(|r| UserAverages::of(&r.segments[0].1))
        .collect();
    let aggregate = UserAverages {
        utility: mean(&firsts.iter().map(|a| a.utility).collect::<Vec<_>>()),
        sinr: mean(&firsts.iter().map(|a| a.sinr).collect::<Vec<_>>()),
        power: mean(&firsts.iter().map(|a| a.power).collect::<Vec<_>>()),
    };
    BenchmarkSummary {
        realizations,
        non_converged,
        aggregate,
    }
}

/// Solves the equilibrium on every realization of `spec`.
pub fn run_benchmark(
    spec: &ScenarioSpec,
    eq_cfg: &EquilibriumConfig,
    params: &EfficiencyParams,
) -> Result<BenchmarkSummary> {
    spec.validate()?;
    let realizations = (0..spec.realizations)
        .into_par_iter()
        .map(|i| {
            let real = build_realization(spec, &mut realization_rng(spec.seed, i))?;
            solve_realization(i, &real, eq_cfg, params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(realizations))
}

/// Per-symbol averages. Each series has one entry per symbol; symbol `n`
/// sits at index `n - 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Active users at each symbol (same in every realization).
    pub active_users: Vec<usize>,
    /// bit/Joule.
    pub avg_utility: Vec<f64>,
    /// Linear SINR.
    pub avg_sinr: Vec<f64>,
    /// W.
    pub avg_power: Vec<f64>,
    pub benchmark_utility: Vec<f64>,
    pub benchmark_sinr: Vec<f64>,
    pub benchmark_power: Vec<f64>,
    /// Realizations that entered the adaptive averages.
    pub realizations_used: usize,
    /// Realizations that entered the benchmark averages.
    pub benchmark_realizations_used: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.active_users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active_users.is_empty()
    }
}

/// Result of a paired adaptive and benchmark Monte Carlo run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloOutcome {
    pub trajectory: Trajectory,
    pub benchmark: BenchmarkSummary,
    /// Per-realization adaptive traces, kept when requested.
    pub traces: Option<Vec<RealizationTrace>>,
    /// Realizations aborted by a non-finite adaptive state.
    pub diverged: Vec<usize>,
}

/// Options for [`run_adaptive_mc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloOptions {
    pub keep_traces: bool,
    pub fault_inject: bool,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            keep_traces: false,
            fault_inject: false,
        }
    }
}

struct RealizationOutput {
    trace: Option<RealizationTrace>,
    bench: BenchmarkRealization,
}

/// Runs the adaptive algorithm and the benchmark on the same realizations
/// and averages pointwise, first over active users, then over realizations.
pub fn run_adaptive_mc(
    spec: &ScenarioSpec,
    cfg: &AdaptiveConfig,
    eq_cfg: &EquilibriumConfig,
    horizon: usize,
    opts: MonteCarloOptions,
) -> Result<MonteCarloOutcome> {
    spec.validate()?;
    cfg.validate()?;
    let estimator: fn(&AdaptiveUserState, &DVector<f64>, f64) -> Result<f64> = if opts.fault_inject {
        adaptive::stochastic_interference_faulty
    } else {
        adaptive::stochastic_interference
    };
    let outputs = (0..spec.realizations)
        .into_par_iter()
        .map(|i| -> Result<RealizationOutput> {
            let mut rng = realization_rng(spec.seed, i);
            let real = build_realization(spec, &mut rng)?;
            let bench = solve_realization(i, &real, eq_cfg, &cfg.params)?;
            let trace = match adaptive::adaptive_run_with(&real, cfg, horizon, &mut rng, estimator) {
                Ok(t) => Some(t),
                Err(Error::NonFinite { symbol, what }) => {
                    log::warn!("realization {i} diverged at symbol {symbol}: {what}");
                    None
                }
                Err(e) => return Err(e),
            };
            Ok(RealizationOutput { trace, bench })
        })
        .collect::<Result<Vec<_>>>()?;

    let diverged: Vec<usize> = outputs
        .iter()
        .enumerate()
        .filter(|(_, o)| o.trace.is_none())
        .map(|(i, _)| i)
        .collect();
    let trajectory = aggregate(&outputs, horizon, spec);
    let mut traces = Vec::new();
    let mut benches = Vec::with_capacity(outputs.len());
    for o in outputs {
        if let Some(t) = o.trace {
            traces.push(t);
        }
        benches.push(o.bench);
    }
    Ok(MonteCarloOutcome {
        trajectory,
        benchmark: summarize(benches),
        traces: opts.keep_traces.then_some(traces),
        diverged,
    })
}

fn scheduled_users(spec: &ScenarioSpec, n: usize) -> usize {
    spec.initial_users + spec.arrivals.iter().filter(|a| a.at <= n).count()
}

fn aggregate(outputs: &[RealizationOutput], horizon: usize, spec: &ScenarioSpec) -> Trajectory {
    let mut t = Trajectory {
        active_users: (1..=horizon).map(|n| scheduled_users(spec, n)).collect(),
        avg_utility: vec![0.0; horizon],
        avg_sinr: vec![0.0; horizon],
        avg_power: vec![0.0; horizon],
        benchmark_utility: vec![0.0; horizon],
        benchmark_sinr: vec![0.0; horizon],
        benchmark_power: vec![0.0; horizon],
        realizations_used: 0,
        benchmark_realizations_used: 0,
    };
    for o in outputs {
        if let Some(trace) = &o.trace {
            t.realizations_used += 1;
            for n in 0..horizon {
                t.avg_utility[n] += mean(&trace.utility[n]);
                t.avg_sinr[n] += mean(&trace.sinr[n]);
                t.avg_power[n] += mean(&trace.power[n]);
            }
        }
        if o.bench.converged() {
            t.benchmark_realizations_used += 1;
            for n in 0..horizon {
                if let Some(eq) = o.bench.at(n + 1) {
                    let a = UserAverages::of(eq);
                    t.benchmark_utility[n] += a.utility;
                    t.benchmark_sinr[n] += a.sinr;
                    t.benchmark_power[n] += a.power;
                }
            }
        }
    }
    let scale = |v: &mut Vec<f64>, count: usize| {
        if count > 0 {
            let c = count as f64;
            v.iter_mut().for_each(|x| *x /= c);
        } else {
            v.iter_mut().for_each(|x| *x = f64::NAN);
        }
    };
    let (ra, rb) = (t.realizations_used, t.benchmark_realizations_used);
    scale(&mut t.avg_utility, ra);
    scale(&mut t.avg_sinr, ra);
    scale(&mut t.avg_power, ra);
    scale(&mut t.benchmark_utility, rb);
    scale(&mut t.benchmark_sinr, rb);
    scale(&mut t.benchmark_power, rb);
    t
}
