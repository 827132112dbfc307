//! Invariant checks at reduced sizes, runnable from a release binary.
//!
//! Each check draws its own random instances from a fixed seed and reports
//! a pass/fail line. With `fault_inject` set, the stochastic interference
//! estimator is swapped for a deliberately wrong one; the unbiasedness
//! check must then fail.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptive::{self, AdaptiveConfig, AdaptiveUserState, RlsState};
use crate::efficiency::{self, EfficiencyParams};
use crate::equilibrium::{self, EquilibriumConfig};
use crate::model::{self, test_support, NetworkState, ReceiverBank};
use crate::scenario::{self, ArrivalSpec, MonteCarloOptions, ScenarioSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelftestOptions {
    /// Fewer random instances per check.
    pub quick: bool,
    /// Use the faulty interference estimator.
    pub fault_inject: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(&SelftestOptions) -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("efficiency.target_sinr", check_target_sinr),
    ("efficiency.derivative", check_derivative),
    ("model.mse_forms", check_mse_forms),
    ("equilibrium.mmse_identity", check_mmse_identity),
    ("equilibrium.tmse_monotone", check_tmse_monotone),
    ("equilibrium.yates_axioms", check_yates),
    ("equilibrium.power_fixed_point", check_power_fixed_point),
    ("adaptive.rls_inverse", check_rls_inverse),
    ("adaptive.code_update", check_code_update),
    ("adaptive.estimator_unbiased", check_unbiased),
    ("adaptive.power_bounds", check_power_bounds),
    ("scenario.determinism", check_determinism),
    ("scenario.averaging", check_averaging),
];

/// Runs every check in a fixed order.
pub fn run(opts: &SelftestOptions) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let t = Instant::now();
            let (passed, detail) = match check(opts) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

fn count(opts: &SelftestOptions, full: usize, quick: usize) -> usize {
    if opts.quick {
        quick
    } else {
        full
    }
}

fn e2s(e: crate::Error) -> String {
    e.to_string()
}

fn check_target_sinr(_: &SelftestOptions) -> Result<String, String> {
    let g = efficiency::solve_target_sinr(120).map_err(e2s)?;
    let db = efficiency::to_db(g);
    if (g - 6.689).abs() > 1e-3 || (db - 8.25).abs() > 0.01 {
        return Err(format!("gamma = {g}, {db} dB"));
    }
    if efficiency::solve_target_sinr(1).is_ok() {
        return Err("M = 1 accepted".into());
    }
    Ok(format!("{g:.6} = {db:.4} dB"))
}

fn check_derivative(_: &SelftestOptions) -> Result<String, String> {
    // relative 1e-6 where f' is sizable, absolute 1e-10 where the
    // difference quotient is dominated by cancellation
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    for &m in &[1u32, 3, 10, 120] {
        for i in 0..200 {
            let g = 0.1 + 19.9 * i as f64 / 199.0;
            let h = 1e-5 * g.max(1.0);
            let fd = (efficiency::efficiency(g + h, m).map_err(e2s)? - efficiency::efficiency(g - h, m).map_err(e2s)?)
                / (2.0 * h);
            let an = efficiency::efficiency_derivative(g, m).map_err(e2s)?;
            if an > 1e-4 {
                worst_rel = worst_rel.max((fd / an - 1.0).abs());
            } else {
                worst_abs = worst_abs.max((fd - an).abs());
            }
        }
    }
    let detail = format!("relative {worst_rel:.2e}, absolute {worst_abs:.2e}");
    if worst_rel > 1e-6 || worst_abs > 1e-10 {
        return Err(detail);
    }
    Ok(detail)
}

fn random_shape(rng: &mut ChaCha8Rng, n_max: usize, k_max: usize) -> (usize, usize) {
    let n = rng.random_range(2..=n_max);
    let k = rng.random_range(1..=k_max.min(n));
    (n, k)
}

fn check_mse_forms(opts: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for i in 0..count(opts, 100, 20) {
        let (n, k) = random_shape(&mut rng, 8, 6);
        let st = test_support::random_state(n, k, 1000 + i as u64);
        for u in 0..k {
            let d = test_support::random_vector(n, &mut rng);
            let a = model::mse(&st, u, &d).map_err(e2s)?;
            let b = model::mse_split_form(&st, u, &d).map_err(e2s)?;
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    if worst > 1e-10 {
        return Err(format!("forms differ by {worst:.2e}"));
    }
    Ok(format!("max diff {worst:.2e}"))
}

/// Worst relative error of `gamma = (1 - mse) / mse` for the MMSE filter.
pub fn mmse_identity_error(instances: usize, seed: u64) -> crate::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (n, k) = random_shape(&mut rng, 8, 6);
        let st = test_support::random_state(n, k, seed.wrapping_mul(7919).wrapping_add(i as u64));
        for u in 0..k {
            let d = equilibrium::mmse_receiver(&st, u)?;
            let g = model::sinr(&st, u, &d)?;
            let e = model::mse(&st, u, &d)?;
            worst = worst.max(((1.0 - e) / e / g - 1.0).abs());
        }
    }
    Ok(worst)
}

fn check_mmse_identity(opts: &SelftestOptions) -> Result<String, String> {
    let worst = mmse_identity_error(count(opts, 100, 20), 202).map_err(e2s)?;
    if worst > 1e-10 {
        return Err(format!("relative error {worst:.2e}"));
    }
    Ok(format!("relative error {worst:.2e}"))
}

fn check_tmse_monotone(opts: &SelftestOptions) -> Result<String, String> {
    let spec = ScenarioSpec::default();
    let cfg = EquilibriumConfig::new(efficiency::solve_target_sinr(120).map_err(e2s)?);
    let mut worst = 0.0f64;
    for i in 0..count(opts, 20, 5) {
        let st = scenario::build_state(&spec, &mut scenario::realization_rng(303, i)).map_err(e2s)?;
        let out = equilibrium::code_receiver_fixed_point(&st, &ReceiverBank::matched(&st), &cfg).map_err(e2s)?;
        worst = worst.max(max_increase(&out.trace));
    }
    if worst > 1e-10 {
        return Err(format!("TMSE rose by {worst:.2e}"));
    }
    Ok(format!("largest rise {worst:.2e}"))
}

/// Largest step-to-step increase in a sequence.
pub fn max_increase(trace: &[f64]) -> f64 {
    trace.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

/// Checks positivity, monotonicity, and scalability of the interference map
/// on one instance; returns a description of the first violation.
pub fn yates_violation(st: &NetworkState, bank: &ReceiverBank, rng: &mut impl Rng) -> Option<String> {
    let gamma = 6.689;
    let k = st.users();
    let p = DVector::from_fn(k, |_, _| rng.random_range(0.1..5.0));
    let base = match equilibrium::interference_map(st, bank, gamma, &p) {
        Ok(v) => v,
        Err(e) => return Some(e.to_string()),
    };
    if base.iter().any(|&x| !(x > 0.0)) {
        return Some("non-positive entry".into());
    }
    let bigger = p.map(|x| x * rng.random_range(1.0..2.0));
    let up = equilibrium::interference_map(st, bank, gamma, &bigger).ok()?;
    if up.iter().zip(base.iter()).any(|(a, b)| a < b) {
        return Some("not monotone".into());
    }
    for alpha in [1.5, 3.0] {
        let scaled = equilibrium::interference_map(st, bank, gamma, &(&p * alpha)).ok()?;
        if scaled.iter().zip(base.iter()).any(|(s, b)| !(alpha * b > *s)) {
            return Some(format!("not scalable at alpha = {alpha}"));
        }
    }
    None
}

fn check_yates(opts: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let pairs = count(opts, 100, 20);
    for i in 0..pairs {
        let (n, k) = random_shape(&mut rng, 8, 6);
        let st = test_support::random_state(n, k, 4000 + i as u64);
        let bank = ReceiverBank {
            filters: DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0)),
        };
        if let Some(v) = yates_violation(&st, &bank, &mut rng) {
            return Err(format!("instance {i}: {v}"));
        }
    }
    Ok(format!("{pairs} pairs"))
}

fn check_power_fixed_point(opts: &SelftestOptions) -> Result<String, String> {
    let cfg = EquilibriumConfig::new(6.689);
    let mut worst = 0.0f64;
    for i in 0..count(opts, 20, 5) {
        let mut st = test_support::random_state(15, 14, 500 + i as u64);
        st.p_max.fill(1e6);
        let bank = ReceiverBank::matched(&st);
        let out = equilibrium::power_iteration(&st, &bank, &cfg).map_err(e2s)?;
        let mut at = st.clone();
        at.powers = out.powers.clone();
        for k in 0..14 {
            if !out.clamped[k] {
                let g = model::sinr(&at, k, &bank.filter(k)).map_err(e2s)?;
                worst = worst.max((g / 6.689 - 1.0).abs());
            }
        }
    }
    if worst > 1e-6 {
        return Err(format!("SINR off target by {worst:.2e}"));
    }
    Ok(format!("worst {worst:.2e}"))
}

/// Max-abs gap between the recursive inverse and a direct inversion of
/// `eps I + sum r r^T` after `steps` updates with `lambda = 1`.
pub fn rls_inverse_gap(n: usize, eps: f64, steps: usize, seed: u64) -> crate::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rls = RlsState::new(DVector::zeros(n), 1.0, eps)?;
    let mut corr = DMatrix::identity(n, n) * eps;
    for _ in 0..steps {
        let r = test_support::random_vector(n, &mut rng);
        corr.ger(1.0, &r, &r, 1.0);
        let b = if rng.random::<bool>() { 1 } else { -1 };
        rls.step(&r, Some(b))?;
    }
    let direct = corr
        .try_inverse()
        .ok_or(crate::Error::NotPositiveDefinite)?;
    Ok((&rls.inv_corr - direct).amax())
}

fn check_rls_inverse(_: &SelftestOptions) -> Result<String, String> {
    let gap = rls_inverse_gap(15, 1e3, 100, 505).map_err(e2s)?;
    if gap > 1e-8 {
        return Err(format!("max-abs gap {gap:.2e}"));
    }
    Ok(format!("max-abs gap {gap:.2e}"))
}

/// Worst max-abs gap between the numeric mu-solve and `d / ||d||`.
pub fn code_update_gap(instances: usize, seed: u64) -> crate::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(2..=16);
        let d = test_support::random_vector(n, &mut rng) * 10f64.powf(rng.random_range(-3.0..3.0));
        let p = 10f64.powf(rng.random_range(-4.0..2.5));
        let h = 10f64.powf(rng.random_range(-5.0..-1.0));
        let (s, _) = adaptive::code_update_mu_solve(&d, p, h)?;
        worst = worst.max((s - &d / d.norm()).amax());
    }
    Ok(worst)
}

fn check_code_update(opts: &SelftestOptions) -> Result<String, String> {
    let gap = code_update_gap(count(opts, 100, 20), 606).map_err(e2s)?;
    if gap > 1e-12 {
        return Err(format!("max-abs gap {gap:.2e}"));
    }
    Ok(format!("max-abs gap {gap:.2e}"))
}

/// Sample mean of the one-symbol interference estimate divided by the exact
/// interference-function entry, for every user of a frozen state.
///
/// Symbols are drawn in a balanced design: the users' bits cycle through
/// all `2^K` sign patterns (in a shuffled order per cycle) and each noise
/// vector is followed by its negation. Every symbol is still a valid draw
/// of the received signal; the design only removes the bit-pattern and
/// signal-noise cross terms from the sampling error.
pub fn estimator_mean_ratios(
    st: &NetworkState,
    bank: &ReceiverBank,
    gamma_bar: f64,
    draws: usize,
    fault_inject: bool,
    rng: &mut impl Rng,
) -> crate::Result<Vec<f64>> {
    use rand::seq::SliceRandom;
    use rand_distr::StandardNormal;

    let exact = equilibrium::interference_function(st, bank, gamma_bar)?;
    let estimator = if fault_inject {
        adaptive::stochastic_interference_faulty
    } else {
        adaptive::stochastic_interference
    };
    let k = st.users();
    if k > 16 {
        return Err(crate::error::domain("balanced design supports at most 16 users"));
    }
    let users: Vec<AdaptiveUserState> = (0..k)
        .map(|i| {
            Ok(AdaptiveUserState {
                rls: RlsState::new(bank.filter(i), 1.0, 1.0)?,
                code: st.code(i),
                power: st.powers[i],
                p_max: st.p_max[i],
                gain: st.gains[i],
                joined_at: 1,
            })
        })
        .collect::<crate::Result<_>>()?;
    let sigma = st.noise_var().sqrt();
    let amps: Vec<f64> = (0..k).map(|i| st.powers[i].sqrt() * st.gains[i]).collect();
    let mut patterns: Vec<u32> = (0..1u32 << k).collect();
    let mut acc = vec![0.0; k];
    let mut noise = DVector::zeros(st.processing_gain());
    let mut drawn = 0;
    'outer: loop {
        patterns.shuffle(rng);
        for &pat in &patterns {
            let mut signal = DVector::zeros(st.processing_gain());
            for (i, a) in amps.iter().enumerate() {
                let b = if pat >> i & 1 == 1 { 1.0 } else { -1.0 };
                signal.axpy(a * b, &st.codes.column(i), 1.0);
            }
            noise.iter_mut().for_each(|x| *x = sigma * rng.sample::<f64, _>(StandardNormal));
            for sign in [1.0, -1.0] {
                if drawn == draws {
                    break 'outer;
                }
                let r = &signal + &noise * sign;
                for (a, u) in acc.iter_mut().zip(&users) {
                    *a += estimator(u, &r, gamma_bar)?;
                }
                drawn += 1;
            }
        }
    }
    Ok(acc.iter().zip(exact.iter()).map(|(a, e)| a / draws as f64 / e).collect())
}

/// Frozen state and random receive filters for the unbiasedness check.
/// Gains are kept away from 1 so that an estimator normalized by `h`
/// instead of `h^2` is visibly off.
pub fn unbiasedness_instance(seed: u64) -> crate::Result<(NetworkState, ReceiverBank)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..=10);
    let k = rng.random_range(2..=6);
    let mut st = test_support::random_state(n, k, seed ^ 0x5eed);
    for g in st.gains.iter_mut() {
        *g = rng.random_range(0.2..0.6);
    }
    st.noise_psd = 1e-4;
    let filters = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
    Ok((st, ReceiverBank { filters }))
}

fn check_unbiased(opts: &SelftestOptions) -> Result<String, String> {
    let mut worst = 0.0f64;
    let states = count(opts, 20, 5);
    for i in 0..states {
        let (st, bank) = unbiasedness_instance(700 + i as u64).map_err(e2s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + i as u64);
        let ratios = estimator_mean_ratios(&st, &bank, 6.689, 10_000, opts.fault_inject, &mut rng).map_err(e2s)?;
        for r in ratios {
            worst = worst.max((r - 1.0).abs());
        }
    }
    if worst > 0.02 {
        return Err(format!("mean off by {:.2}%", 100.0 * worst));
    }
    Ok(format!("{states} states, worst {:.2}%", 100.0 * worst))
}

fn small_spec(seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        processing_gain: 7,
        initial_users: 3,
        arrivals: vec![ArrivalSpec { at: 50, distance: None }],
        realizations: 4,
        seed,
        ..ScenarioSpec::default()
    }
}

fn small_adaptive() -> Result<AdaptiveConfig, String> {
    let mut cfg = AdaptiveConfig::new(EfficiencyParams::default()).map_err(e2s)?;
    cfg.training_len = 10;
    Ok(cfg)
}

fn check_power_bounds(opts: &SelftestOptions) -> Result<String, String> {
    let cfg = small_adaptive()?;
    let spec = small_spec(808);
    let mut symbols = 0;
    for i in 0..count(opts, 10, 3) {
        let mut rng = scenario::realization_rng(spec.seed, i);
        let real = scenario::build_realization(&spec, &mut rng).map_err(e2s)?;
        let tr = adaptive::adaptive_run(&real, &cfg, 150, &mut rng).map_err(e2s)?;
        for (n, row) in tr.power.iter().enumerate() {
            if let Some(p) = row.iter().find(|&&p| !(p >= cfg.p_floor && p <= spec.p_max())) {
                return Err(format!("realization {i}, symbol {}: power {p}", n + 1));
            }
            symbols += 1;
        }
    }
    Ok(format!("{symbols} symbols in range"))
}

fn check_determinism(opts: &SelftestOptions) -> Result<String, String> {
    let cfg = small_adaptive()?;
    let eq = EquilibriumConfig::new(cfg.gamma_bar);
    let spec = small_spec(909);
    let mc = MonteCarloOptions {
        fault_inject: opts.fault_inject,
        ..MonteCarloOptions::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?
            .install(|| scenario::run_adaptive_mc(&spec, &cfg, &eq, 100, mc).map_err(e2s))
    };
    let a = run(1)?;
    let b = run(3)?;
    if a.trajectory != b.trajectory {
        return Err("trajectories differ between 1 and 3 threads".into());
    }
    Ok("1 and 3 threads agree".into())
}

fn check_averaging(opts: &SelftestOptions) -> Result<String, String> {
    let cfg = small_adaptive()?;
    let eq = EquilibriumConfig::new(cfg.gamma_bar);
    let spec = small_spec(1010);
    let mc = MonteCarloOptions {
        keep_traces: true,
        fault_inject: opts.fault_inject,
    };
    let out = scenario::run_adaptive_mc(&spec, &cfg, &eq, 100, mc).map_err(e2s)?;
    let traces = out.traces.ok_or("traces missing")?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for n in 0..100 {
        let want = traces.iter().map(|t| mean(&t.power[n])).sum::<f64>() / traces.len() as f64;
        let got = out.trajectory.avg_power[n];
        if (got - want).abs() > 1e-12 * want.abs().max(1.0) {
            return Err(format!("symbol {}: {got} vs {want}", n + 1));
        }
        let expect_users = if n + 1 >= 50 { 4 } else { 3 };
        if traces.iter().any(|t| t.power[n].len() != expect_users) {
            return Err(format!("symbol {}: wrong active set", n + 1));
        }
    }
    Ok(format!("{} realizations", traces.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_selftest_passes() {
        let out = run(&SelftestOptions {
            quick: true,
            fault_inject: false,
        });
        for o in &out {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
        assert_eq!(out.len(), check_names().len());
    }

    #[test]
    fn fault_injection_is_caught() {
        let opts = SelftestOptions {
            quick: true,
            fault_inject: true,
        };
        let bad = check_unbiased(&opts);
        assert!(bad.is_err(), "{bad:?}");
    }
}
