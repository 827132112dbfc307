//! Non-adaptive Nash equilibrium of the joint power, spreading-code, and
//! receiver game.
//!
//! The equilibrium separates into two alternating phases. At fixed powers
//! each user replaces its receiver by the MMSE filter and its code by the
//! unit-norm minimizer of the total MSE; sweeping users in index order is a
//! block-coordinate descent on the TMSE. At fixed codes and receivers the
//! powers solve `p = min(I(p), P_max)` for the standard interference map
//! `I`. Both phases repeat until the powers stop moving.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::efficiency::{self, EfficiencyParams};
use crate::error::{domain, Error, Result};
use crate::model::{self, NetworkState, ReceiverBank};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumConfig {
    /// Target SINR (linear).
    pub gamma_bar: f64,
    /// Stop the code/receiver sweeps once TMSE drops by less than this.
    pub code_receiver_tol: f64,
    /// Maximum relative power change accepted as converged.
    pub power_tol: f64,
    pub max_inner_iters: usize,
    pub max_power_iters: usize,
    pub max_outer_iters: usize,
    /// When false only receivers and powers adapt; codes stay fixed.
    pub optimize_codes: bool,
}

impl EquilibriumConfig {
    pub fn new(gamma_bar: f64) -> Self {
        Self {
            gamma_bar,
            code_receiver_tol: 1e-10,
            power_tol: 1e-8,
            max_inner_iters: 500,
            max_power_iters: 500,
            max_outer_iters: 100,
            optimize_codes: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_bar > 0.0 && self.gamma_bar.is_finite()) {
            return Err(Error::Config(format!("target SINR must be positive, got {}", self.gamma_bar)));
        }
        if !(self.code_receiver_tol > 0.0 && self.power_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.max_inner_iters == 0 || self.max_power_iters == 0 || self.max_outer_iters == 0 {
            return Err(Error::Config("iteration caps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of the full game.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub state: NetworkState,
    pub receivers: ReceiverBank,
    pub sinr: Vec<f64>,
    pub utility: Vec<f64>,
    /// Users whose required power exceeds the cap.
    pub clamped: Vec<bool>,
    pub converged: bool,
    pub outer_sweeps: usize,
    /// One TMSE trace per code/receiver phase.
    pub tmse_traces: Vec<Vec<f64>>,
    /// Human-readable reason when `converged` is false.
    pub diagnostics: Option<String>,
}

/// `sqrt(p_k) h_k M^{-1} s_k`, computed with a Cholesky solve.
pub fn mmse_receiver(state: &NetworkState, k: usize) -> Result<DVector<f64>> {
    state.check_user(k)?;
    if !(state.powers[k] > 0.0) {
        return Err(Error::DegenerateUser(k));
    }
    let chol = model::data_covariance(state)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?;
    let amp = state.powers[k].sqrt() * state.gains[k];
    Ok(chol.solve(&state.code(k)) * amp)
}

/// Minimizes `s^T A s - 2 b^T s` over unit-norm `s` for symmetric positive
/// semidefinite `A`. Returns the minimizer and the multiplier `mu` with
/// `(A + mu I) s = b`.
///
/// The multiplier lies in `(-lambda_min(A), -lambda_min(A) + |b|]` where the
/// squared norm of `(A + mu I)^{-1} b` is a decreasing rational function of
/// `mu`, so the root is found by safeguarded Newton on the eigen-expansion.
pub fn unit_norm_quadratic_minimizer(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let n = b.len();
    if a.nrows() != n || a.ncols() != n {
        return Err(domain("dimension mismatch in constrained quadratic"));
    }
    let b_norm = b.norm();
    if !(b_norm > 0.0) || !b_norm.is_finite() {
        return Err(domain("linear term must be a non-zero finite vector"));
    }
    let eig = a.clone().symmetric_eigen();
    let lam_min = eig.eigenvalues.min();
    let scale = eig.eigenvalues.amax().max(b_norm);
    // shifted spectrum, all >= 0
    let delta: Vec<f64> = eig.eigenvalues.iter().map(|&l| (l - lam_min).max(0.0)).collect();
    let beta: Vec<f64> = (0..n).map(|i| eig.eigenvectors.column(i).dot(b)).collect();

    let flat = 1e-13 * scale;
    let bottom: Vec<usize> = (0..n).filter(|&i| delta[i] <= flat).collect();
    let bottom_weight: f64 = bottom.iter().map(|&i| beta[i] * beta[i]).sum::<f64>().sqrt();

    let assemble = |coef: &dyn Fn(usize) -> f64| {
        let mut s = DVector::zeros(n);
        for i in 0..n {
            s.axpy(coef(i), &eig.eigenvectors.column(i), 1.0);
        }
        s
    };

    if bottom_weight <= 1e-14 * b_norm {
        // b has no component on the bottom eigenspace; if the remaining
        // expansion at mu = -lambda_min is short, the minimizer adds a
        // component along that eigenspace.
        let partial2: f64 = (0..n)
            .filter(|i| !bottom.contains(i))
            .map(|i| (beta[i] / delta[i]).powi(2))
            .sum();
        if partial2 <= 1.0 {
            let tau = (1.0 - partial2).max(0.0).sqrt();
            let mut s = assemble(&|i| if bottom.contains(&i) { 0.0 } else { beta[i] / delta[i] });
            s.axpy(tau, &eig.eigenvectors.column(bottom[0]), 1.0);
            let norm = s.norm();
            return Ok((s / norm, -lam_min));
        }
    }

    // Work in t = mu + lambda_min > 0.
    let sq_norm = |t: f64| -> f64 { (0..n).map(|i| (beta[i] / (delta[i] + t)).powi(2)).sum() };
    let mut lo = (0..n)
        .map(|i| beta[i].abs() - delta[i])
        .fold(0.0f64, f64::max);
    let mut hi = b_norm;
    if lo >= hi {
        lo = 0.0;
    }
    let mut t = 0.5 * (lo + hi).max(f64::MIN_POSITIVE);
    for _ in 0..300 {
        let g = sq_norm(t);
        if g > 1.0 {
            lo = t;
        } else {
            hi = t;
        }
        if (g - 1.0).abs() < 1e-15 || hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        // Newton on 1/|s(t)| - 1, which is close to linear in t.
        let dg: f64 = (0..n)
            .map(|i| -2.0 * beta[i] * beta[i] / (delta[i] + t).powi(3))
            .sum();
        let psi = 1.0 / g.sqrt() - 1.0;
        let dpsi = -0.5 * g.powf(-1.5) * dg;
        let mut next = t - psi / dpsi;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if lo > 0.0 { 0.5 * (lo + hi) } else { 0.01 * hi };
        }
        t = next;
    }
    let s = assemble(&|i| beta[i] / (delta[i] + t));
    let norm = s.norm();
    Ok((s / norm, t - lam_min))
}

/// Unit-norm code of user `k` minimizing the TMSE with every filter,
/// every other code, and all powers held fixed.
pub fn tmse_code_update(
    state: &NetworkState,
    k: usize,
    receivers: &ReceiverBank,
) -> Result<DVector<f64>> {
    state.check_user(k)?;
    if receivers.users() != state.users() {
        return Err(domain("receiver bank size does not match user count"));
    }
    if !(state.powers[k] > 0.0) {
        return Err(Error::DegenerateUser(k));
    }
    let d = receivers.filter(k);
    if d.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroFilter(k));
    }
    let dmat = &receivers.filters;
    let gram = dmat * dmat.transpose() * state.received_power(k);
    let amp = state.powers[k].sqrt() * state.gains[k];
    let (mut s, _) = unit_norm_quadratic_minimizer(&gram, &(d.clone() * amp))?;
    if d.dot(&s) < 0.0 {
        s.neg_mut();
    }
    Ok(s)
}

/// Result of one code/receiver phase.
#[derive(Debug, Clone)]
pub struct CodeReceiverOutcome {
    pub codes: DMatrix<f64>,
    pub receivers: ReceiverBank,
    /// TMSE before the first sweep and after each sweep.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Gauss-Seidel sweeps of receiver then code updates, user by user, until
/// the TMSE decrease per sweep falls below `cfg.code_receiver_tol`.
pub fn code_receiver_fixed_point(
    state: &NetworkState,
    receivers: &ReceiverBank,
    cfg: &EquilibriumConfig,
) -> Result<CodeReceiverOutcome> {
    let mut work = state.clone();
    let mut bank = receivers.clone();
    let mut trace = vec![model::tmse(&work, &bank)?];
    let mut converged = false;
    for _ in 0..cfg.max_inner_iters {
        for k in 0..work.users() {
            if !(work.powers[k] > 0.0) {
                continue;
            }
            let d = mmse_receiver(&work, k)?;
            bank.filters.set_column(k, &d);
            if cfg.optimize_codes {
                let s = tmse_code_update(&work, k, &bank)?;
                work.codes.set_column(k, &s);
            }
        }
        let t = model::tmse(&work, &bank)?;
        let prev = *trace.last().unwrap();
        trace.push(t);
        if prev - t < cfg.code_receiver_tol {
            converged = true;
            break;
        }
    }
    Ok(CodeReceiverOutcome {
        codes: work.codes,
        receivers: bank,
        trace,
        converged,
    })
}

fn interference_entry(
    state: &NetworkState,
    receivers: &ReceiverBank,
    gamma_bar: f64,
    powers: &DVector<f64>,
    k: usize,
) -> Result<f64> {
    let d = receivers.filters.column(k);
    let own = d.dot(&state.codes.column(k));
    if own == 0.0 {
        return Err(Error::UnservableUser(k));
    }
    let mut acc = state.noise_var() * d.norm_squared();
    for i in 0..state.users() {
        if i != k {
            let c = d.dot(&state.codes.column(i));
            acc += powers[i] * state.gains[i] * state.gains[i] * c * c;
        }
    }
    let hk2 = state.gains[k] * state.gains[k];
    Ok(gamma_bar * acc / (hk2 * own * own))
}

/// `I(p)` evaluated at an arbitrary power vector with codes and filters
/// taken from `state` and `receivers`.
pub fn interference_map(
    state: &NetworkState,
    receivers: &ReceiverBank,
    gamma_bar: f64,
    powers: &DVector<f64>,
) -> Result<DVector<f64>> {
    if receivers.users() != state.users() || powers.len() != state.users() {
        return Err(domain("size mismatch in interference map"));
    }
    let mut out = DVector::zeros(state.users());
    for k in 0..state.users() {
        out[k] = interference_entry(state, receivers, gamma_bar, powers, k)?;
    }
    Ok(out)
}

/// Power each user needs to hit `gamma_bar` against the current
/// interference: `I_k(p)`.
pub fn interference_function(
    state: &NetworkState,
    receivers: &ReceiverBank,
    gamma_bar: f64,
) -> Result<DVector<f64>> {
    interference_map(state, receivers, gamma_bar, &state.powers)
}

#[derive(Debug, Clone)]
pub struct PowerOutcome {
    pub powers: DVector<f64>,
    pub clamped: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates `p <- min(I(p), P_max)` from the current powers.
pub fn power_iteration(
    state: &NetworkState,
    receivers: &ReceiverBank,
    cfg: &EquilibriumConfig,
) -> Result<PowerOutcome> {
    let mut p = state.powers.clone();
    let mut clamped = vec![false; state.users()];
    for it in 1..=cfg.max_power_iters {
        let target = interference_map(state, receivers, cfg.gamma_bar, &p)?;
        let mut change = 0.0f64;
        for k in 0..p.len() {
            let next = target[k].min(state.p_max[k]);
            clamped[k] = target[k] >= state.p_max[k];
            let rel = (next - p[k]).abs() / next.max(f64::MIN_POSITIVE);
            change = change.max(rel);
            p[k] = next;
        }
        if change < cfg.power_tol {
            return Ok(PowerOutcome {
                powers: p,
                clamped,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(PowerOutcome {
        powers: p,
        clamped,
        iterations: cfg.max_power_iters,
        converged: false,
    })
}

/// Plays the game from `state` (its codes are the starting point) until the
/// powers settle.
pub fn solve_nash_equilibrium(
    state: &NetworkState,
    cfg: &EquilibriumConfig,
    params: &EfficiencyParams,
) -> Result<EquilibriumResult> {
    cfg.validate()?;
    params.validate()?;
    state.validate()?;
    let mut work = state.clone();
    let mut bank = ReceiverBank::matched(&work);
    let mut traces = Vec::new();
    let mut clamped = vec![false; work.users()];
    let mut converged = false;
    let mut diagnostics = None;
    let mut sweeps = 0;

    for outer in 1..=cfg.max_outer_iters {
        sweeps = outer;
        let phase = code_receiver_fixed_point(&work, &bank, cfg)?;
        work.codes = phase.codes;
        bank = phase.receivers;
        traces.push(phase.trace);

        let power = power_iteration(&work, &bank, cfg)?;
        let change = (0..work.users())
            .map(|k| {
                let (old, new) = (work.powers[k], power.powers[k]);
                (new - old).abs() / new.max(f64::MIN_POSITIVE)
            })
            .fold(0.0f64, f64::max);
        work.powers = power.powers;
        clamped = power.clamped;
        if !power.converged {
            diagnostics = Some(format!(
                "power iteration hit its cap of {} iterations at outer sweep {outer}",
                cfg.max_power_iters
            ));
            continue;
        }
        diagnostics = None;
        if change < cfg.power_tol {
            converged = true;
            break;
        }
    }
    if !converged && diagnostics.is_none() {
        diagnostics = Some(format!(
            "powers still moving after {} outer sweeps",
            cfg.max_outer_iters
        ));
    }

    let mut sinr = Vec::with_capacity(work.users());
    let mut utility = Vec::with_capacity(work.users());
    for k in 0..work.users() {
        let g = model::sinr(&work, k, &bank.filter(k))?;
        sinr.push(g);
        utility.push(efficiency::utility(work.powers[k], g, params)?);
    }
    Ok(EquilibriumResult {
        state: work,
        receivers: bank,
        sinr,
        utility,
        clamped,
        converged,
        outer_sweeps: sweeps,
        tmse_traces: traces,
        diagnostics,
    })
}
