//! Synchronous DS/CDMA uplink after chip-matched filtering:
//! `r = sum_k sqrt(p_k) h_k b_k s_k + w`, with white Gaussian `w` of
//! per-chip variance `N0/2`. Everything is real-valued.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

const CODE_NORM_TOL: f64 = 1e-12;

/// Instantaneous snapshot of the active users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    /// `N x K`; column `k` is the unit-norm spreading code of user `k`.
    pub codes: DMatrix<f64>,
    /// Transmit powers in W.
    pub powers: DVector<f64>,
    /// Channel amplitudes `h_k` (not power gains).
    pub gains: DVector<f64>,
    /// Per-user power caps in W.
    pub p_max: DVector<f64>,
    /// `N0` in W/Hz; the per-chip noise variance is `N0/2`.
    pub noise_psd: f64,
}

impl NetworkState {
    pub fn new(
        codes: DMatrix<f64>,
        powers: DVector<f64>,
        gains: DVector<f64>,
        p_max: DVector<f64>,
        noise_psd: f64,
    ) -> Result<Self> {
        let state = Self {
            codes,
            powers,
            gains,
            p_max,
            noise_psd,
        };
        state.validate()?;
        Ok(state)
    }

    /// An `N`-chip system with no users.
    pub fn empty(processing_gain: usize, noise_psd: f64) -> Self {
        Self {
            codes: DMatrix::zeros(processing_gain, 0),
            powers: DVector::zeros(0),
            gains: DVector::zeros(0),
            p_max: DVector::zeros(0),
            noise_psd,
        }
    }

    pub fn processing_gain(&self) -> usize {
        self.codes.nrows()
    }

    pub fn users(&self) -> usize {
        self.codes.ncols()
    }

    pub fn noise_var(&self) -> f64 {
        0.5 * self.noise_psd
    }

    pub fn code(&self, k: usize) -> DVector<f64> {
        self.codes.column(k).into_owned()
    }

    /// Received amplitude squared, `p_k h_k^2`.
    pub fn received_power(&self, k: usize) -> f64 {
        self.powers[k] * self.gains[k] * self.gains[k]
    }

    pub fn check_user(&self, k: usize) -> Result<()> {
        if k >= self.users() {
            return Err(Error::UserIndex {
                index: k,
                users: self.users(),
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.users();
        if self.processing_gain() == 0 {
            return Err(domain("processing gain must be positive"));
        }
        if self.powers.len() != k || self.gains.len() != k || self.p_max.len() != k {
            return Err(domain("per-user vectors must have one entry per code column"));
        }
        if !(self.noise_psd > 0.0 && self.noise_psd.is_finite()) {
            return Err(domain(format!("noise PSD must be positive, got {}", self.noise_psd)));
        }
        for i in 0..k {
            let norm2 = self.codes.column(i).norm_squared();
            if (norm2 - 1.0).abs() > CODE_NORM_TOL * 10.0 {
                return Err(domain(format!("code of user {i} has squared norm {norm2}")));
            }
            if !(self.gains[i] > 0.0 && self.gains[i].is_finite()) {
                return Err(domain(format!("channel gain of user {i} must be positive")));
            }
            let (p, cap) = (self.powers[i], self.p_max[i]);
            if !(p >= 0.0 && p <= cap && cap.is_finite()) {
                return Err(domain(format!("power {p} of user {i} outside [0, {cap}]")));
            }
        }
        Ok(())
    }
}

/// One linear receive filter per user. Filters are meaningful only up to a
/// positive scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverBank {
    /// `N x K`; column `k` is `d_k`.
    pub filters: DMatrix<f64>,
}

impl ReceiverBank {
    /// Matched filters `d_k = s_k`.
    pub fn matched(state: &NetworkState) -> Self {
        Self {
            filters: state.codes.clone(),
        }
    }

    pub fn filter(&self, k: usize) -> DVector<f64> {
        self.filters.column(k).into_owned()
    }

    pub fn users(&self) -> usize {
        self.filters.ncols()
    }
}

/// `sum_k p_k h_k^2 s_k s_k^T + (N0/2) I`.
pub fn data_covariance(state: &NetworkState) -> DMatrix<f64> {
    let n = state.processing_gain();
    let mut m = DMatrix::identity(n, n) * state.noise_var();
    for k in 0..state.users() {
        let s = state.codes.column(k);
        m.ger(state.received_power(k), &s, &s, 1.0);
    }
    m.fill_lower_triangle_with_upper_triangle();
    m
}

/// Covariance with user `k`'s own contribution removed.
pub fn user_excluded_covariance(state: &NetworkState, k: usize) -> Result<DMatrix<f64>> {
    state.check_user(k)?;
    let mut m = data_covariance(state);
    let s = state.codes.column(k);
    m.ger(-state.received_power(k), &s, &s, 1.0);
    m.fill_lower_triangle_with_upper_triangle();
    Ok(m)
}

fn check_len(state: &NetworkState, v: &DVector<f64>) -> Result<()> {
    if v.len() != state.processing_gain() {
        return Err(domain(format!(
            "vector of length {} does not match processing gain {}",
            v.len(),
            state.processing_gain()
        )));
    }
    Ok(())
}

/// Interference-plus-noise power at the output of filter `d` for user `k`.
pub fn interference_plus_noise(state: &NetworkState, k: usize, d: &DVector<f64>) -> f64 {
    let mut den = state.noise_var() * d.norm_squared();
    for i in 0..state.users() {
        if i != k {
            let c = d.dot(&state.codes.column(i));
            den += state.received_power(i) * c * c;
        }
    }
    den
}

/// Output SINR of user `k` with receive filter `d`.
pub fn sinr(state: &NetworkState, k: usize, d: &DVector<f64>) -> Result<f64> {
    state.check_user(k)?;
    check_len(state, d)?;
    if d.iter().all(|&x| x == 0.0) {
        return Err(domain("SINR is undefined for the zero filter"));
    }
    let c = d.dot(&state.codes.column(k));
    Ok(state.received_power(k) * c * c / interference_plus_noise(state, k, d))
}

/// `E[(b_k - d^T r)^2] = 1 + d^T M d - 2 sqrt(p_k) h_k d^T s_k`.
pub fn mse(state: &NetworkState, k: usize, d: &DVector<f64>) -> Result<f64> {
    state.check_user(k)?;
    check_len(state, d)?;
    let m = data_covariance(state);
    Ok(mse_with_covariance(state, &m, k, d))
}

pub(crate) fn mse_with_covariance(
    state: &NetworkState,
    cov: &DMatrix<f64>,
    k: usize,
    d: &DVector<f64>,
) -> f64 {
    let amp = state.powers[k].sqrt() * state.gains[k];
    1.0 + d.dot(&(cov * d)) - 2.0 * amp * d.dot(&state.codes.column(k))
}

/// The same MSE written with the user-excluded covariance:
/// `1 + d^T (p_k h_k^2 s_k s_k^T + M_k) d - 2 sqrt(p_k) h_k d^T s_k`.
pub fn mse_split_form(state: &NetworkState, k: usize, d: &DVector<f64>) -> Result<f64> {
    check_len(state, d)?;
    let mk = user_excluded_covariance(state, k)?;
    let c = d.dot(&state.codes.column(k));
    let amp = state.powers[k].sqrt() * state.gains[k];
    Ok(1.0 + state.received_power(k) * c * c + d.dot(&(&mk * d)) - 2.0 * amp * c)
}

/// Sum of all users' MSEs.
pub fn tmse(state: &NetworkState, receivers: &ReceiverBank) -> Result<f64> {
    if receivers.users() != state.users() {
        return Err(domain("receiver bank size does not match user count"));
    }
    let m = data_covariance(state);
    Ok((0..state.users())
        .map(|k| mse_with_covariance(state, &m, k, &receivers.filter(k)))
        .sum())
}

/// Draws one received chip vector for the given symbols.
pub fn synthesize_received<R: Rng + ?Sized>(
    state: &NetworkState,
    bits: &[i8],
    rng: &mut R,
) -> Result<DVector<f64>> {
    if bits.len() != state.users() {
        return Err(domain("one symbol per user is required"));
    }
    if let Some(b) = bits.iter().find(|&&b| b != 1 && b != -1) {
        return Err(domain(format!("symbols must be +1 or -1, got {b}")));
    }
    let sigma = state.noise_var().sqrt();
    let mut r = DVector::from_fn(state.processing_gain(), |_, _| {
        sigma * rng.sample::<f64, _>(StandardNormal)
    });
    for (k, &b) in bits.iter().enumerate() {
        let amp = state.powers[k].sqrt() * state.gains[k] * f64::from(b);
        r.axpy(amp, &state.codes.column(k), 1.0);
    }
    Ok(r)
}

/// `sign(d^T r)`, with an exact zero resolved to `+1`.
pub fn detect(d: &DVector<f64>, r: &DVector<f64>) -> i8 {
    if d.dot(r) < 0.0 {
        -1
    } else {
        1
    }
}

/// Random instances shared by the unit tests, self-test, and benchmarks.
#[doc(hidden)]
pub mod test_support {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random state with unit-norm Gaussian codes and O(1) scaling.
    pub fn random_state(n: usize, k: usize, seed: u64) -> NetworkState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codes = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        for mut c in codes.column_iter_mut() {
            let norm = c.norm();
            c /= norm;
        }
        let powers = DVector::from_fn(k, |_, _| rng.random_range(0.1..3.0));
        let gains = DVector::from_fn(k, |_, _| rng.random_range(0.2..2.0));
        let p_max = DVector::from_element(k, 10.0);
        NetworkState::new(codes, powers, gains, p_max, rng.random_range(0.05..0.5)).unwrap()
    }

    pub fn random_vector(n: usize, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }
}
