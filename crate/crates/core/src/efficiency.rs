//! Packet-success models, the energy-efficiency utility, and the
//! utility-maximizing target SINR.
//!
//! The utility of a user transmitting with power `p` at SINR `g` is
//! `R (L/M) f(g) / p` bit/Joule, where `f(g) = (1 - e^{-g})^M` replaces the
//! true packet-success probability so that the utility stays bounded as
//! `p -> 0`. Each user's best response drives its SINR to the unique
//! positive root of `f(g) = g f'(g)`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{domain, Error, Result};

/// Packet and rate parameters shared by all users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyParams {
    /// Packet length `M` in symbols.
    pub packet_len: u32,
    /// Information symbols per packet `L`; the rest is overhead.
    pub info_symbols: u32,
    /// Common bit rate `R` in bit/s.
    pub rate: f64,
}

impl Default for EfficiencyParams {
    fn default() -> Self {
        Self {
            packet_len: 120,
            info_symbols: 120,
            rate: 1e5,
        }
    }
}

impl EfficiencyParams {
    pub fn new(packet_len: u32, info_symbols: u32, rate: f64) -> Result<Self> {
        let p = Self {
            packet_len,
            info_symbols,
            rate,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.packet_len < 2 {
            return Err(Error::NoPositiveRoot(self.packet_len));
        }
        if self.info_symbols == 0 || self.info_symbols > self.packet_len {
            return Err(domain(format!(
                "information symbols L = {} must satisfy 0 < L <= M = {}",
                self.info_symbols, self.packet_len
            )));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(domain(format!("rate must be positive, got {}", self.rate)));
        }
        Ok(())
    }

    /// `R L / M`, the throughput at unit packet-success probability.
    pub fn goodput_scale(&self) -> f64 {
        self.rate * f64::from(self.info_symbols) / f64::from(self.packet_len)
    }
}

/// A smooth surrogate for the packet-success probability.
pub trait EfficiencyFunction {
    fn value(&self, gamma: f64) -> f64;

    fn derivative(&self, gamma: f64) -> f64;

    /// `g f'(g) / f(g)`. The target SINR is where this equals one.
    ///
    /// Implementations should override this when `f` underflows near zero.
    fn elasticity(&self, gamma: f64) -> f64 {
        gamma * self.derivative(gamma) / self.value(gamma)
    }
}

/// `f(g) = (1 - e^{-g})^M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialEfficiency {
    pub packet_len: u32,
}

impl EfficiencyFunction for ExponentialEfficiency {
    fn value(&self, gamma: f64) -> f64 {
        (-(-gamma).exp_m1()).powi(self.packet_len as i32)
    }

    fn derivative(&self, gamma: f64) -> f64 {
        let m = self.packet_len as i32;
        f64::from(self.packet_len) * (-(-gamma).exp_m1()).powi(m - 1) * (-gamma).exp()
    }

    fn elasticity(&self, gamma: f64) -> f64 {
        if gamma == 0.0 {
            return f64::from(self.packet_len);
        }
        f64::from(self.packet_len) * gamma / gamma.exp_m1()
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(domain(format!("SINR must be non-negative, got {gamma}")));
    }
    Ok(())
}

fn check_packet_len(m: u32) -> Result<()> {
    if m < 1 {
        return Err(domain("packet length must be at least 1"));
    }
    Ok(())
}

/// `(1 - e^{-gamma})^M`.
pub fn efficiency(gamma: f64, packet_len: u32) -> Result<f64> {
    check_gamma(gamma)?;
    check_packet_len(packet_len)?;
    Ok(ExponentialEfficiency { packet_len }.value(gamma))
}

/// `M (1 - e^{-gamma})^{M-1} e^{-gamma}`.
pub fn efficiency_derivative(gamma: f64, packet_len: u32) -> Result<f64> {
    check_gamma(gamma)?;
    check_packet_len(packet_len)?;
    Ok(ExponentialEfficiency { packet_len }.derivative(gamma))
}

/// Standard Gaussian tail probability.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Uncoded BPSK packet-success probability `[1 - Q(sqrt(2 gamma))]^M`.
pub fn packet_success_probability(gamma: f64, packet_len: u32) -> Result<f64> {
    check_gamma(gamma)?;
    check_packet_len(packet_len)?;
    Ok((1.0 - q_function((2.0 * gamma).sqrt())).powi(packet_len as i32))
}

const TARGET_BRACKET: (f64, f64) = (1e-6, 50.0);

/// Solves `f(g) = g f'(g)` for an arbitrary efficiency function by bisection
/// on `1 - elasticity(g)` over a fixed bracket.
pub fn solve_target_sinr_for<F: EfficiencyFunction>(f: &F) -> Option<f64> {
    let excess = |g: f64| 1.0 - f.elasticity(g);
    let (mut lo, mut hi) = TARGET_BRACKET;
    let (flo, fhi) = (excess(lo), excess(hi));
    if !(flo < 0.0 && fhi > 0.0) {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

/// The utility-maximizing SINR `gamma_bar` for packet length `M >= 2`.
pub fn solve_target_sinr(packet_len: u32) -> Result<f64> {
    if packet_len < 2 {
        return Err(Error::NoPositiveRoot(packet_len));
    }
    solve_target_sinr_for(&ExponentialEfficiency { packet_len })
        .ok_or(Error::NoPositiveRoot(packet_len))
}

/// `R (L/M) f(gamma) / p` in bit/Joule.
pub fn utility(power: f64, gamma: f64, params: &EfficiencyParams) -> Result<f64> {
    if !(power > 0.0) {
        return Err(domain(format!("utility needs positive power, got {power}")));
    }
    Ok(params.goodput_scale() * efficiency(gamma, params.packet_len)? / power)
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Bisection on e^g - 1 - M g, independent of the elasticity route.
    fn reduced_root(m: u32) -> f64 {
        let g = |x: f64| x.exp() - 1.0 - f64::from(m) * x;
        let (mut lo, mut hi) = (0.1, 20.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn efficiency_endpoints() {
        assert_eq!(efficiency(0.0, 120).unwrap(), 0.0);
        assert!(efficiency(50.0, 120).unwrap() > 1.0 - 1e-9);
        // mpmath, 40 digits
        let v = efficiency(6.689, 120).unwrap();
        assert!((v - 0.861_193_372_409_117_6).abs() < 1e-12, "{v}");
    }

    #[test]
    fn derivative_at_zero() {
        assert_eq!(efficiency_derivative(0.0, 1).unwrap(), 1.0);
        assert_eq!(efficiency_derivative(0.0, 2).unwrap(), 0.0);
        assert_eq!(efficiency_derivative(0.0, 120).unwrap(), 0.0);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let h = 1e-6;
        let fd = (efficiency(2.0 + h, 3).unwrap() - efficiency(2.0 - h, 3).unwrap()) / (2.0 * h);
        assert!((efficiency_derivative(2.0, 3).unwrap() - fd).abs() < 1e-6);
        for i in 0..200 {
            let g = 0.1 + 19.9 * f64::from(i) / 199.0;
            for m in [1, 3, 10, 120] {
                let h = 1e-5 * g.max(1.0);
                let fd = (efficiency(g + h, m).unwrap() - efficiency(g - h, m).unwrap()) / (2.0 * h);
                let an = efficiency_derivative(g, m).unwrap();
                // below ~1e-4 the difference quotient is limited by cancellation in f ~ 1
                let ok = if an > 1e-4 {
                    (an - fd).abs() / an < 1e-6
                } else {
                    (an - fd).abs() < 1e-10
                };
                assert!(ok, "g={g} m={m} an={an} fd={fd}");
            }
        }
    }

    #[test]
    fn domain_errors() {
        assert!(efficiency(-1.0, 10).is_err());
        assert!(efficiency(1.0, 0).is_err());
        assert!(efficiency_derivative(-0.1, 10).is_err());
        assert!(packet_success_probability(-1.0, 10).is_err());
        assert!(utility(0.0, 1.0, &EfficiencyParams::default()).is_err());
        assert!(utility(-1.0, 1.0, &EfficiencyParams::default()).is_err());
        assert_eq!(solve_target_sinr(1), Err(Error::NoPositiveRoot(1)));
        assert_eq!(solve_target_sinr(0), Err(Error::NoPositiveRoot(0)));
    }

    #[test]
    fn packet_success_values() {
        let p0 = packet_success_probability(0.0, 100).unwrap();
        assert!((p0 - 2f64.powi(-100)).abs() <= 1e-15 * 2f64.powi(-100));
        assert!(packet_success_probability(60.0, 100).unwrap() > 1.0 - 1e-12);
        // 1 - Q(sqrt 8), mpmath
        let v = packet_success_probability(4.0, 1).unwrap();
        assert!((v - 0.997_661_132_509_476_4).abs() < 1e-12, "{v}");
    }

    #[test]
    fn target_sinr_values() {
        let g = solve_target_sinr(120).unwrap();
        assert!((g - 6.689).abs() < 1e-3);
        assert!((to_db(g) - 8.25).abs() < 0.01);
        // mpmath roots of e^g = 1 + M g
        for (m, root) in [
            (2, 1.256_431_208_626_169_7),
            (10, 3.614_950_427_087_530_6),
            (100, 6.474_600_379_589_358),
            (120, 6.689_236_490_525_919_6),
            (1000, 9.118_129_644_833_788),
        ] {
            let g = solve_target_sinr(m).unwrap();
            assert!((g - root).abs() < 1e-9, "M={m}: {g} vs {root}");
            assert!((g - reduced_root(m)).abs() < 1e-9);
            assert!((g.exp() - 1.0 - f64::from(m) * g).abs() < 1e-6);
            let f = ExponentialEfficiency { packet_len: m };
            assert!((f.value(g) - g * f.derivative(g)).abs() < 1e-9);
        }
    }

    #[test]
    fn efficiency_over_sinr_peaks_at_target() {
        for m in [2, 10, 120] {
            let gb = solve_target_sinr(m).unwrap();
            let ratio = |g: f64| efficiency(g, m).unwrap() / g;
            for d in [1e-3, 1e-1, 1.0] {
                assert!(ratio(gb) > ratio(gb + d));
                if gb - d > 0.0 {
                    assert!(ratio(gb) > ratio(gb - d));
                }
            }
        }
    }

    #[test]
    fn efficiency_strictly_increasing() {
        for m in [1, 2, 120] {
            let mut prev = efficiency(0.0, m).unwrap();
            for i in 1..=1000 {
                let g = 20.0 * f64::from(i) / 1000.0;
                let v = efficiency(g, m).unwrap();
                assert!(v > prev || (prev == 1.0 && v == 1.0), "m={m} g={g}");
                prev = v;
            }
        }
    }

    #[test]
    fn both_curves_cross_half_once() {
        let crossings = |f: &dyn Fn(f64) -> f64| {
            let mut n = 0;
            let mut prev = f(0.0) - 0.5;
            for i in 1..=4000 {
                let cur = f(f64::from(i) * 0.01) - 0.5;
                if prev.signum() != cur.signum() {
                    n += 1;
                }
                prev = cur;
            }
            n
        };
        assert_eq!(crossings(&|g| efficiency(g, 100).unwrap()), 1);
        assert_eq!(crossings(&|g| packet_success_probability(g, 100).unwrap()), 1);
    }

    #[test]
    fn utility_scaling() {
        let params = EfficiencyParams::default();
        assert_eq!(utility(1.0, 0.0, &params).unwrap(), 0.0);
        let u1 = utility(1.0, 5.0, &params).unwrap();
        let u2 = utility(2.0, 5.0, &params).unwrap();
        assert_eq!(u2, 0.5 * u1);
        let u = utility(0.5, 6.689, &params).unwrap();
        assert!((u - 172_238.674_481_823_5).abs() < 1e-6, "{u}");
    }

    #[test]
    fn params_validation() {
        assert!(EfficiencyParams::new(120, 121, 1e5).is_err());
        assert!(EfficiencyParams::new(120, 0, 1e5).is_err());
        assert!(EfficiencyParams::new(120, 100, -1.0).is_err());
        assert!(EfficiencyParams::new(1, 1, 1.0).is_err());
        assert!(EfficiencyParams::new(120, 100, 1e5).is_ok());
    }
}
