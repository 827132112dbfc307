use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use clg_core::efficiency::to_db;
use clg_core::scenario::{BenchmarkSummary, Trajectory, UserAverages};

use crate::config::RunConfig;

pub const TRAJECTORY_HEADER: &str = "n,active_users,avg_utility_bit_per_joule,avg_sinr_db,avg_power_dbw,\
benchmark_utility,benchmark_sinr_db,benchmark_power_dbw";

pub const BENCHMARK_HEADER: &str =
    "realization,users,clamped_users,converged,outer_sweeps,avg_utility_bit_per_joule,avg_sinr_db,avg_power_dbw";

/// `x` with `digits` significant digits, `%g` style: plain notation for
/// moderate exponents, scientific otherwise, trailing zeros dropped.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn num(x: f64) -> String {
    fmt_sig(x, 9)
}

pub fn trajectory_csv(t: &Trajectory) -> String {
    let mut out = String::with_capacity(t.len() * 120);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for i in 0..t.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            i + 1,
            t.active_users[i],
            num(t.avg_utility[i]),
            num(to_db(t.avg_sinr[i])),
            num(to_db(t.avg_power[i])),
            num(t.benchmark_utility[i]),
            num(to_db(t.benchmark_sinr[i])),
            num(to_db(t.benchmark_power[i])),
        );
    }
    out
}

pub fn benchmark_csv(summary: &BenchmarkSummary) -> String {
    let mut out = String::new();
    out.push_str(BENCHMARK_HEADER);
    out.push('\n');
    for r in &summary.realizations {
        let (_, eq) = &r.segments[0];
        let a = UserAverages::of(eq);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.index,
            eq.sinr.len(),
            eq.clamped.iter().filter(|&&c| c).count(),
            eq.converged,
            eq.outer_sweeps,
            num(a.utility),
            num(to_db(a.sinr)),
            num(to_db(a.power)),
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub csv: PathBuf,
    pub manifest: PathBuf,
}

/// Everything needed to rerun and audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub config: RunConfig,
    pub outputs: OutputPaths,
    pub realizations_used: usize,
    pub benchmark_realizations_used: usize,
    pub diverged: Vec<usize>,
    pub non_converged: Vec<usize>,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig(8.253_800_141_2, 9), "8.25380014");
        assert_eq!(fmt_sig(6.689, 9), "6.689");
        assert_eq!(fmt_sig(172_238.674_481_823_5, 9), "172238.674");
        assert_eq!(fmt_sig(-1.162_345_678_9, 9), "-1.16234568");
        assert_eq!(fmt_sig(1.0e-7, 9), "1e-07");
        assert_eq!(fmt_sig(3.162_277_660_168e10, 9), "3.16227766e+10");
        assert_eq!(fmt_sig(123_456_789.4, 9), "123456789");
        assert_eq!(fmt_sig(0.0, 9), "0");
        assert_eq!(fmt_sig(f64::NAN, 9), "nan");
        assert_eq!(fmt_sig(f64::NEG_INFINITY, 9), "-inf");
        assert_eq!(fmt_sig(0.000_123_456_789_12, 9), "0.000123456789");
    }

    #[test]
    fn header_is_stable() {
        let t = Trajectory::default();
        assert_eq!(trajectory_csv(&t), format!("{TRAJECTORY_HEADER}\n"));
        assert_eq!(TRAJECTORY_HEADER.split(',').count(), 8);
    }
}
