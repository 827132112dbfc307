//! Batch front end for `clg-core`: runs experiments and writes CSV results
//! with a JSON manifest beside them.

pub mod config;
pub mod output;

use std::process::ExitCode;
use std::time::SystemTime;

use anyhow::{Context, Result};
use log::info;

use clg_core::efficiency::{solve_target_sinr, to_db};
use clg_core::scenario::{self, MonteCarloOptions};
use clg_core::selftest::{self, SelftestOptions};

use config::{Cli, Mode, RunConfig};
use output::{OutputPaths, RunManifest};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CLG_GIT_DESCRIBE"), ")");

pub const FAULT_ENV: &str = "CLG_FAULT_INJECT";

fn fault_injection_requested() -> bool {
    std::env::var(FAULT_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

fn timestamp() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = RunConfig::resolve(&cli)?;
    match cfg.mode {
        Mode::Gamma => cmd_gamma(&cfg),
        Mode::Selftest => cmd_selftest(&cfg),
        Mode::Static | Mode::Dynamic | Mode::Benchmark => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.jobs)
                .build()
                .context("starting worker threads")?;
            pool.install(|| cmd_run(&cfg))
        }
    }
}

fn cmd_gamma(cfg: &RunConfig) -> Result<ExitCode> {
    let g = solve_target_sinr(cfg.packet_size)?;
    println!("{g:.3}  {:.2} dB", to_db(g));
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(cfg: &RunConfig) -> Result<ExitCode> {
    let opts = SelftestOptions {
        quick: cfg.quick,
        fault_inject: fault_injection_requested(),
    };
    if opts.fault_inject {
        println!("fault injection active ({FAULT_ENV})");
    }
    let width = selftest::check_names().iter().map(|n| n.len()).max().unwrap_or(0);
    let results = selftest::run(&opts);
    for r in &results {
        println!(
            "{:<width$}  {}  {:>7.2}s  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_run(cfg: &RunConfig) -> Result<ExitCode> {
    let started_at = timestamp();
    let spec = cfg.scenario()?;
    let eq = cfg.equilibrium()?;
    let params = cfg.params()?;
    info!("{:?} run: K={} N={} realizations={}", cfg.mode, cfg.users, cfg.processing_gain, cfg.realizations);

    let (csv_name, csv, diverged, bench, used) = if cfg.mode == Mode::Benchmark {
        let summary = scenario::run_benchmark(&spec, &eq, &params)?;
        let a = summary.aggregate;
        println!(
            "benchmark: utility {} bit/J, SINR {:.3} dB, power {:.3} dBW over {} realizations",
            output::fmt_sig(a.utility, 9),
            to_db(a.sinr),
            to_db(a.power),
            summary.realizations.len() - summary.non_converged.len()
        );
        (
            "benchmark.csv",
            output::benchmark_csv(&summary),
            Vec::new(),
            summary.non_converged.clone(),
            summary.realizations.len() - summary.non_converged.len(),
        )
    } else {
        let adaptive = cfg.adaptive()?;
        let mc = MonteCarloOptions::default();
        let out = scenario::run_adaptive_mc(&spec, &adaptive, &eq, cfg.horizon, mc)?;
        let last = out.trajectory.len() - 1;
        let t = &out.trajectory;
        println!(
            "n={}: SINR {:.3} dB (benchmark {:.3}), power {:.3} dBW (benchmark {:.3})",
            last + 1,
            to_db(t.avg_sinr[last]),
            to_db(t.benchmark_sinr[last]),
            to_db(t.avg_power[last]),
            to_db(t.benchmark_power[last]),
        );
        let used = t.realizations_used.min(t.benchmark_realizations_used);
        (
            "trajectory.csv",
            output::trajectory_csv(t),
            out.diverged,
            out.benchmark.non_converged,
            used,
        )
    };

    let paths = OutputPaths {
        csv: cfg.out_dir.join(csv_name),
        manifest: cfg.out_dir.join("manifest.json"),
    };
    output::write_text(&paths.csv, &csv)?;

    let failed: std::collections::BTreeSet<usize> = diverged.iter().chain(&bench).copied().collect();
    let manifest = RunManifest {
        version: VERSION.to_string(),
        seed: cfg.seed,
        started_at,
        finished_at: timestamp(),
        config: cfg.clone(),
        outputs: paths.clone(),
        realizations_used: used,
        benchmark_realizations_used: cfg.realizations - bench.len(),
        diverged: diverged.clone(),
        non_converged: bench.clone(),
    };
    output::write_text(&paths.manifest, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    println!("wrote {} and {}", paths.csv.display(), paths.manifest.display());

    let fraction = failed.len() as f64 / cfg.realizations as f64;
    if fraction > cfg.max_failure_fraction {
        eprintln!(
            "error: {} of {} realizations failed ({} diverged: {:?}; {} benchmark not converged: {:?}), above the {} limit",
            failed.len(),
            cfg.realizations,
            diverged.len(),
            diverged,
            bench.len(),
            bench,
            cfg.max_failure_fraction
        );
        return Ok(ExitCode::from(2));
    }
    if !failed.is_empty() {
        eprintln!("warning: {} realization(s) excluded from averages", failed.len());
    }
    Ok(ExitCode::SUCCESS)
}
