mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qfdt_core::experiments::{oracle_check, run_experiment, with_threads, OracleSpec, RunOptions, RunReport};
use qfdt_core::spectral::cache::EigenCache;
use serde_json::json;

use config::{Config, Overrides};

#[derive(Parser)]
#[command(name = "qfdt", version, about = "Quench dynamics and fluctuation-dissipation checks for chaotic quantum systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct RunFlags {
    /// Overrides `[ensemble].seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `[output].dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides `[budget].memory_gb`.
    #[arg(long)]
    budget_gb: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Check a config without running it.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Compare sampled four-point overlap correlators with their closed forms.
    OracleCheck {
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        realizations: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// GOE coupling; default places the width at five level spacings.
        #[arg(long)]
        coupling: Option<f64>,
        /// Pass threshold in standard errors.
        #[arg(long, default_value_t = 5.0)]
        tolerance: f64,
        /// Pool each tuple over translations through the middle of the spectrum.
        #[arg(long)]
        pool: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run a config and write measured, free and predicted time series.
    Timedep {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Manage the eigensystem cache (location from QFDT_CACHE_DIR).
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    Stats,
    Clear,
}

enum Failure {
    Validation(String),
    Runtime(String),
    Acceptance(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Acceptance(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) | Failure::Acceptance(m) => m,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn overrides(flags: &RunFlags) -> Overrides {
    Overrides {
        seed: flags.seed,
        out_dir: flags.out_dir.clone(),
        budget_gb: flags.budget_gb,
    }
}

fn load(path: &Path, flags: &RunFlags) -> Result<Config, Failure> {
    let cfg = config::load(path, &overrides(flags)).map_err(Failure::Validation)?;
    cfg.spec.check_budget().map_err(|e| Failure::Validation(e.to_string()))?;
    Ok(cfg)
}

/// File name for a series: the instance key with path separators replaced.
fn series_file_name(instance: &str) -> String {
    let safe: String = instance
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '=' { c } else { '_' })
        .collect();
    format!("timeseries_{safe}.csv")
}

fn write_outputs(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    std::fs::create_dir_all(dir).map_err(runtime)?;
    let mut written = vec![dir.join("report.json"), dir.join("rows.csv")];
    std::fs::write(&written[0], report.to_json()).map_err(runtime)?;
    std::fs::write(&written[1], report.rows_csv()).map_err(runtime)?;
    for s in &report.series {
        let path = dir.join(series_file_name(&s.instance));
        std::fs::write(&path, s.to_csv()).map_err(runtime)?;
        written.push(path);
    }
    Ok(written)
}

fn run(path: &Path, flags: &RunFlags, force_series: bool) -> Result<(), Failure> {
    let mut cfg = load(path, flags)?;
    if force_series {
        cfg.spec.analysis.emit_series = true;
    }
    let opts = RunOptions {
        threads: flags.threads,
        cache: cfg.use_cache.then(EigenCache::from_env),
    };
    let report = run_experiment(&cfg.spec, &opts).map_err(runtime)?;
    let written = write_outputs(&report, &cfg.out_dir)?;
    let flagged = report.rows.iter().filter(|r| r.is_flagged()).count();
    println!(
        "{}",
        json!({
            "kind": report.kind,
            "rows": report.rows.len(),
            "flagged_rows": flagged,
            "config_hash": report.provenance.config_hash,
            "files": written,
        })
    );
    Ok(())
}

fn validate(path: &Path, flags: &RunFlags) -> Result<(), Failure> {
    let cfg = load(path, flags)?;
    println!(
        "{}",
        json!({
            "valid": true,
            "kind": cfg.spec.kind,
            "max_dimension": cfg.spec.max_dimension(),
            "memory_estimate_gb": cfg.spec.memory_estimate_bytes() / 1e9,
            "config_hash": cfg.spec.hash(),
        })
    );
    Ok(())
}

fn oracle(spec: OracleSpec, threads: Option<usize>) -> Result<(), Failure> {
    let body = || oracle_check(&spec);
    let report = match threads {
        Some(t) => with_threads(t, body).map_err(runtime)?,
        None => body(),
    }
    .map_err(runtime)?;
    for row in &report.rows {
        println!(
            "{}",
            json!({
                "tuple": row.tuple,
                "theory": row.theory,
                "empirical": row.empirical,
                "standard_error": row.standard_error,
                "z": row.z,
                "pass": row.pass,
            })
        );
    }
    let failed = report.rows.iter().filter(|r| !r.pass).count();
    println!(
        "{}",
        json!({
            "passed": report.passed,
            "failed_tuples": failed,
            "dimension": report.dimension,
            "realizations": report.realizations,
            "coupling": report.coupling,
            "gamma": report.gamma,
            "pooled_levels": report.pooled_levels,
        })
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!(
            "{failed} of {} correlator tuples outside tolerance",
            report.rows.len()
        )))
    }
}

fn cache(action: CacheAction) -> Result<(), Failure> {
    let cache = EigenCache::from_env();
    match action {
        CacheAction::Stats => {
            let s = cache.stats().map_err(runtime)?;
            println!(
                "{}",
                json!({"dir": cache.dir(), "entries": s.entries, "bytes": s.bytes})
            );
        }
        CacheAction::Clear => {
            let removed = cache.clear().map_err(runtime)?;
            println!("{}", json!({"dir": cache.dir(), "removed": removed}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, flags } => run(&config, &flags, false),
        Command::Validate { config, flags } => validate(&config, &flags),
        Command::Timedep { config, flags } => run(&config, &flags, true),
        Command::OracleCheck {
            n,
            realizations,
            seed,
            coupling,
            tolerance,
            pool,
            threads,
        } => {
            let mut spec = OracleSpec::new(n, realizations, seed);
            spec.coupling = coupling;
            spec.tolerance_se = tolerance;
            spec.pool = pool;
            oracle(spec, threads)
        }
        Command::Cache { action } => cache(action),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
