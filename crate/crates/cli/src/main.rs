use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use contiflow::harness::config::{parse_table, parse_value, resolve_alias, set_path};
use contiflow::harness::sweep::{run_sweep, sweep_dir_name, SweepAxis};
use contiflow::harness::{run_scenario, validate_config, write_run, Scenario, ScenarioConfig};
use contiflow::Error;
use log::{error, info, warn};

/// Only the output location comes from the environment.
const OUT_ENV: &str = "CONTIFLOW_OUT";

#[derive(Parser)]
#[command(name = "contiflow", version, about = "Density control experiments on the ring and in the plane")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Scenario configuration (TOML).
    config: PathBuf,
    /// Override a configuration value, e.g. `--set K_p=4` or `--set direct.u_max=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its output directory.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output root [env: CONTIFLOW_OUT, default: runs].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Cartesian product of parameter values over consecutive seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `KEY=v1,v2,...`; repeat for a product.
        #[arg(long = "param", value_name = "KEY=V1,V2,...", required = true)]
        params: Vec<String>,
        /// Seeds per parameter point, counting up from the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Sweep directory [default: <output root>/sweep-<scenario>-<hash>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a configuration without running it.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// List the available scenarios.
    ListScenarios,
}

fn out_root(explicit: Option<PathBuf>) -> PathBuf {
    explicit.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_table(common: &Common) -> contiflow::Result<toml::Table> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| Error::Config(vec![format!("{}: {e}", common.config.display())]))?;
    let mut table = parse_table(&text)?;
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(vec![format!("--set `{kv}` is not of the form key=value")]))?;
        set_path(&mut table, resolve_alias(k.trim()), parse_value(v))?;
    }
    Ok(table)
}

fn load(common: &Common) -> contiflow::Result<ScenarioConfig> {
    validate_config(ScenarioConfig::from_table(load_table(common)?)?)
}

fn report(e: &Error) -> ExitCode {
    match e {
        Error::Config(errs) => {
            for m in errs {
                error!("config: {m}");
            }
            ExitCode::from(2)
        }
        Error::Divergence { t, reason } => {
            error!("diverged at t = {t}: {reason}");
            ExitCode::from(3)
        }
        other => {
            error!("{other}");
            ExitCode::from(1)
        }
    }
}

fn run(common: &Common, out: Option<PathBuf>) -> contiflow::Result<PathBuf> {
    let cfg = load(common)?;
    info!("running {} (seed {})", cfg.scenario, cfg.seed);
    let rec = run_scenario(&cfg)?;
    let dir = write_run(&out_root(out), &cfg, &rec)?;
    let s = &rec.summary;
    println!("{}", dir.display());
    println!(
        "success={} final_error={} steady_state_error={}",
        s.success,
        s.final_error.map(|e| format!("{e:.6e}")).unwrap_or_else(|| "-".into()),
        s.steady_state_error.map(|e| format!("{e:.6e}")).unwrap_or_else(|| "-".into())
    );
    Ok(dir)
}

fn sweep(common: &Common, params: &[String], seeds: usize, out: Option<PathBuf>) -> contiflow::Result<bool> {
    let table = load_table(common)?;
    let axes = params.iter().map(|p| SweepAxis::parse(p)).collect::<contiflow::Result<Vec<_>>>()?;
    let dest = out.unwrap_or_else(|| out_root(None).join(sweep_dir_name(&table, &axes, seeds)));
    let outcome = run_sweep(&table, &axes, seeds, Some(Path::new(&dest)))?;
    let diverged = outcome.rows.iter().filter(|r| r.status == "diverged").count();
    println!("{}", dest.display());
    println!("runs={} diverged={diverged}", outcome.rows.len());
    if diverged > 0 {
        warn!("{diverged} of {} runs diverged; see sweep.csv", outcome.rows.len());
    }
    Ok(diverged == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::ListScenarios => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            for s in Scenario::ALL {
                // a closed pipe (e.g. `| head`) just ends the listing
                if writeln!(out, "{:<24} {}", s.name(), s.description()).is_err() {
                    break;
                }
            }
            ExitCode::SUCCESS
        }
        Command::Validate { common } => match load(&common) {
            Ok(cfg) => {
                println!("{}: ok ({}, dt = {}, horizon = {})", common.config.display(), cfg.scenario, cfg.dt(), cfg.horizon());
                ExitCode::SUCCESS
            }
            Err(e) => report(&e),
        },
        Command::Run { common, out } => match run(&common, out) {
            Ok(_) => ExitCode::SUCCESS,
            Err(e) => report(&e),
        },
        Command::Sweep { common, params, seeds, out } => match sweep(&common, &params, seeds, out) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(3),
            Err(e) => report(&e),
        },
    }
}
