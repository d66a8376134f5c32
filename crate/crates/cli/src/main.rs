//! Command-line runner: single runs, parameter sweeps, topology inspection
//! and config validation.
//!
//! Exit codes: 0 success, 2 invalid config, 3 failure while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sybilwall::aggregation::AggregatorKind;
use sybilwall::config::SimulationConfig;
use sybilwall::engine::{build_topology, metrics_csv, run_simulation, write_outputs, CSV_HEADER};
use sybilwall::topology::Scenario;
use sybilwall::Error;

#[derive(Parser)]
#[command(name = "sybilwall", version, about = "Decentralized learning under Sybil poisoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its metrics CSV and manifest.
    Run(Common),
    /// Run once per value of one parameter and write a summary of final rounds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values, e.g. `0.5,1,2` or `fedavg,sybilwall`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write the generated topology and attack plan as JSON.
    Topology(Common),
    /// Parse and check a config without running it.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Phi,
    Alpha,
    Aggregator,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Phi => "phi",
            Axis::Alpha => "alpha",
            Axis::Aggregator => "aggregator",
        }
    }
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_error(path: &str, message: impl Into<String>) -> Failure {
    Failure::Config(Error::Config {
        path: path.into(),
        message: message.into(),
    })
}

fn load(common: &Common) -> CliResult<SimulationConfig> {
    let mut cfg = SimulationConfig::load(&common.config).map_err(Failure::Config)?;
    cfg.apply_env().map_err(Failure::Config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = Some(w);
    }
    if let Some(dir) = &common.out_dir {
        cfg.output.dir = dir.clone();
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn run(cfg: &SimulationConfig, dir: &Path) -> CliResult<String> {
    let result = run_simulation(cfg)?;
    let paths = write_outputs(cfg, &result.metrics, dir)?;
    let last = result.metrics.last().map(|m| {
        let attack = m.mean_attack_score.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        format!("accuracy {:.4}, attack score {attack}", m.mean_accuracy)
    });
    println!(
        "{}: {} rounds, {}",
        paths.metrics.display(),
        result.metrics.len(),
        last.unwrap_or_else(|| "no rounds".into())
    );
    Ok(metrics_csv(&result.metrics))
}

fn with_value(base: &SimulationConfig, axis: Axis, value: &str) -> CliResult<SimulationConfig> {
    let mut cfg = base.clone();
    let number = || {
        value
            .parse::<f64>()
            .map_err(|_| config_error(axis.name(), format!("`{value}` is not a number")))
    };
    match axis {
        Axis::Phi => match cfg.attack.as_mut() {
            Some(a) => a.phi = number()?,
            None => return Err(config_error("attack", "a phi sweep needs an [attack] section")),
        },
        Axis::Alpha => cfg.partition.alpha = number()?,
        Axis::Aggregator => {
            cfg.aggregator = value
                .parse::<AggregatorKind>()
                .map_err(|e| config_error("aggregator", e.to_string()))?
        }
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn sweep(base: &SimulationConfig, axis: Axis, values: &[String]) -> CliResult<()> {
    // check every value before spending time on any run
    let configs = values
        .iter()
        .map(|v| with_value(base, axis, v).map(|c| (v, c)))
        .collect::<CliResult<Vec<_>>>()?;
    let root = &base.output.dir;
    let mut summary = format!("{},{}\n", axis.name(), CSV_HEADER);
    for (value, cfg) in configs {
        let csv = run(&cfg, &root.join(format!("{}-{value}", axis.name())))?;
        let last = csv.lines().last().unwrap_or_default();
        summary.push_str(&format!("{value},{last}\n"));
    }
    std::fs::create_dir_all(root).map_err(Error::from)?;
    let path = root.join("summary.csv");
    std::fs::write(&path, summary).map_err(Error::from)?;
    println!("{}", path.display());
    Ok(())
}

fn topology(cfg: &SimulationConfig) -> CliResult<()> {
    let (topo, plan) = build_topology(cfg)?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    std::fs::write(dir.join("topology.json"), topo.to_json()?).map_err(Error::from)?;
    std::fs::write(dir.join("plan.json"), plan.to_json()?).map_err(Error::from)?;
    println!(
        "{} honest, {} sybils, {} attack edges, scenario {}",
        topo.honest_count(),
        topo.sybil_count(),
        plan.attack_edges.len(),
        Scenario::classify(cfg.phi())
    );
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = load(&common)?;
            run(&cfg, &cfg.output.dir).map(drop)
        }
        Command::Sweep { common, axis, values } => sweep(&load(&common)?, axis, &values),
        Command::Topology(common) => topology(&load(&common)?),
        Command::Validate(common) => {
            load(&common)?;
            println!("ok");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
