use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedslice_core::clustering::{dbscan, distance_matrix, write_labels_csv};
use fedslice_core::domain::ScenarioConfig;
use fedslice_core::mobility::read_demand_csv;
use fedslice_core::{validate_config, Error, StrategyRegistry, World};
use serde::Serialize;

const LOG_ENV: &str = "FEDSLICE_LOG";

#[derive(Debug, Parser)]
#[command(name = "fedslice", version, about = "Federated DDQN RAN slicing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write metrics, overhead and latency CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Save all agent models every N episodes (0 disables).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Cluster external demand traces per slice with DTW and DBSCAN.
    Cluster {
        /// CSV with columns interval_index,bs_id,slice_id,bits.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        min: usize,
        /// Sakoe-Chiba half-width in samples; 0 means unbounded.
        #[arg(long, default_value_t = 0)]
        window: usize,
        /// Labels CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    seed: u64,
    strategy: &'a str,
    started_unix_s: u64,
    code_version: &'static str,
    outputs: Vec<String>,
    config: &'a ScenarioConfig,
}

/// Failure with its process exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn input(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed, strategy, episodes, checkpoint_every } => {
            cmd_run(&config, &out, seed, strategy, episodes, checkpoint_every)
        }
        Command::Cluster { input, eps, min, window, out } => cmd_cluster(&input, eps, min, window, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::input(anyhow::anyhow!("cannot read `{}`: no such file", path.display())))
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create `{}`", path.display()))?;
    Ok(BufWriter::new(f))
}

fn cmd_run(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    strategy: Option<String>,
    episodes: Option<usize>,
    checkpoint_every: usize,
) -> Result<(), Failure> {
    require_file(config)?;
    let mut cfg = ScenarioConfig::load(config).with_context(|| format!("in `{}`", config.display()))?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    if let Some(s) = strategy {
        cfg.strategy = s;
    }
    if let Some(e) = episodes {
        cfg.total_episodes = e;
    }
    let cfg = validate_config(cfg).map_err(|issues| anyhow::Error::new(Error::Config(issues)))?;

    std::fs::create_dir_all(out).with_context(|| format!("cannot create `{}`", out.display()))?;
    let strategy = StrategyRegistry::builtin().get(&cfg.strategy).map_err(anyhow::Error::new)?;
    let mut outputs = vec!["manifest.json", "metrics.csv", "overhead.csv", "latency_samples.csv"];
    if strategy.uses_clusters() {
        outputs.push("clusters.csv");
    }
    if checkpoint_every > 0 {
        outputs.push("checkpoints/");
    }
    let manifest = RunManifest {
        seed: cfg.rng_seed,
        strategy: &cfg.strategy,
        started_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        code_version: env!("CARGO_PKG_VERSION"),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        config: &cfg,
    };
    serde_json::to_writer_pretty(create(&out.join("manifest.json"))?, &manifest).context("writing manifest")?;

    let mut world = World::new(cfg.clone(), strategy).map_err(anyhow::Error::new)?;
    let mut metrics = world.new_metrics();
    let n = cfg.total_episodes;
    for e in 0..n {
        world.run_episode(e, &mut metrics).map_err(anyhow::Error::new)?;
        if checkpoint_every > 0 && ((e + 1) % checkpoint_every == 0 || e + 1 == n) {
            let dir = out.join("checkpoints").join(format!("episode-{:05}", e + 1));
            world.save_checkpoints(&dir, (e + 1) as u32).map_err(anyhow::Error::new)?;
        }
        if (e + 1) % 50 == 0 || e + 1 == n {
            log::info!("episode {}/{}", e + 1, n);
        }
    }
    if metrics.capacity_violations > 0 || metrics.conservation_failures > 0 {
        log::warn!(
            "{} capacity violations, {} conservation failures",
            metrics.capacity_violations,
            metrics.conservation_failures
        );
    }

    metrics.write_metrics_csv(create(&out.join("metrics.csv"))?).map_err(anyhow::Error::new)?;
    metrics.write_overhead_csv(create(&out.join("overhead.csv"))?).map_err(anyhow::Error::new)?;
    metrics.write_latency_csv(create(&out.join("latency_samples.csv"))?).map_err(anyhow::Error::new)?;
    if world.strategy.uses_clusters() {
        metrics.write_clusters_csv(create(&out.join("clusters.csv"))?).map_err(anyhow::Error::new)?;
    }
    log::info!("wrote {}", out.display());
    Ok(())
}

fn cmd_cluster(input: &Path, eps: f64, min: usize, window: usize, out: Option<&Path>) -> Result<(), Failure> {
    require_file(input)?;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(anyhow::anyhow!("--eps must be positive, got {eps}").into());
    }
    if min == 0 {
        return Err(anyhow::anyhow!("--min must be at least 1").into());
    }
    let f = File::open(input).with_context(|| format!("cannot open `{}`", input.display()))?;
    let series = read_demand_csv(BufReader::new(f)).with_context(|| format!("in `{}`", input.display()))?;

    let mut slices: Vec<usize> = series.iter().map(|s| s.slice_id).collect();
    slices.dedup();
    let mut rows = Vec::new();
    for slice in slices {
        let group: Vec<_> = series.iter().filter(|s| s.slice_id == slice).cloned().collect();
        let d = distance_matrix(&group, window).with_context(|| format!("slice {slice}"))?;
        let assignment = dbscan(&d, eps, min);
        log::info!("slice {slice}: {} clusters over {} series", assignment.n_clusters, group.len());
        rows.extend(group.iter().zip(&assignment.labels).map(|(s, &l)| (slice, s.bs_id, l)));
    }
    match out {
        Some(p) => write_labels_csv(create(p)?, &rows),
        None => write_labels_csv(std::io::stdout().lock(), &rows),
    }
    .map_err(anyhow::Error::new)?;
    Ok(())
}
