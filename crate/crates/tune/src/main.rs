use std::fs::File;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use gaintune::action_space::Action;
use gaintune::clf_plant::{gains_from_values, simulate_episode, Controller, GainProfile, PlantConfig};
use gaintune::session::{run_batch, write_csv, BatchMode, SessionConfig};
use gaintune_cli::{router, Service};

#[derive(Parser)]
#[command(name = "tune", about = "Preference-based tuning of CLF-QP controller gains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP session service.
    Serve {
        /// Session config used at startup and for empty `POST /session` bodies.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory for session logs.
        #[arg(long, default_value = "sessions")]
        log_dir: PathBuf,
        /// Continue the session recorded in this log instead of starting one.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Simulated learning curves against the synthetic oracle, as CSV.
    Batch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// pref, pref+ord, random or all.
        #[arg(long, default_value = "all")]
        mode: String,
        /// Probability that simulated feedback is correct.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate one plant episode and print its metrics as JSON.
    Episode {
        /// Action values as a JSON array, or an action object with `values`.
        #[arg(long)]
        gains: String,
        #[arg(long, default_value = "toy")]
        profile: String,
        #[arg(long, default_value = "plus")]
        controller: String,
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
        /// Session config whose `[plant]` table sets up the episode.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Serve {
            config,
            port,
            log_dir,
            resume,
        } => serve(config.as_deref(), port, log_dir, resume.as_deref()),
        Command::Batch {
            config,
            runs,
            iters,
            mode,
            noise,
            seed,
            out,
        } => batch(&config, runs, iters, &mode, noise, seed, out.as_deref()),
        Command::Episode {
            gains,
            profile,
            controller,
            duration,
            config,
        } => episode(&gains, &profile, &controller, duration, config.as_deref()),
    }
}

fn serve(config: Option<&Path>, port: u16, log_dir: PathBuf, resume: Option<&Path>) -> Result<()> {
    let default_config = config.map(SessionConfig::load).transpose()?;
    let config_dir = config
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut service = Service::new(default_config.clone(), config_dir, Some(log_dir));
    if let Some(path) = resume {
        service.resume(path)?;
    } else if let Some(cfg) = default_config {
        service.start(cfg)?;
    }
    let shared = Arc::new(Mutex::new(service));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(shared)).await?;
        Ok(())
    })
}

fn batch(
    config: &Path,
    runs: usize,
    iters: usize,
    mode: &str,
    noise: Option<f64>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    if runs == 0 || iters == 0 {
        bail!("--runs and --iters must be positive");
    }
    let mut cfg = SessionConfig::load(config)?;
    if let Some(p) = noise {
        cfg.oracle.correct_prob = p;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let modes = match mode {
        "all" => BatchMode::ALL.to_vec(),
        name => vec![BatchMode::parse(name).ok_or_else(|| anyhow!("unknown mode {name}"))?],
    };
    let points = run_batch(&cfg, &modes, runs, iters)?;
    match out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(&points, BufWriter::new(file))?;
        }
        None => write_csv(&points, io::stdout().lock())?,
    }
    for m in &modes {
        if let Some(last) = points.iter().rfind(|p| p.mode == m.name()) {
            eprintln!("{}: final mean error {:.4} ± {:.4}", m.name(), last.mean_error, last.stderr);
        }
    }
    Ok(())
}

fn episode(gains: &str, profile: &str, controller: &str, duration: f64, config: Option<&Path>) -> Result<()> {
    let profile = GainProfile::parse(profile).ok_or_else(|| anyhow!("unknown profile {profile}"))?;
    let controller = Controller::parse(controller).ok_or_else(|| anyhow!("unknown controller {controller}"))?;
    let value: serde_json::Value = serde_json::from_str(gains).context("--gains is not JSON")?;
    let values: Vec<f64> = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        serde_json::from_value::<Action>(value).context("--gains needs an array or an action")?.values
    };
    let plant = match config {
        Some(path) => SessionConfig::load(path)?.plant,
        None => PlantConfig::default(),
    };
    let gains = gains_from_values(&values, profile)?;
    let metrics = simulate_episode(&gains, &plant, duration, controller)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}
