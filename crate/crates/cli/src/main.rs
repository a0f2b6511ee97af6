use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use shardflow::foreman::ForemanConfig;
use shardflow::model::{ExecutionMode, TelemetrySnapshot};
use shardflow::net::{run_worker, spawn_foreman, WorkerOptions};
use shardflow::protocol::Message;
use shardflow::scheduler::RankingStrategy;
use shardflow::sdk::{
    build_submission, render_result, submit_and_await, write_affine_stages, SdkError,
};
use shardflow::sim::{render_report, run_experiment, FleetConfig, ReportFormat};
use shardflow::transport::{Codec, PayloadStore, DEFAULT_TAU_WS};
use shardflow::worker::{
    AffineExecutor, IdentityExecutor, SimulatedLoad, StageExecutor, WorkerAgent, WorkerConfig,
};

#[derive(Parser)]
#[command(
    name = "shardflow",
    version,
    about = "Pipeline-parallel inference over a fleet of small workers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the foreman service.
    Foreman {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        /// Payload store shared with the workers.
        #[arg(long, default_value = "store")]
        store_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU_WS)]
        tau_ws: u64,
        #[arg(long, default_value = "entropy_weighted_sum")]
        strategy: RankingStrategy,
        #[arg(long, default_value_t = 30_000)]
        heartbeat_ms: u64,
        #[arg(long, default_value_t = 3)]
        staleness_multiplier: u32,
    },
    /// Run a worker agent.
    Worker {
        #[arg(long)]
        foreman: String,
        #[arg(long)]
        worker_id: String,
        #[arg(long)]
        cache_dir: PathBuf,
        #[arg(long, default_value_t = 30_000)]
        heartbeat_ms: u64,
        #[arg(long, default_value = "store")]
        store_dir: PathBuf,
        /// Report fixed load times instead of measured ones, e.g. `cold=4000,warm=600`.
        #[arg(long, value_parser = parse_simulated_load)]
        simulate_load: Option<SimulatedLoad>,
        /// JSON array of telemetry rows, reported in turn.
        #[arg(long)]
        telemetry_profile: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ExecutorKind::Affine)]
        executor: ExecutorKind,
        #[arg(long, default_value_t = DEFAULT_TAU_WS)]
        tau_ws: u64,
        #[arg(long, default_value = "zlib", value_parser = parse_codec)]
        codec: Codec,
        #[arg(long)]
        gpu: bool,
        /// Disk cache budget in bytes, enforced between jobs.
        #[arg(long)]
        cache_budget: Option<u64>,
    },
    /// Submit a job and wait for its result.
    Submit {
        #[arg(long)]
        foreman: String,
        /// Stage artefact files in pipeline order; each needs a `<file>.json` manifest.
        #[arg(long = "stage", required = true)]
        stages: Vec<PathBuf>,
        #[arg(long, default_value = "streaming")]
        mode: ExecutionMode,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value_t = 600)]
        timeout_s: u64,
        /// Print the raw JOB_RESULT frame.
        #[arg(long)]
        json: bool,
        #[arg(long, default_value = "zlib", value_parser = parse_codec)]
        codec: Codec,
    },
    /// Run a virtual-time experiment.
    Sim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write reference affine stage files with manifests.
    GenStages {
        #[arg(long)]
        out_dir: PathBuf,
        /// Input width followed by each stage's output width.
        #[arg(long, value_delimiter = ',', default_value = "8,16,16,2")]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecutorKind {
    Affine,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Streaming,
    Barrier,
    Both,
}

fn parse_codec(s: &str) -> Result<Codec, String> {
    Codec::parse(s).map_err(|e| e.to_string())
}

fn parse_simulated_load(s: &str) -> Result<SimulatedLoad, String> {
    let mut cold = None;
    let mut warm = None;
    for part in s.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{part}`"))?;
        let v: u64 = v.trim().parse().map_err(|e| format!("`{v}`: {e}"))?;
        match k.trim() {
            "cold" => cold = Some(v),
            "warm" => warm = Some(v),
            other => return Err(format!("unknown key `{other}`")),
        }
    }
    match (cold, warm) {
        (Some(cold_ms), Some(warm_ms)) => Ok(SimulatedLoad { cold_ms, warm_ms }),
        _ => Err("need both cold=<ms> and warm=<ms>".into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Foreman {
            listen,
            store_dir,
            tau_ws,
            strategy,
            heartbeat_ms,
            staleness_multiplier,
        } => {
            let store = PayloadStore::open(&store_dir).context("opening payload store")?;
            let config = ForemanConfig {
                tau_ws,
                strategy,
                heartbeat_interval_ms: heartbeat_ms,
                staleness_multiplier,
            };
            let handle = spawn_foreman(&listen, config, store)
                .with_context(|| format!("binding {listen}"))?;
            info!("serving on {}", handle.local_addr());
            handle.join();
            Ok(())
        }
        Cmd::Worker {
            foreman,
            worker_id,
            cache_dir,
            heartbeat_ms,
            store_dir,
            simulate_load,
            telemetry_profile,
            executor,
            tau_ws,
            codec,
            gpu,
            cache_budget,
        } => {
            let profile: Vec<TelemetrySnapshot> = match telemetry_profile {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", p.display()))?
                }
                None => Vec::new(),
            };
            for t in &profile {
                t.validate()
                    .map_err(|e| anyhow!("telemetry profile: {e}"))?;
            }
            let config = WorkerConfig {
                tau_ws,
                codec,
                gpu_available: gpu,
                cache_budget_bytes: cache_budget,
                simulate_load,
                telemetry_profile: profile,
                ..WorkerConfig::new(worker_id, cache_dir)
            };
            let executor: Box<dyn StageExecutor> = match executor {
                ExecutorKind::Affine => Box::new(AffineExecutor),
                ExecutorKind::Identity => Box::new(IdentityExecutor),
            };
            let store = PayloadStore::open(&store_dir).context("opening payload store")?;
            let agent = WorkerAgent::new(config, executor, store)?;
            let addr = std::net::ToSocketAddrs::to_socket_addrs(&foreman)?
                .next()
                .ok_or_else(|| anyhow!("cannot resolve {foreman}"))?;
            let opts = WorkerOptions {
                heartbeat_ms,
                ..WorkerOptions::default()
            };
            run_worker(addr, agent, opts, Arc::new(AtomicBool::new(false)))?;
            Ok(())
        }
        Cmd::Submit {
            foreman,
            stages,
            mode,
            inputs,
            timeout_s,
            json,
            codec,
        } => {
            let sub = build_submission(&stages, mode, &inputs, codec)?;
            match submit_and_await(sub, &foreman, Duration::from_secs(timeout_s)) {
                Ok(result) => {
                    if json {
                        println!("{}", Message::JobResult(result).to_frame());
                    } else {
                        print!("{}", render_result(&result));
                    }
                    Ok(())
                }
                Err(SdkError::JobRejected(reason)) => bail!("job rejected: {reason}"),
                Err(e) => Err(e.into()),
            }
        }
        Cmd::Sim {
            config,
            mode,
            seed,
            format,
            out,
        } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = FleetConfig::from_json(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let modes: &[ExecutionMode] = match mode {
                ModeArg::Streaming => &[ExecutionMode::Streaming],
                ModeArg::Barrier => &[ExecutionMode::Barrier],
                ModeArg::Both => &[ExecutionMode::Streaming, ExecutionMode::Barrier],
            };
            let report = run_experiment(&cfg, modes)?;
            let rendered = render_report(&report, format);
            match out {
                Some(p) => std::fs::write(&p, rendered)
                    .with_context(|| format!("writing {}", p.display()))?,
                None => print!("{rendered}"),
            }
            Ok(())
        }
        Cmd::GenStages {
            out_dir,
            widths,
            seed,
        } => {
            for p in write_affine_stages(&out_dir, seed, &widths)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}
