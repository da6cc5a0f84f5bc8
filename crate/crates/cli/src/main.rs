use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use driftctl_cli::{bootstrap_service, load_job, render_report, run_cmd, simulate_cmd, synth_cmd, CliError};
use driftctl_core::config::Placement;
use driftctl_core::pipeline::TrainingMode;
use driftctl_gateway::{router, serve, Clock, Hub};

#[derive(Parser)]
#[command(name = "driftctl", version, about = "Drift-triggered continual learning for model services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sim,
    Real,
}

impl From<Mode> for TrainingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Sim => TrainingMode::Sim,
            Mode::Real => TrainingMode::Real,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured cluster workload and write a latency/utilization trace.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// colocate_fifo, dedicated_worker or inference_priority; defaults to the config.
        #[arg(long)]
        policy: Option<Placement>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a labeled stream CSV through a fresh service.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long, default_value = "driftctl-run")]
        workdir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Sim)]
        mode: Mode,
    },
    /// Print what happened in one update job of a previous run.
    Report {
        #[arg(long)]
        job: u64,
        #[arg(long, default_value = "driftctl-run")]
        workdir: PathBuf,
        /// Print the stored JSON instead of the summary.
        #[arg(long)]
        json: bool,
    },
    /// Write a seeded synthetic stream CSV.
    Synth {
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 5000)]
        len: usize,
        /// Row where two new classes appear; omit for a stationary stream.
        #[arg(long)]
        shift_at: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API. Each config is bootstrapped from the history CSV at the same position.
    Serve {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long = "history", required = true)]
        histories: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of dashboard files served under /ui.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Sim)]
        mode: Mode,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("driftctl: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Writes to stdout; a closed pipe (`| head`) ends output quietly.
fn emit(text: &str) -> std::io::Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => other,
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> std::io::Result<()> {
    emit(&(serde_json::to_string_pretty(v).expect("plain data always serializes") + "\n"))
}

fn run(cmd: Command) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Command::Simulate { config, policy, seed, out } => print_json(&simulate_cmd(&config, policy, seed, &out)?)?,
        Command::Run { config, stream, workdir, seed, mode } => {
            print_json(&run_cmd(&config, &stream, &workdir, seed, mode.into())?)?
        }
        Command::Report { job, workdir, json } => {
            let j = load_job(&workdir, job)?;
            if json {
                print_json(&j)?;
            } else {
                emit(&render_report(&j))?;
            }
        }
        Command::Synth { dim, len, shift_at, seed, out } => synth_cmd(dim, len, shift_at, seed, &out)?,
        Command::Serve { configs, histories, addr, ui_dir, seed, mode } => {
            if configs.len() != histories.len() {
                return Err("pass one --history per --config".into());
            }
            let services = configs
                .iter()
                .zip(&histories)
                .map(|(c, h)| bootstrap_service(c, h, seed, mode.into()))
                .collect::<Result<Vec<_>, CliError>>()?;
            let app = router(Hub::spawn(services, Clock::Wall), ui_dir);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("driftctl: listening on http://{}", listener.local_addr()?);
                serve(listener, app).await
            })?;
        }
    }
    Ok(())
}
