use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use wasm_operator_core::workload::{RunSpec, Variant};
use wasm_operator_core::{UnloadMode, UnloadPolicy};
use wasm_operator_stats::report::{report, summary_csv, write_report, ReportError};

mod bench;
mod config;
mod run;

use config::RunConfig;

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    error: anyhow::Error,
}

impl CliError {
    pub fn usage(error: anyhow::Error) -> Self {
        CliError { code: 2, error }
    }

    pub fn fault(error: anyhow::Error) -> Self {
        CliError { code: 1, error }
    }
}

#[derive(Parser)]
#[command(name = "wasm-operator", version, about = "Host WebAssembly Kubernetes controllers on demand")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnloadArg {
    Never,
    EveryTurn,
    IdleTimeout,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    /// Write summary.csv and the plot series into the directory.
    Csv,
    /// Print the summary table to stdout.
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Run every module in a directory until interrupted.
    #[command(after_help = config::RUN_KEYS_HELP)]
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        modules_dir: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
        #[arg(long)]
        metrics_path: Option<PathBuf>,
        #[arg(long)]
        listen: Option<std::net::SocketAddr>,
        #[arg(long, value_enum)]
        unload: Option<UnloadArg>,
        #[arg(long)]
        idle_timeout_ms: Option<u64>,
        #[arg(long)]
        instances_per_module: Option<u32>,
        /// Stop after this many seconds instead of waiting for a signal.
        #[arg(long)]
        run_for_secs: Option<f64>,
        /// Print the effective configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run the synthetic chain benchmark.
    #[command(after_help = bench::BENCH_KEYS_HELP)]
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        runs_per_config: Option<u32>,
        #[arg(long)]
        idle_observation_secs: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Summarize a directory of benchmark runs.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ReportFormat,
        /// Where to write the report files; defaults to the runs directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(hide = true)]
    BenchRun {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            config,
            modules_dir,
            cache_dir,
            snapshot_dir,
            metrics_path,
            listen,
            unload,
            idle_timeout_ms,
            instances_per_module,
            run_for_secs,
            print_config,
        } => {
            let mut c = RunConfig::load(&config).map_err(CliError::usage)?;
            c.apply_env();
            let cwd = PathBuf::from(".");
            for (slot, flag) in [
                (&mut c.modules_dir, modules_dir),
                (&mut c.cache_dir, cache_dir),
                (&mut c.snapshot_dir, snapshot_dir),
                (&mut c.metrics_path, metrics_path),
            ] {
                if let Some(p) = flag {
                    *slot = cwd.join(p);
                }
            }
            if listen.is_some() {
                c.listen = listen;
            }
            if let Some(mode) = unload {
                c.unload.mode = match mode {
                    UnloadArg::Never => UnloadMode::Never,
                    UnloadArg::EveryTurn => UnloadMode::EveryTurn,
                    UnloadArg::IdleTimeout => UnloadMode::IdleTimeout,
                };
            }
            if let Some(ms) = idle_timeout_ms {
                c.unload = UnloadPolicy { idle_timeout: Duration::from_millis(ms), ..c.unload };
            }
            if let Some(n) = instances_per_module {
                c.instances_per_module = n;
            }
            c.validate().map_err(CliError::usage)?;
            if print_config {
                println!("{}", serde_json::to_string_pretty(&c).expect("config serializes"));
                return Ok(());
            }
            let run_for = match run_for_secs {
                Some(s) if !(s.is_finite() && s > 0.0) => {
                    return Err(CliError::usage(anyhow::anyhow!("--run-for-secs must be positive")))
                }
                s => s.map(Duration::from_secs_f64),
            };
            run::cmd_run(c, run_for)
        }
        Command::Bench { config, out, cache_dir, rounds, runs_per_config, idle_observation_secs, variants } => {
            let mut c = bench::load_config(&config)?;
            if let Some(r) = rounds {
                c.rounds = r;
            }
            if let Some(r) = runs_per_config {
                c.runs_per_config = r;
            }
            if let Some(s) = idle_observation_secs {
                c.idle_observation_secs = s;
            }
            if let Some(v) = variants {
                c.variants = v
                    .iter()
                    .map(|name| serde_json::from_value::<Variant>(serde_json::Value::String(name.clone())))
                    .collect::<Result<_, _>>()
                    .context("--variants")
                    .map_err(CliError::usage)?;
            }
            c.validate().map_err(|e| CliError::usage(e.into()))?;
            bench::cmd_bench(c, &out, cache_dir)
        }
        Command::BenchRun { config, spec, out, cache_dir } => {
            let c = bench::load_config(&config)?;
            let spec: RunSpec = serde_json::from_str(&spec).context("parsing --spec").map_err(CliError::usage)?;
            bench::cmd_bench_run(c, spec, &out, cache_dir)
        }
        Command::Report { dir, format, out } => {
            let bundle = report(&dir).map_err(|e| match e {
                ReportError::NoRuns(_) => CliError::usage(e.into()),
                ReportError::Io { ref path, .. } if path == &dir => CliError::usage(e.into()),
                e => CliError::fault(e.into()),
            })?;
            match format {
                ReportFormat::Csv => {
                    let written = write_report(&bundle, out.as_deref().unwrap_or(&dir))
                        .map_err(|e| CliError::fault(e.into()))?;
                    for path in written {
                        println!("{}", path.display());
                    }
                }
                ReportFormat::Table => print!("{}", summary_csv(&bundle.summary)),
            }
            for note in &bundle.notes {
                eprintln!("note: {note}");
            }
            Ok(())
        }
    }
}
