//! `brlhf`: run experiments, alpha sweeps, and human-answered sessions
//! through the brlhf service.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brlhf_client::{Client, ClientError};
use brlhf_core::harness::{
    apply_overrides, emit_csv, parse_csv, write_sweep_csv, JsonlAuditWriter, RunConfig, RunObserver, RunResult, SweepRequest,
    TerminalStatus, TrajectoryRow,
};
use brlhf_core::math::lower_median;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "brlhf", version, about = "Active preference optimization experiments")]
struct Cli {
    /// Service root URL. Without it an embedded service is started on a
    /// loopback port for the duration of the command.
    #[arg(long, global = true, env = "BRLHF_SERVER")]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set acquisition.alpha=0.25`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment with a synthetic oracle.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trajectory CSV path; overrides `output` in the config.
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// JSON-lines audit log path; overrides `audit_log` in the config.
        #[arg(long)]
        audit_log: Option<PathBuf>,
    },
    /// Run an alpha x seed grid and summarize queries-to-target.
    Sweep {
        /// The config holds `base` (a run config), `alphas`, `seeds`, and
        /// optionally `target`.
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Summary CSV path; the table is printed to stdout either way.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Serve the HTTP API in the foreground; with a config, also start a
    /// human-answered session.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Summarize trajectory CSV files.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Error threshold for queries-to-target.
        #[arg(long, default_value_t = 0.1)]
        target: f64,
    },
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }

    fn other(message: impl ToString) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.to_string(),
        }
    }
}

impl From<brlhf_core::Error> for Failure {
    fn from(e: brlhf_core::Error) -> Self {
        use brlhf_core::Error::*;
        match e {
            InvalidConfig(_) | Parse(_) | Json(_) => Self::config(e),
            NonFinite(_) => Self {
                code: EXIT_NUMERICAL,
                message: e.to_string(),
            },
            _ => Self::other(e),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e.status() {
            Some(s) if s.is_client_error() => Self::config(e),
            _ => Self::other(e),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

async fn connect(server: Option<String>) -> CliResult<Client> {
    match server {
        Some(url) => Ok(Client::new(url)),
        None => {
            let addr = brlhf_service::spawn(SocketAddr::from(([127, 0, 0, 1], 0)))
                .await
                .map_err(|e| Failure::other(format!("cannot start embedded service: {e}")))?;
            Ok(Client::new(format!("http://{addr}")))
        }
    }
}

fn read_doc(args: &ConfigArgs) -> CliResult<Value> {
    let mut doc = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    apply_overrides(&mut doc, &args.sets)?;
    Ok(doc)
}

fn write_audit(result: &RunResult, path: &Path) -> CliResult<()> {
    let mut w = JsonlAuditWriter::create(path)?;
    for entry in &result.audit {
        w.on_duel(entry);
    }
    w.finish()?;
    Ok(())
}

fn describe(result: &RunResult) -> String {
    let last = result.rows.last();
    format!(
        "status={} queries={} best_latent={} abs_error={}",
        format!("{:?}", result.status).to_lowercase(),
        last.map_or(0, |r| r.queries),
        last.map_or("n/a".into(), |r| format!("{:.6}", r.best_latent)),
        last.map_or("n/a".into(), |r| format!("{:.6}", r.abs_error)),
    )
}

async fn cmd_run(server: Option<String>, args: ConfigArgs, output: Option<PathBuf>, audit_log: Option<PathBuf>) -> CliResult<u8> {
    let cfg = RunConfig::from_value(read_doc(&args)?)?;
    let client = connect(server).await?;
    let result = client.run(&cfg).await?;
    if let Some(path) = output.or_else(|| cfg.output.as_ref().map(PathBuf::from)) {
        emit_csv(&result, &path)?;
    }
    if let Some(path) = audit_log.or_else(|| cfg.audit_log.as_ref().map(PathBuf::from)) {
        write_audit(&result, &path)?;
    }
    println!("{}", describe(&result));
    if let Some(m) = &result.message {
        eprintln!("{m}");
    }
    Ok(if result.status == TerminalStatus::Numerical {
        EXIT_NUMERICAL
    } else {
        0
    })
}

async fn cmd_sweep(server: Option<String>, args: ConfigArgs, output: Option<PathBuf>) -> CliResult<u8> {
    let req: SweepRequest = serde_json::from_value(read_doc(&args)?).map_err(Failure::config)?;
    req.base.validate()?;
    let client = connect(server).await?;
    let summary = client.sweep(&req).await?;
    let mut table = Vec::new();
    write_sweep_csv(&summary, &mut table)?;
    print!("{}", String::from_utf8_lossy(&table));
    if let Some(path) = output {
        std::fs::write(&path, &table).map_err(|e| Failure::other(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(0)
}

async fn cmd_serve(args: ConfigArgs, bind: SocketAddr) -> CliResult<u8> {
    let session = if args.config.is_some() || !args.sets.is_empty() {
        Some(RunConfig::from_value(read_doc(&args)?)?)
    } else {
        None
    };
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| Failure::other(format!("cannot bind {bind}: {e}")))?;
    let addr = listener.local_addr().map_err(Failure::other)?;
    println!("listening on http://{addr}");
    let server = tokio::spawn(brlhf_service::serve(listener));
    if let Some(cfg) = session {
        let started = Client::new(format!("http://{addr}")).start_session(&cfg).await?;
        println!(
            "session started: method={} budget={} seed={}",
            format!("{:?}", started.method).to_lowercase(),
            started.budget,
            started.seed
        );
    }
    server
        .await
        .map_err(Failure::other)?
        .map_err(|e| Failure::other(format!("server stopped: {e}")))?;
    Ok(0)
}

fn cmd_report(files: &[PathBuf], target: f64) -> CliResult<u8> {
    let mut finals = Vec::new();
    println!("file,rows,queries,final_abs_error,queries_to_target,censored");
    for path in files {
        let text = std::fs::File::open(path).map_err(|e| Failure::other(format!("cannot open {}: {e}", path.display())))?;
        let rows: Vec<TrajectoryRow> = parse_csv(std::io::BufReader::new(text))?;
        let last = rows.last();
        let queries = last.map_or(0, |r| r.queries);
        let hit = rows.iter().find(|r| r.abs_error < target);
        println!(
            "{},{},{},{},{},{}",
            path.display(),
            rows.len(),
            queries,
            last.map_or("".into(), |r| r.abs_error.to_string()),
            hit.map_or(queries, |r| r.queries),
            hit.is_none()
        );
        if let Some(r) = last {
            finals.push(r.abs_error);
        }
    }
    if !finals.is_empty() {
        println!("# median final_abs_error over {} runs: {}", finals.len(), lower_median(&finals));
    }
    Ok(0)
}

async fn dispatch(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Command::Run { cfg, output, audit_log } => cmd_run(cli.server, cfg, output, audit_log).await,
        Command::Sweep { cfg, output } => cmd_sweep(cli.server, cfg, output).await,
        Command::Serve { cfg, bind } => cmd_serve(cfg, bind).await,
        Command::Report { files, target } => cmd_report(&files, target),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli).await {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
