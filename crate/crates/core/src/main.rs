use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, RwLock};

use clap::{Args, Parser, Subcommand, ValueEnum};

use ubfsim::ident::{IdentServer, DEFAULT_PORT};
use ubfsim::sim::{check_isolation, load_scenario, run, write_trace};

#[derive(Parser)]
#[command(name = "ubfsim", version, about = "User-separation cluster simulator and isolation checker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and check the resulting trace.
    Run(RunArgs),
    /// Same as `run`.
    Check(RunArgs),
    /// Serve identity queries over TCP from a registry file.
    IdentServe(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    #[arg(long, env = "UBFSIM_SEED", default_value_t = 0)]
    seed: u64,
    /// Write the JSON Lines trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    report: ReportFormat,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Host entry to answer for; defaults to the first one.
    #[arg(long)]
    host: Option<String>,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
}

fn run_cmd(args: RunArgs) -> Result<ExitCode, String> {
    let scenario = load_scenario(&args.scenario).map_err(|e| e.to_string())?;
    let trace = run(&scenario, args.seed).map_err(|e| e.to_string())?;
    if let Some(path) = &args.trace {
        let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        write_trace(&trace, BufWriter::new(file)).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let report = check_isolation(&scenario, &trace).map_err(|e| e.to_string())?;
    let text = match args.report {
        ReportFormat::Text => report.to_text(),
        ReportFormat::Json => report.to_json() + "\n",
    };
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).map_err(|e| e.to_string())?;
    Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn serve_cmd(args: ServeArgs) -> Result<ExitCode, String> {
    let scenario = load_scenario(&args.registry).map_err(|e| e.to_string())?;
    let registry = scenario.registry(args.host.as_deref()).map_err(|e| e.to_string())?;
    let server = IdentServer::bind((args.bind.as_str(), args.port), Arc::new(RwLock::new(registry)))
        .map_err(|e| format!("bind {}:{}: {e}", args.bind, args.port))?;
    let addr = server.local_addr().map_err(|e| e.to_string())?;
    println!("listening on {addr}");
    std::io::stdout().flush().map_err(|e| e.to_string())?;
    server.run().map_err(|e| e.to_string())?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(args) | Command::Check(args) => run_cmd(args),
        Command::IdentServe(args) => serve_cmd(args),
    };
    result.unwrap_or_else(|msg| {
        eprintln!("ubfsim: {msg}");
        ExitCode::from(1)
    })
}
