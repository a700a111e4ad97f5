//! `pfclab`: run the lab service, manage slots, export session logs and
//! compute the pre-lab report.
//!
//! Exit codes: 0 ok, 2 usage, 3 domain error, 4 I/O. Every failure prints
//! exactly one line, `error: <kind>: <message>`, on stderr.

use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pfclab_core::labmath::{default_cable_table, prelab_report};
use pfclab_core::{LabMathError, PrelabReport64};
use pfclab_service::config::DEFAULT_CONFIG_PATH;
use pfclab_service::{read_events, serve, shutdown_signal, Lab, LabConfig, ServiceError, SessionError, SessionService};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage,
    Domain,
    Io,
}

#[derive(Debug)]
struct CliError {
    kind: Kind,
    message: String,
}

impl CliError {
    fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            Kind::Usage => 2,
            Kind::Domain => 3,
            Kind::Io => 4,
        }
    }

    fn label(&self) -> &'static str {
        match self.kind {
            Kind::Usage => "usage",
            Kind::Domain => "domain",
            Kind::Io => "io",
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Config(m) => CliError::new(Kind::Domain, format!("config: {m}")),
            ServiceError::Io(m) => CliError::new(Kind::Io, m),
            ServiceError::Log(m) => CliError::new(Kind::Io, format!("log: {m}")),
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        let kind = if matches!(e, SessionError::Store(_)) { Kind::Io } else { Kind::Domain };
        CliError::new(kind, format!("{}: {e}", e.code()))
    }
}

impl From<LabMathError> for CliError {
    fn from(e: LabMathError) -> Self {
        CliError::new(Kind::Domain, e.to_string())
    }
}

fn io_err(context: &str) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new(Kind::Io, format!("{context}: {e}"))
}

#[derive(Parser)]
#[command(name = "pfclab", version, about = "Remote power-factor-correction lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// Lab config file; defaults to ./lab.json when present.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the rig, session service and HTTP/WebSocket gateway.
    Serve {
        #[arg(long, default_value = DEFAULT_CONFIG_PATH)]
        config: PathBuf,
        /// Listen address; overrides the config file and PFCLAB_BIND.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Manage reserved time slots in the slot file.
    #[command(subcommand)]
    Slots(SlotsCommand),
    /// Personalized pre-lab report for a registration number.
    Pfcalc {
        #[arg(long, allow_negative_numbers = true)]
        reg: i64,
        #[arg(long, default_value_t = 0.99)]
        target_pf: f64,
        #[arg(long, default_value_t = 20.0)]
        length_m: f64,
        #[arg(long, default_value_t = 50.0)]
        freq: f64,
        /// Print the report as JSON instead of text.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Session log tools.
    #[command(subcommand)]
    Log(LogCommand),
}

#[derive(Subcommand)]
enum SlotsCommand {
    /// Reserve a slot; times are RFC 3339.
    Add {
        #[arg(long)]
        student: String,
        #[arg(long)]
        start: String,
        #[arg(long)]
        end: String,
        #[command(flatten)]
        config: ConfigArg,
    },
    List {
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        config: ConfigArg,
    },
    Revoke {
        #[arg(long)]
        id: String,
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Csv,
}

#[derive(Subcommand)]
enum LogCommand {
    /// Write one session's events as JSON Lines or CSV.
    Export {
        #[arg(long)]
        session: String,
        #[arg(long, value_enum, default_value_t = Format::Jsonl)]
        format: Format,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Log file; overrides the one named in the config.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
}

/// Loads the named config, or ./lab.json if it exists, or built-in defaults.
fn load_config(arg: &ConfigArg) -> Result<LabConfig, CliError> {
    match &arg.config {
        Some(p) => Ok(LabConfig::load(p)?),
        None if Path::new(DEFAULT_CONFIG_PATH).exists() => Ok(LabConfig::load(Path::new(DEFAULT_CONFIG_PATH))?),
        None => Ok(LabConfig::default()),
    }
}

fn parse_time(flag: &str, s: &str) -> Result<f64, CliError> {
    let t = DateTime::parse_from_rfc3339(s)
        .map_err(|e| CliError::new(Kind::Usage, format!("--{flag} {s:?} is not an RFC 3339 time: {e}")))?;
    Ok(t.timestamp() as f64 + f64::from(t.timestamp_subsec_nanos()) * 1e-9)
}

fn format_time(t: f64) -> String {
    let secs = t.floor();
    let nanos = ((t - secs) * 1e9).round().min(999_999_999.0) as u32;
    DateTime::<Utc>::from_timestamp(secs as i64, nanos)
        .map(|d| d.to_rfc3339_opts(SecondsFormat::AutoSi, true))
        .unwrap_or_else(|| t.to_string())
}

fn slot_store(cfg: &LabConfig) -> Result<SessionService, CliError> {
    let path = cfg
        .session
        .slots_file
        .as_ref()
        .ok_or_else(|| CliError::new(Kind::Domain, "config: session.slots_file is not set"))?;
    Ok(SessionService::open(path, cfg.session.claim_grace_s)?)
}

fn run_serve(config: &Path, bind: Option<String>) -> Result<(), CliError> {
    let mut cfg = LabConfig::load(config)?;
    cfg.apply_env();
    cfg.apply_overrides(bind, None);
    tracing_subscriber::fmt()
        .with_ansi(std::io::stdout().is_terminal())
        .with_target(false)
        .init();
    let rt = tokio::runtime::Runtime::new().map_err(io_err("starting runtime"))?;
    rt.block_on(async move {
        let bind = cfg.bind.clone();
        let listener = tokio::net::TcpListener::bind(&bind).await.map_err(io_err(&format!("bind {bind}")))?;
        let addr = listener.local_addr().map_err(io_err("local address"))?;
        let lab = Lab::new(cfg)?;
        println!("ready bind={addr}");
        let _ = std::io::stdout().flush();
        serve(lab, listener, shutdown_signal()).await.map_err(io_err("serve"))
    })
}

fn run_slots(cmd: SlotsCommand) -> Result<(), CliError> {
    match cmd {
        SlotsCommand::Add { student, start, end, config } => {
            let (start, end) = (parse_time("start", &start)?, parse_time("end", &end)?);
            let store = slot_store(&load_config(&config)?)?;
            let slot = store.create_slot(&student, start, end)?;
            println!("{} {} {}", slot.slot_id, slot.student_id, slot.claim_code);
        }
        SlotsCommand::List { json, config } => {
            let slots = slot_store(&load_config(&config)?)?.list();
            if json {
                println!("{}", serde_json::to_string_pretty(&slots).expect("slots serialize"));
            } else {
                println!("{:<10} {:<16} {:<25} {:<25} claim_code", "slot_id", "student_id", "start", "end");
                for s in slots {
                    println!(
                        "{:<10} {:<16} {:<25} {:<25} {}",
                        s.slot_id,
                        s.student_id,
                        format_time(s.start),
                        format_time(s.end),
                        s.claim_code
                    );
                }
            }
        }
        SlotsCommand::Revoke { id, config } => {
            let slot = slot_store(&load_config(&config)?)?.revoke(&id)?;
            println!("revoked {}", slot.slot_id);
        }
    }
    Ok(())
}

fn run_pfcalc(reg: i64, target_pf: f64, length_m: f64, freq: f64, json: bool, config: &ConfigArg) -> Result<(), CliError> {
    let table = match &config.config {
        Some(_) => load_config(config)?.cables,
        None => default_cable_table(),
    };
    let report: PrelabReport64 = prelab_report(reg, target_pf, length_m, freq, &table)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn run_log(cmd: LogCommand) -> Result<(), CliError> {
    let LogCommand::Export { session, format, out, log, config } = cmd;
    let path = match log {
        Some(p) => p,
        None => load_config(&config)?.session.log_file,
    };
    let events: Vec<_> = read_events(&path)?.into_iter().filter(|e| e.session.as_deref() == Some(session.as_str())).collect();
    if events.is_empty() {
        return Err(CliError::new(Kind::Domain, format!("unknown_session: no events for {session}")));
    }
    let sink: Box<dyn Write> = match &out {
        Some(p) => Box::new(std::fs::File::create(p).map_err(io_err(&p.display().to_string()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let target = out.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "stdout".into());
    match format {
        Format::Jsonl => {
            let mut w = std::io::BufWriter::new(sink);
            for e in &events {
                writeln!(w, "{}", serde_json::to_string(e).expect("events serialize")).map_err(io_err(&target))?;
            }
            w.flush().map_err(io_err(&target))?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(sink);
            let fail = |e: csv::Error| CliError::new(Kind::Io, format!("{target}: {e}"));
            w.write_record(["ts", "session", "kind", "payload"]).map_err(fail)?;
            for e in &events {
                let ts = e.ts.to_string();
                let payload = e.payload.to_string();
                w.write_record([ts.as_str(), session.as_str(), e.kind.as_str(), payload.as_str()]).map_err(fail)?;
            }
            w.flush().map_err(io_err(&target))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Serve { config, bind } => run_serve(&config, bind),
        Command::Slots(cmd) => run_slots(cmd),
        Command::Pfcalc { reg, target_pf, length_m, freq, json, config } => {
            run_pfcalc(reg, target_pf, length_m, freq, json, &config)
        }
        Command::Log(cmd) => run_log(cmd),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let summary: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let err = CliError::new(Kind::Usage, summary.join(" ").trim_start_matches("error: ").to_string());
            eprintln!("error: {}: {}", err.label(), err.message);
            return ExitCode::from(err.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.label(), e.message.replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
