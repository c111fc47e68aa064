//! The `fedmesh` command line.
//!
//! Exit codes: 0 on success, 1 for usage, configuration or validation
//! errors, 2 for runtime and network failures.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{export_dataset, generate_federation, load_layout, DataError};
use crate::experiment::{dropout_robustness_study, load_plan, run_plan, ExperimentError};
use crate::orchestration::metrics::{read_jsonl, write_jsonl, RoundMetrics};
use crate::orchestration::socket::{
    run_centralized_server, run_coordinator, run_site, run_socket_processes, site_metrics_path, site_model_path,
};
use crate::orchestration::{load_config, run_in_process, Algorithm, ConfigError, DropoutMode, OrchestrationError, RunOutcome};
use crate::params::write_checkpoint;

#[derive(Debug, Parser)]
#[command(name = "fedmesh", version, about = "Federated learning servers, sites and simulations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the centralized aggregation server (fedavg / fedprox).
    Server {
        #[arg(long)]
        config: PathBuf,
        /// Listen address; defaults to the config's `server`.
        #[arg(long)]
        listen: Option<SocketAddr>,
        #[arg(long, default_value = "fedmesh-out")]
        out: PathBuf,
    },
    /// Run the decentralized coordination server (gcml).
    Coordinator {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        listen: Option<SocketAddr>,
        #[arg(long, default_value = "fedmesh-out")]
        out: PathBuf,
    },
    /// Run one site.
    Site {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: u64,
        /// Server address; defaults to the config's `server`.
        #[arg(long)]
        server: Option<SocketAddr>,
        #[arg(long, default_value = "fedmesh-out")]
        out: PathBuf,
    },
    /// Run a whole federation locally.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Use loopback sockets with one process per site.
        #[arg(long)]
        socket: bool,
        #[arg(long, default_value = "fedmesh-out")]
        out: PathBuf,
    },
    /// Run an experiment plan.
    Experiment {
        #[arg(long)]
        plan: PathBuf,
        /// Output directory; overrides the plan's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the five dropout scenarios of a gcml config.
    DropoutStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "fedmesh-out")]
        out: PathBuf,
    },
    /// Generate a synthetic federation and write it as CSV.
    GenData {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the metrics and summaries in an output directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// A failure mapped to its exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<OrchestrationError> for CliError {
    fn from(e: OrchestrationError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("FEDMESH_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fedmesh: {}", e.message());
            e.exit_code()
        }
    }
}

fn bind(addr: SocketAddr) -> Result<TcpListener, CliError> {
    TcpListener::bind(addr).map_err(|e| CliError::Runtime(format!("cannot listen on {addr}: {e}")))
}

fn write_outcome(out: &Path, outcome: &RunOutcome) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    write_jsonl(&out.join("metrics.jsonl"), &outcome.history)?;
    if let Some(g) = &outcome.global_model {
        write_checkpoint(&out.join("global_model.bin"), g)?;
    }
    for (id, p) in &outcome.site_models {
        write_checkpoint(&site_model_path(out, *id), p)?;
    }
    Ok(())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Server { config, listen, out } => {
            let cfg = load_config(&config)?;
            if !cfg.algorithm.is_centralized() {
                return Err(CliError::Config(format!(
                    "`server` runs fedavg/fedprox; config uses {} (use `coordinator` for gcml)",
                    cfg.algorithm.as_str()
                )));
            }
            let addr = match listen {
                Some(a) => a,
                None => cfg.server_addr()?,
            };
            let data = generate_federation(&cfg.layout)?;
            fs::create_dir_all(&out)?;
            let listener = bind(addr)?;
            log::info!("aggregation server listening on {}", listener.local_addr()?);
            let outcome = run_centralized_server(&cfg, listener, data.test.clone())?;
            write_outcome(&out, &outcome)
        }
        Command::Coordinator { config, listen, out } => {
            let cfg = load_config(&config)?;
            if cfg.algorithm != Algorithm::Gcml {
                return Err(CliError::Config(format!(
                    "`coordinator` runs gcml; config uses {} (use `server`)",
                    cfg.algorithm.as_str()
                )));
            }
            let addr = match listen {
                Some(a) => a,
                None => cfg.server_addr()?,
            };
            fs::create_dir_all(&out)?;
            let listener = bind(addr)?;
            log::info!("coordinator listening on {}", listener.local_addr()?);
            let outcome = run_coordinator(&cfg, listener)?;
            write_outcome(&out, &outcome)?;
            let kinds: String = outcome.server_inbox.iter().map(|t| format!("{t}\n")).collect();
            fs::write(out.join("inbox.log"), kinds)?;
            Ok(())
        }
        Command::Site { config, id, server, out } => {
            let cfg = load_config(&config)?;
            cfg.site_index(id)?;
            if !(cfg.algorithm.is_centralized() || cfg.algorithm == Algorithm::Gcml) {
                return Err(CliError::Config(format!("{} runs without sites", cfg.algorithm.as_str())));
            }
            let server = match server {
                Some(a) => a,
                None => cfg.server_addr()?,
            };
            let data = generate_federation(&cfg.layout)?;
            fs::create_dir_all(&out)?;
            let run = run_site(&cfg, id, server, &data)?;
            write_checkpoint(&site_model_path(&out, id), &run.params)?;
            write_jsonl(&site_metrics_path(&out, id), &run.history)?;
            Ok(())
        }
        Command::Simulate { config, socket, out } => {
            let cfg = load_config(&config)?;
            let outcome = if socket {
                let exe = std::env::current_exe()?;
                let config_path = fs::canonicalize(&config)?;
                run_socket_processes(&cfg, &config_path, &exe, &out)?
            } else {
                run_in_process(&cfg)?
            };
            write_outcome(&out, &outcome)?;
            println!(
                "{}: {} rounds, final test loss {:.6}{}",
                cfg.algorithm.as_str(),
                cfg.rounds,
                outcome.final_test_loss,
                outcome.final_test_accuracy.map(|a| format!(", accuracy {a:.4}")).unwrap_or_default()
            );
            Ok(())
        }
        Command::Experiment { plan, out } => {
            let mut plan = load_plan(&plan)?;
            if out.is_some() {
                plan.output_dir = out;
            }
            if plan.output_dir.is_none() {
                plan.output_dir = Some(PathBuf::from("fedmesh-out"));
            }
            let summaries = run_plan(&plan)?;
            println!("{:<24} {:>5} {:>12} {:>10} {:>10}", "arm", "reps", "test_loss", "std", "accuracy");
            for s in &summaries {
                println!(
                    "{:<24} {:>5} {:>12.6} {:>10.6} {:>10}",
                    s.label,
                    s.reps.len(),
                    s.mean_test_loss,
                    s.std_test_loss,
                    s.mean_test_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
                );
            }
            Ok(())
        }
        Command::DropoutStudy { config, reps, seed, out } => {
            let cfg = load_config(&config)?;
            if reps < 2 {
                return Err(CliError::Config("--reps must be at least 2 for the ANOVA".into()));
            }
            fs::create_dir_all(&out)?;
            let report = dropout_robustness_study(
                &cfg,
                &[1, 2],
                &[DropoutMode::Disconnect, DropoutMode::Shutdown],
                reps,
                seed,
                Some(&out),
            )?;
            print!("{}", report.render());
            Ok(())
        }
        Command::GenData { layout, out } => {
            let layout = load_layout(&layout)?;
            let data = generate_federation(&layout)?;
            export_dataset(&data, &out)?;
            Ok(())
        }
        Command::Report { input } => report(&input),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
}

fn mean_of(rows: &[&RoundMetrics], f: impl Fn(&RoundMetrics) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn report(dir: &Path) -> Result<(), CliError> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut found = false;
    for f in &files {
        let rows = read_jsonl(f).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
        let Some(last) = rows.iter().map(|r| r.round).max() else { continue };
        found = true;
        println!("{} ({} rows, {} rounds)", f.file_name().unwrap_or_default().to_string_lossy(), rows.len(), last);
        let mut by_role: BTreeMap<&str, Vec<&RoundMetrics>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.round == last) {
            by_role.entry(r.role.as_str()).or_default().push(r);
        }
        for (role, rs) in by_role {
            let sent: u64 = rows.iter().filter(|r| r.role == role).map(|r| r.bytes_sent).sum();
            println!(
                "  {role:<12} n={:<3} test_loss={} test_acc={} bytes_sent_total={sent}",
                rs.len(),
                fmt_opt(mean_of(&rs, |r| r.test_loss)),
                fmt_opt(mean_of(&rs, |r| r.test_accuracy)),
            );
        }
    }
    let summary = dir.join("summary.csv");
    if summary.exists() {
        found = true;
        let mut rd = csv::Reader::from_path(&summary).map_err(|e| CliError::Config(e.to_string()))?;
        let mut arms: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| CliError::Config(e.to_string()))?;
            let e = arms.entry(rec[0].to_string()).or_default();
            if let Ok(l) = rec[2].parse() {
                e.0.push(l);
            }
            if let Ok(a) = rec[3].parse() {
                e.1.push(a);
            }
        }
        println!("summary.csv");
        for (label, (l, a)) in arms {
            let m = |v: &[f64]| (!v.is_empty()).then(|| crate::stats::mean(v));
            println!("  {label:<24} reps={:<3} test_loss={} test_acc={}", l.len(), fmt_opt(m(&l)), fmt_opt(m(&a)));
        }
    }
    let rep = dir.join("report.txt");
    if rep.exists() {
        found = true;
        print!("{}", fs::read_to_string(rep)?);
    }
    if !found {
        return Err(CliError::Config(format!("no metrics found in {}", dir.display())));
    }
    Ok(())
}
