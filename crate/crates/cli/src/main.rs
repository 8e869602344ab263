//! `acesync` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acesync_core::harness::{
    compare, convergence_epoch, final_accuracy, run_experiment, ExperimentConfig, Format, Method, MetricsLog,
};
use acesync_core::netsim::{gen_trace, save_traces, TraceSpec};
use acesync_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "acesync", version, about = "Cloud-edge synchronization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its per-round metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's method.
        #[arg(long)]
        method: Option<Method>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write the metrics as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run several methods over several seeds and summarize them.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bandwidth trace utilities.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Summarize a metrics CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Generate one trace per device and write them as CSV.
    Gen(TraceGen),
}

#[derive(Args)]
struct TraceGen {
    #[arg(long)]
    devices: u32,
    /// Trace length in seconds.
    #[arg(long)]
    duration: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    #[arg(long, default_value_t = 0.15)]
    jitter: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Parse { .. } => 3,
        _ => 4,
    }
}

fn metrics_name(method: Method, seed: u64) -> String {
    format!("metrics_{method}_{seed}.csv")
}

fn cmd_run(config: &Path, seed: Option<u64>, method: Option<Method>, out: &Path, json: bool) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    let log = run_experiment(&cfg)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(metrics_name(cfg.method, cfg.seed));
    log.emit(Format::Csv, &path)?;
    if json {
        log.emit(Format::Json, &path.with_extension("json"))?;
    }
    println!("wrote {}", path.display());
    print_summary(cfg.method.name(), &log)?;
    Ok(())
}

fn cmd_compare(config: &Path, methods: &[Method], seeds: &[u64], out: &Path) -> Result<(), Error> {
    let base = ExperimentConfig::load(config)?;
    let configs: Vec<ExperimentConfig> = methods
        .iter()
        .map(|&m| ExperimentConfig {
            method: m,
            ..base.clone()
        })
        .collect();
    let report = compare(&configs, seeds)?;
    let written = report.emit(out)?;
    println!(
        "{:<16} {:>5} {:>10} {:>12} {:>12} {:>10} {:>10}",
        "method", "runs", "accuracy", "uplink_GB", "downlink_GB", "conv_epoch", "loss"
    );
    for r in &report.rows {
        println!(
            "{:<16} {:>5} {:>10.4} {:>12.6} {:>12.6} {:>10.2} {:>10.4}",
            r.method, r.runs, r.final_accuracy, r.uplink_gb, r.downlink_gb, r.convergence_epoch, r.final_loss
        );
    }
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn cmd_trace_gen(args: &TraceGen) -> Result<(), Error> {
    let spec = TraceSpec {
        duration_s: args.duration,
        step_s: args.step,
        bw_range: (5.0, 200.0),
        lat_range: (10.0, 300.0),
        jitter_sigma: args.jitter,
    };
    let traces = (0..args.devices)
        .map(|d| gen_trace(&spec, d, args.seed.wrapping_add(d as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    save_traces(&traces, &args.out)?;
    println!("wrote {} traces to {}", traces.len(), args.out.display());
    Ok(())
}

fn print_summary(label: &str, log: &MetricsLog) -> Result<(), Error> {
    let Some(last) = log.last() else {
        println!("{label}: empty log");
        return Ok(());
    };
    let acc = final_accuracy(log)?;
    println!("method            {label}");
    println!("rounds            {}", log.rows.len());
    println!("final_accuracy    {acc:.4}");
    println!("final_loss        {:.4}", last.train_loss);
    println!("uplink_GB         {:.6}", log.total_uplink_bytes() as f64 / 1e9);
    println!("downlink_GB       {:.6}", log.total_downlink_bytes() as f64 / 1e9);
    println!("convergence_epoch {}", convergence_epoch(log, acc)?);
    println!("sim_time_s        {:.3}", last.sim_time_s);
    Ok(())
}

fn cmd_report(input: &Path) -> Result<(), Error> {
    let log = MetricsLog::load(input)?;
    let label = input
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("metrics_"))
        .unwrap_or("unknown")
        .to_string();
    print_summary(&label, &log)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            seed,
            method,
            out,
            json,
        } => cmd_run(config, *seed, *method, out, *json),
        Command::Compare {
            config,
            methods,
            seeds,
            out,
        } => cmd_compare(config, methods, seeds, out),
        Command::Trace {
            command: TraceCommand::Gen(args),
        } => cmd_trace_gen(args),
        Command::Report { input } => cmd_report(input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
