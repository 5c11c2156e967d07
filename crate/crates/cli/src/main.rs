use std::path::PathBuf;
use std::process::ExitCode;

use avco_core::config::{RunConfig, Scheme};
use avco_core::quant::QuantScheme;
use avco_core::runner::{self, FailureKind, RunError, Stage};
use clap::{Parser, Subcommand};

/// Graph optimization, quantization and latency-aware closed-loop
/// evaluation for modular driving stacks.
#[derive(Debug, Parser)]
#[command(name = "avco", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for route simulation and calibration.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Also write the per-pass rewrite report.
    #[arg(long, global = true)]
    emit_pass_report: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply the scheme's pass pipeline and write the resulting graph.
    Optimize,
    /// Calibrate, plan and rewrite the graph with int8 operators.
    Quantize {
        /// full, feature-ext or prediction; defaults to the configured scheme.
        #[arg(long)]
        scheme: Option<QuantScheme>,
        /// Calibration file; overrides the configured path.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Run the scenario suite under the scheme and score it.
    Evaluate,
    /// Jointly rescore evaluation reports (report.json or .toml configs).
    Compare {
        #[arg(required = true, num_args = 2..)]
        inputs: Vec<PathBuf>,
    },
    /// Write the seeded scenario suite as JSON files.
    GenSuite,
    /// Write random calibration frames for the configured graph.
    GenCalib {
        #[arg(long, default_value_t = 16)]
        frames: usize,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, RunError> {
    let mut cfg = match &cli.config {
        Some(path) => runner::load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.emit_pass_report |= cli.emit_pass_report;
    if let Command::Quantize {
        scheme,
        calibration,
    } = &cli.command
    {
        if let Some(q) = scheme {
            cfg.scheme = Scheme::Quant(*q);
        }
        if let Some(c) = calibration {
            cfg.calibration_path = Some(c.clone());
        }
    }
    cfg.validate()
        .map_err(|e| RunError::new(Stage::Config, "config", FailureKind::Validation, e))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), RunError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| RunError::new(Stage::Config, "--jobs", FailureKind::Runtime, e))?;
    }
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Optimize => {
            let out = runner::cmd_optimize(&cfg)?;
            let s = &out.summary;
            println!(
                "{}: {} -> {} nodes, latency {:.6} -> {:.6} s, wrote {}",
                s.scheme,
                s.nodes_before,
                s.nodes_after,
                s.latency_before_s,
                s.latency_after_s,
                out.graph_path.display()
            );
        }
        Command::Quantize { .. } => {
            let out = runner::cmd_quantize(&cfg)?;
            for w in &out.summary.warnings {
                eprintln!("warning: {w}");
            }
            let s = &out.summary;
            println!(
                "{:?}: {} quantized, {} excluded, {} -> {} bytes",
                s.scheme, s.quantized, s.excluded, s.fp32_bytes, s.quantized_bytes
            );
        }
        Command::Evaluate => {
            let out = runner::cmd_evaluate(&cfg)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            let e = &out.report.evaluation;
            println!(
                "{}: {} routes, DS {:.2}, FPS {:.2}, EER_AV {:.3}, wrote {}",
                out.report.scheme,
                e.route_count,
                e.summary.mean_ds,
                e.summary.fps,
                e.eer_av,
                cfg.output_dir.join("report.json").display()
            );
        }
        Command::Compare { inputs } => {
            let cmp = runner::cmd_compare(inputs, &cfg.output_dir)?;
            print!("{}", cmp.to_text());
        }
        Command::GenSuite => {
            let paths = runner::cmd_gen_suite(&cfg)?;
            println!(
                "wrote {} scenarios to {}",
                paths.len(),
                cfg.output_dir.join("suite").display()
            );
        }
        Command::GenCalib { frames } => {
            let path = runner::cmd_gen_calibration(&cfg, *frames)?;
            println!("wrote {frames} calibration frames to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
