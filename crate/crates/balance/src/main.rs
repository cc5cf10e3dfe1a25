//! `balance` CLI: instance generation, walk runs and experiment sweeps,
//! Steinitz orderings, and the brute-force prefix oracle.
//!
//! Exit codes: 0 on success, 2 when a halting abort fired, 3 on SDP
//! failure, 1 on any other error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use balance::harness::{self, Algorithm, RunConfigFile};
use balance::instance::{self, NormMode};
use balance::steinitz::{self, SteinitzError};
use balance::walk::{self, ModeParams, WalkConfig, WalkError};

#[derive(Parser)]
#[command(name = "balance", version, about = "vector balancing engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a walk (or an experiment sweep) from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic instance file.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        /// L2_UNIT or LINF_UNIT
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Append balancing columns so the column sum is zero.
        #[arg(long, default_value_t = false)]
        zero_sum: bool,
        /// Build the Hadamard hard instance instead (d must be a power
        /// of two; n is ignored).
        #[arg(long, default_value_t = false)]
        hadamard: bool,
    },
    /// Order a zero-sum instance and report the exact max prefix norm.
    Steinitz {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON output path (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
    },
    /// Brute-force optimal max prefix discrepancy (n <= 16).
    Oracle {
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Gen {
            n,
            d,
            mode,
            seed,
            out,
            zero_sum,
            hadamard,
        } => {
            let norm_mode = parse_mode(&mode)?;
            let inst = if hadamard {
                instance::generate_hadamard_like(d)?
            } else {
                instance::generate_random(n, d, norm_mode, seed)
            };
            let inst = if zero_sum {
                instance::balance_to_zero_sum(&inst)
            } else {
                inst
            };
            instance::save_instance(&inst, &out)?;
            println!(
                "wrote {} ({} x {} {})",
                out.display(),
                inst.d(),
                inst.n(),
                inst.norm_mode()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Steinitz {
            input,
            seed,
            out,
            dt,
        } => {
            let inst = instance::load_instance(&input)?;
            let config = WalkConfig {
                dt,
                ..WalkConfig::default()
            };
            match steinitz::steinitz_order(&inst, &config, seed) {
                Ok(result) => {
                    let text = serde_json::to_string_pretty(&result)?;
                    match out {
                        Some(path) => {
                            std::fs::write(&path, text)
                                .with_context(|| format!("writing {}", path.display()))?;
                            println!(
                                "max_prefix_norm = {} (depth {})",
                                result.max_prefix_norm, result.recursion_depth
                            );
                        }
                        None => println!("{text}"),
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(SteinitzError::Walk(e)) => Ok(walk_error_exit(e)),
                Err(e) => Err(e.into()),
            }
        }
        Command::Oracle { input } => {
            let inst = instance::load_instance(&input)?;
            let opt = harness::brute_force_prefix_opt(&inst)?;
            println!("{opt}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_run(config_path: &PathBuf) -> Result<ExitCode> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let cfg: RunConfigFile = serde_json::from_str(&text).context("parsing run config")?;

    // experiment sweep when trials or seeds are present
    if cfg.trials.is_some() || cfg.seeds.is_some() {
        if cfg.output.is_none() {
            anyhow::bail!("experiment mode requires an \"output\" stem");
        }
        match harness::run_experiment(&cfg) {
            Ok(summary) => {
                println!(
                    "{} trials: median max_l2 = {}, max = {}, aborts = {}",
                    summary.trials,
                    summary.median_max_l2,
                    summary.max_max_l2,
                    summary.abort_count
                );
                return Ok(ExitCode::SUCCESS);
            }
            Err(harness::HarnessError::Walk(e)) => return Ok(walk_error_exit(e)),
            Err(e) => return Err(e.into()),
        }
    }

    let inst = cfg.instance.resolve()?;
    match cfg.algorithm {
        Algorithm::Random => {
            let (_, l2, linf) = harness::baseline_random(&inst, cfg.seed);
            println!("random coloring: max_l2 = {l2}, max_linf = {linf}");
            return Ok(ExitCode::SUCCESS);
        }
        Algorithm::BruteForce => {
            let opt = harness::brute_force_prefix_opt(&inst)?;
            println!("brute-force optimum: {opt}");
            return Ok(ExitCode::SUCCESS);
        }
        Algorithm::FullAsi | Algorithm::SiOnly => {}
    }

    if let Some(dir) = &cfg.sdp_debug_dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
    }
    let params = ModeParams::derive(cfg.mode, inst.n(), inst.d(), cfg.walk_config());
    let report = match walk::run(&inst, params, cfg.seed) {
        Ok(r) => r,
        Err(e) => return Ok(walk_error_exit(e)),
    };

    if let Some(path) = &cfg.trajectory_csv {
        let file = std::fs::File::create(path)
            .with_context(|| format!("creating {}", path.display()))?;
        report.write_trajectory_csv(std::io::BufWriter::new(file))?;
    }
    if let Some(path) = &cfg.merge_log_jsonl {
        let mut out = String::new();
        for ev in &report.asi_tree_events {
            out.push_str(&serde_json::to_string(ev)?);
            out.push('\n');
        }
        for events in &report.blocking_tree_events {
            for ev in events {
                out.push_str(&serde_json::to_string(ev)?);
                out.push('\n');
            }
        }
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &cfg.report_json {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }

    println!(
        "steps = {}, final max_l2 = {}, max_linf = {}, clips = {}, aborts = {}",
        report.steps,
        report.final_max_l2_prefix_disc,
        report.final_max_linf_prefix_disc,
        report.clip_total,
        report.abort_total
    );
    if report.halted {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn walk_error_exit(e: WalkError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        WalkError::SdpFailure { .. } | WalkError::Sdp(_) => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn parse_mode(s: &str) -> Result<NormMode> {
    match s {
        "L2_UNIT" => Ok(NormMode::L2Unit),
        "LINF_UNIT" => Ok(NormMode::LinfUnit),
        other => anyhow::bail!("unknown norm mode {other:?} (L2_UNIT or LINF_UNIT)"),
    }
}
