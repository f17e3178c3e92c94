//! `qudit-forge`: the calibrate, characterize, optimize, tune and validate
//! workflow for a simulated transmon qudit, one subcommand per stage.
//!
//! Stages hand off through JSON and CSV files in the output directory, so
//! each can be rerun on its own and a pipeline can resume from cached
//! results with `--from`.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod report;
pub mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use config::{parse_hours, parse_nodes, RunConfig};
use error::{CliError, CliResult};
use stages::{CharMode, Context, Gate, OptMode, ValidateArgs};

#[derive(Debug, Parser)]
#[command(name = "qudit-forge", version, about = "Characterize, control and validate a simulated transmon qudit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Include the hidden device parameters in reports.
    #[arg(long, global = true)]
    pub reveal_truth: bool,
}

#[derive(Debug, Args, Default)]
pub struct CharacterizeArgs {
    /// Posterior draws per chain.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Standard deviation of the frequency priors.
    #[arg(long)]
    pub prior_width_khz: Option<f64>,
    /// JSON box overriding the deterministic fit bounds.
    #[arg(long)]
    pub bounds_file: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate both π pulses and train the readout classifier.
    Calibrate,
    /// Record the Ramsey and T1 datasets.
    Collect,
    /// Estimate the device parameters from the collected data.
    Characterize {
        #[arg(long, value_enum, default_value = "det")]
        mode: CharMode,
        #[command(flatten)]
        args: CharacterizeArgs,
    },
    /// Synthesize a gate pulse for the characterized model.
    Optimize {
        #[arg(long, value_enum, default_value = "swap02")]
        gate: Gate,
        #[arg(long, value_enum, default_value = "det")]
        mode: OptMode,
        /// Posterior rule size, e.g. `8x16`.
        #[arg(long, value_parser = parse_nodes)]
        nodes: Option<(usize, usize)>,
    },
    /// Rescale a pulse's carriers against the device's transmission line.
    Tune {
        #[arg(long)]
        pulse: Option<PathBuf>,
    },
    /// Repeat a gate on the device and optionally fit its process matrix.
    Validate {
        #[arg(long)]
        pulse: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        tomography: bool,
        /// Hours since tuning, e.g. `6h` or `90m`.
        #[arg(long, value_parser = parse_hours)]
        wall_clock_offset: Option<f64>,
    },
    /// Summarize all artifacts and write plot-ready CSV files.
    Report,
    /// Run every stage in order.
    Pipeline {
        /// First stage to run; earlier stages must already have outputs.
        #[arg(long, value_enum)]
        from: Option<StageName>,
        #[command(flatten)]
        args: CharacterizeArgs,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum StageName {
    Calibrate,
    Collect,
    Characterize,
    Bayes,
    Optimize,
    Tune,
    Validate,
    Report,
}

impl StageName {
    pub const ALL: [StageName; 8] = [
        StageName::Calibrate,
        StageName::Collect,
        StageName::Characterize,
        StageName::Bayes,
        StageName::Optimize,
        StageName::Tune,
        StageName::Validate,
        StageName::Report,
    ];

    /// Artifacts whose presence means the stage has run.
    pub fn outputs(self) -> Vec<String> {
        use artifacts::*;
        match self {
            StageName::Calibrate => vec![CALIBRATION.into()],
            StageName::Collect => vec![DATASETS.into()],
            StageName::Characterize => vec![CHARACTERIZATION_DET.into()],
            StageName::Bayes => vec![CHARACTERIZATION_BAYES.into(), POSTERIOR_CHAIN.into()],
            StageName::Optimize => ["det", "parity2", "posterior"]
                .iter()
                .flat_map(|m| [optimization_name(m), pulse_name(m)])
                .collect(),
            StageName::Tune => vec![TUNING.into(), PULSE_TUNED.into()],
            StageName::Validate => vec![VALIDATION.into()],
            StageName::Report => vec![REPORT.into()],
        }
    }
}

/// Configuration from the file (or defaults) with command-line overrides.
pub fn resolve_config(global: &GlobalArgs, characterize: Option<&CharacterizeArgs>) -> CliResult<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.output_dir = out.clone();
    }
    if let Some(c) = characterize {
        if let Some(n) = c.samples {
            cfg.characterization.samples = n;
        }
        if let Some(w) = c.prior_width_khz {
            cfg.characterization.prior_width_khz = w;
        }
    }
    Ok(cfg)
}

/// Runs one command. Progress goes to the log; the returned text is the
/// command's report for standard output.
pub fn run(cli: &Cli) -> CliResult<String> {
    let char_args = match &cli.command {
        Command::Characterize { args, .. } | Command::Pipeline { args, .. } => Some(args),
        _ => None,
    };
    let cfg = resolve_config(&cli.global, char_args)?;
    let ctx = Context::new(cfg, cli.global.reveal_truth)?;
    let result = dispatch(&ctx, &cli.command);
    result.map_err(|e| match e {
        CliError::Stage { stage, message, .. } => CliError::Stage {
            stage,
            message,
            artifacts: ctx.store.listing(),
        },
        other => other,
    })
}

fn dispatch(ctx: &Context, command: &Command) -> CliResult<String> {
    match command {
        Command::Calibrate => {
            let cal = stages::calibrate(ctx)?;
            let mut s = String::from("confusion matrix c[i][j] = P(measured i | prepared j):\n");
            for row in &cal.confusion {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
                s.push_str(&format!("  {}\n", cells.join("  ")));
            }
            for (k, p) in cal.pi_pulses.iter().enumerate() {
                s.push_str(&format!(
                    "π pulse {k}: {:.6} GHz, {:.3} MHz, {} ns\n",
                    p.freq_hz / 1e9,
                    p.amplitude_hz / 1e6,
                    p.duration_ns
                ));
            }
            Ok(s)
        }
        Command::Collect => {
            let files = stages::collect(ctx)?;
            Ok(files.iter().map(|f| format!("{} ({} points)\n", f.stem(), f.grid.len())).collect())
        }
        Command::Characterize { mode, args } => match mode {
            CharMode::Det => {
                stages::characterize_det(ctx, args.bounds_file.as_deref())?;
                summary(ctx)
            }
            CharMode::Bayes => {
                stages::characterize_bayes(ctx)?;
                summary(ctx)
            }
        },
        Command::Optimize { gate, mode, nodes } => {
            let r = stages::optimize_stage(ctx, *gate, *mode, *nodes)?;
            Ok(format!(
                "{} over {} systems: J1 {:.3e}, fidelity {:.5}%\n",
                r.mode,
                r.nodes,
                r.j1,
                100.0 * r.fidelity
            ))
        }
        Command::Tune { pulse } => {
            let t = stages::tune(ctx, pulse.as_deref())?;
            Ok(format!("r_c {:.4}, A_c {:.4}\n", t.r_c, t.a_c))
        }
        Command::Validate {
            pulse,
            reps,
            tomography,
            wall_clock_offset,
        } => {
            stages::validate(
                ctx,
                &ValidateArgs {
                    pulse: pulse.as_deref(),
                    reps: *reps,
                    tomography: *tomography,
                    wall_clock_offset_hours: *wall_clock_offset,
                },
            )?;
            summary(ctx)
        }
        Command::Report => summary(ctx),
        Command::Pipeline { from, args } => pipeline(ctx, from.unwrap_or(StageName::Calibrate), args),
    }
}

fn summary(ctx: &Context) -> CliResult<String> {
    Ok(report::render(&report::report(ctx)?))
}

/// Runs the stages from `from` onwards. Stages before it must have left
/// their outputs, which are reused as they are.
pub fn pipeline(ctx: &Context, from: StageName, args: &CharacterizeArgs) -> CliResult<String> {
    for stage in StageName::ALL.iter().filter(|s| **s < from) {
        let missing: Vec<String> = stage
            .outputs()
            .into_iter()
            .filter(|name| !ctx.store.exists(name))
            .collect();
        if !missing.is_empty() {
            return Err(CliError::Config(format!(
                "cannot start at {from:?}: {stage:?} outputs missing ({})",
                missing.join(", ")
            )));
        }
        info!("{stage:?}: using cached outputs");
    }
    for stage in StageName::ALL.iter().filter(|s| **s >= from) {
        info!("{stage:?}");
        match stage {
            StageName::Calibrate => {
                stages::calibrate(ctx)?;
            }
            StageName::Collect => {
                stages::collect(ctx)?;
            }
            StageName::Characterize => {
                stages::characterize_det(ctx, args.bounds_file.as_deref())?;
            }
            StageName::Bayes => {
                stages::characterize_bayes(ctx)?;
            }
            StageName::Optimize => {
                for mode in [OptMode::Det, OptMode::Parity2, OptMode::Posterior] {
                    stages::optimize_stage(ctx, Gate::Swap02, mode, None)?;
                }
            }
            StageName::Tune => {
                stages::tune(ctx, None)?;
            }
            StageName::Validate => {
                stages::validate(
                    ctx,
                    &ValidateArgs {
                        pulse: None,
                        reps: None,
                        tomography: true,
                        wall_clock_offset_hours: None,
                    },
                )?;
            }
            StageName::Report => {}
        }
    }
    summary(ctx)
}
