use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rtlab_core::config::ExperimentConfig;
use rtlab_core::harness;
use rtlab_core::Error;

/// Random-teacher distillation experiments.
#[derive(Parser, Debug)]
#[command(name = "rtlab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to `out` from the config, then
    /// `$RTLAB_OUT/<command>`, then `runs/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted config override, e.g. `distill.alpha=0.5`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Distill random teachers and probe teacher and student.
    Distill,
    /// Linear and K-NN probes of saved encoders.
    Probe {
        /// Checkpoints to probe.
        checkpoints: Vec<PathBuf>,
    },
    /// Metric grids over a two-dimensional parameter plane.
    Landscape {
        /// Anchor checkpoint as NAME=PATH. Without anchors they are trained.
        #[arg(long = "anchor", value_name = "NAME=PATH")]
        anchors: Vec<String>,
    },
    /// Iterative magnitude pruning from student and random rewind points.
    Imp {
        /// Student checkpoint to rewind to instead of distilling one per seed.
        #[arg(long)]
        rewind: Option<PathBuf>,
    },
    /// Linear mode connectivity between runs with different orderings.
    Lmc {
        /// Student checkpoint used as init instead of distilling one per seed.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// A second distillation round with the first student as teacher.
    Restart,
    /// Distillation on Gaussian-noise inputs.
    NoiseControl,
    /// Distillation on training subsets of increasing size.
    SizeSweep,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Distill => "distill",
            Command::Probe { .. } => "probe",
            Command::Landscape { .. } => "landscape",
            Command::Imp { .. } => "imp",
            Command::Lmc { .. } => "lmc",
            Command::Restart => "restart",
            Command::NoiseControl => "noise-control",
            Command::SizeSweep => "size-sweep",
        }
    }
}

/// Exit codes: 2 usage, 3 config, 4 input data or files, 5 contract or
/// domain violations, 6 numerical divergence, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 3,
        Some(Error::Io(_) | Error::Csv(_) | Error::Parse(_) | Error::Checkpoint { .. }) => 4,
        Some(
            Error::Contract(_) | Error::Domain(_) | Error::Shape(_) | Error::Layout(_) | Error::Degenerate(_),
        ) => 5,
        Some(Error::Diverged { .. } | Error::NonFinite(_)) => 6,
        None => 1,
    }
}

fn parse_anchors(items: &[String]) -> Result<BTreeMap<String, PathBuf>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.to_string(), PathBuf::from(v)))
                .ok_or_else(|| Error::Config(format!("anchor {s:?} is not NAME=PATH")).into())
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.common.overrides.clone();
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = ExperimentConfig::load(cli.common.config.as_deref(), &overrides)?;
    let out = harness::resolve_out(&cfg, cli.common.out.as_deref(), cli.command.name());
    match &cli.command {
        Command::Distill => {
            for r in harness::cmd_distill(&cfg, &out)? {
                println!(
                    "alpha={} seed={} teacher={:.4} student={:.4} gain={:+.4}",
                    r.alpha, r.seed, r.teacher_accuracy, r.student_accuracy, r.gain
                );
            }
        }
        Command::NoiseControl => {
            for r in harness::cmd_noise_control(&cfg, &out)? {
                println!("seed={} teacher={:.4} student={:.4} gain={:+.4}", r.seed, r.teacher_accuracy, r.student_accuracy, r.gain);
            }
        }
        Command::SizeSweep => {
            for r in harness::cmd_size_sweep(&cfg, &out)? {
                println!("n={} seed={} teacher={:.4} student={:.4}", r.n_sub, r.seed, r.teacher_accuracy, r.student_accuracy);
            }
        }
        Command::Restart => {
            let (_, summary) = harness::cmd_restart(&cfg, &out)?;
            for r in summary {
                println!(
                    "seed={} round={} initial_kl={:.3e} final_dist={:.4} student={:.4}",
                    r.seed, r.round, r.initial_kl, r.final_dist, r.student_accuracy
                );
            }
        }
        Command::Probe { checkpoints } => {
            for r in harness::cmd_probe(&cfg, checkpoints, &out)? {
                println!("{} {} train={:.4} test={:.4}", r.model, r.kind, r.train_accuracy, r.test_accuracy);
            }
        }
        Command::Landscape { anchors } => {
            let res = harness::cmd_landscape(&cfg, &parse_anchors(anchors)?, &out)?;
            for g in &res.grids {
                if let Some((i, j, v)) = g.argmin() {
                    println!("{} min {:.3e} at ({}, {})", g.metric.as_str(), v, g.axis1[i], g.axis2[j]);
                }
            }
        }
        Command::Imp { rewind } => {
            for r in harness::cmd_imp(&cfg, rewind.as_deref(), &out)? {
                println!("arm={} seed={} sparsity={:.4} accuracy={:.4}", r.arm, r.seed, r.sparsity, r.test_accuracy);
            }
        }
        Command::Lmc { init } => {
            let (barriers, _) = harness::cmd_lmc(&cfg, init.as_deref(), &out)?;
            for b in barriers {
                println!("arm={} init={} pair=({}, {}) barrier={:.4}", b.arm, b.init, b.i, b.j, b.barrier);
            }
        }
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("rtlab failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
