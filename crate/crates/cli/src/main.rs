use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rtmlab::harness::{self, BenchOptions, ExperimentConfig};
use rtmlab::imle::EPSILON_Q10;

#[derive(Parser)]
#[command(name = "rtmlab", version, about = "Recursive token mapper experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory that receives the run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write a checkpoint plus history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides imle.steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        h_override: Option<usize>,
    },
    /// Evaluate a checkpoint at several refinement-step counts.
    SweepH {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        hs: Vec<usize>,
    },
    /// Train every mapper in `ablate.mappers` and compare.
    AblateDepth {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo check of the pool-coverage bound.
    LemmaLab {
        #[arg(long, default_value_t = EPSILON_Q10)]
        epsilon: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,50")]
        m: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Median generator latency.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 200)]
        passes: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        #[arg(long)]
        h_override: Option<usize>,
        /// Time the mapper alone.
        #[arg(long)]
        mapper_only: bool,
    },
    /// Write the configured dataset as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    let mut cfg = ExperimentConfig::parse(&text).with_context(|| format!("in {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train { common, checkpoint, steps } => {
            let mut cfg = load(&common)?;
            if let Some(s) = steps {
                cfg.imle.steps = s;
            }
            let outcome = harness::cmd_train(&cfg, &common.out, checkpoint.as_deref(), &mut |_| {})?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "step {}  loss {:.6}  matched distance {:.4}  acceptance {:.3}",
                    last.step, last.loss, last.mean_distance, last.acceptance
                );
            }
            println!("{}", outcome.checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoint,
            h_override,
        } => {
            let cfg = load(&common)?;
            let r = harness::cmd_eval(&cfg, &checkpoint, h_override, Some(&common.out))?;
            println!("{r:#?}");
        }
        Command::SweepH { common, checkpoint, hs } => {
            let cfg = load(&common)?;
            for (h, r) in harness::cmd_sweep_h(&cfg, &checkpoint, &hs, Some(&common.out))? {
                println!(
                    "H={h:<3} precision {:.3}  recall {:.3}  coverage {:.3}  fid {:.4}",
                    r.precision, r.recall, r.coverage, r.fid
                );
            }
        }
        Command::AblateDepth { common } => {
            let cfg = load(&common)?;
            for row in harness::cmd_ablate_depth(&cfg, Some(&common.out))? {
                println!(
                    "{:<10} params {:>8}  depth {:>3}  loss {:.6}  recall {:.3}  fid {:.4}",
                    row.mapper, row.parameter_count, row.sequential_depth, row.final_loss, row.report.recall, row.report.fid
                );
            }
        }
        Command::LemmaLab {
            epsilon,
            m,
            trials,
            seed,
            out,
        } => {
            ensure_dir(&out)?;
            let r = harness::cmd_lemma_lab(epsilon, &m, trials, seed, Some(&out))?;
            println!("q_hat {:.5}", r.q_hat);
            for row in &r.rows {
                println!(
                    "m {:>4}  empirical {:.5}  bound {:.5}  se {:.5}",
                    row.m, row.empirical, row.bound, row.se
                );
            }
        }
        Command::Bench {
            common,
            checkpoint,
            batch,
            passes,
            warmup,
            h_override,
            mapper_only,
        } => {
            let cfg = load(&common)?;
            let opts = BenchOptions {
                batch,
                passes,
                warmup,
                h_override,
                mapper_only,
            };
            let r = harness::cmd_bench(&cfg, &checkpoint, opts, Some(&common.out))?;
            println!(
                "median batch {:.6} s  per image {:.3e} s  ({} passes, {} warm-up)",
                r.median_batch_seconds, r.per_image_seconds, r.passes, r.warmup
            );
        }
        Command::GenData { common } => {
            let cfg = load(&common)?;
            ensure_dir(&common.out)?;
            println!("{}", harness::cmd_gen_data(&cfg, &common.out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
