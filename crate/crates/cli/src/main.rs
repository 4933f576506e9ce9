use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use equidiff_cli::check::{timed_suites, CheckOptions};
use equidiff_cli::commands::{
    eval_cmd, gen_data, loss_log_path, sample_cmd, trace_cmd, train_cmd, EvalArgs, TraceArgs,
};
use equidiff_cli::RunConfig;
use equidiff_core::backbone::Variant;
use equidiff_core::eval::EvalVariant;

#[derive(Parser)]
#[command(name = "equidiff", version, about = "Equivariant diffusion trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint plus a loss log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample futures for one vehicle of a trajectory CSV.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Ego vehicle id; defaults to the smallest id in the file.
        #[arg(long)]
        ego: Option<u64>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model variant (or the CV baseline) on the test split.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score the best of the N samples instead of their mean.
        #[arg(long)]
        best_of: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record intermediate sampler states.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        ego: Option<u64>,
        #[arg(long, value_delimiter = ',', default_value = "200,150,100,50,0")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Run the property suite on a fresh random initialization.
    Check {
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        inputs: usize,
        #[arg(long, default_value_t = 10)]
        rotations: usize,
        /// Scenes per neighbor count in the invariance suite.
        #[arg(long, default_value_t = 10)]
        invariance_scenes: usize,
        #[arg(long, default_value_t = 5)]
        grad_points: usize,
    },
}

fn config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config: c, out, seed } => {
            let cfg = config(c.as_deref())?;
            let s = gen_data(&cfg, &out, seed)?;
            println!("wrote {} train and {} test scenes to {}", s.train, s.test, out.display());
        }
        Command::Train { config: c, data, out } => {
            let cfg = config(c.as_deref())?;
            let outcome = train_cmd(&cfg, &data, &out, |row| println!("step {} loss {}", row.step, row.loss))?;
            println!(
                "wrote {} after {} steps (loss log {})",
                out.display(),
                outcome.checkpoint.step,
                loss_log_path(&out).display()
            );
        }
        Command::Sample {
            ckpt,
            scene,
            ego,
            n,
            seed,
            out,
        } => {
            sample_cmd(&ckpt, &scene, ego, n, seed, &out)?;
        }
        Command::Eval {
            ckpt,
            data,
            variant,
            n,
            seed,
            best_of,
            out,
        } => {
            let args = EvalArgs {
                variant: variant.parse::<EvalVariant>()?,
                samples_per_scene: n,
                seed,
                best_of,
            };
            let record = eval_cmd(ckpt.as_deref(), &data, &args)?;
            std::fs::write(&out, record.to_json()).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", record.to_kv());
        }
        Command::Trace {
            ckpt,
            scene,
            ego,
            steps,
            n,
            seed,
            out,
            svg,
        } => {
            let args = TraceArgs {
                ego,
                steps,
                samples: n,
                seed,
                svg_dir: svg,
            };
            trace_cmd(&ckpt, &scene, &args, &out)?;
        }
        Command::Check {
            variant,
            config: c,
            seed,
            inputs,
            rotations,
            invariance_scenes,
            grad_points,
        } => {
            let cfg = config(c.as_deref())?;
            let variant: Variant = variant.parse()?;
            let opts = CheckOptions {
                seed,
                inputs,
                rotations,
                invariance_scenes,
                grad_points,
                model: cfg.model.clone(),
                schedule: (cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end),
                ..CheckOptions::default()
            };
            let (mut total, mut failed) = (0, 0);
            for suite in timed_suites(&opts, variant)? {
                for p in &suite.properties {
                    println!("{p}");
                }
                eprintln!("{} suite: {:.2} s", suite.name, suite.elapsed.as_secs_f64());
                total += suite.properties.len();
                failed += suite.properties.iter().filter(|p| !p.pass()).count();
            }
            println!("{total} properties, {failed} failed");
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
