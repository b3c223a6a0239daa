//! Command-line entry points: `train`, `gen-demos`, `eval`, `verify`.
//!
//! Exit codes: 0 on success, 1 on a failed verification check or aborted
//! run, 2 on usage or configuration errors (unknown flags/keys, bad fixture
//! names, demo/environment hash mismatches).

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::data::{demo_save, generate_demos};
use crate::env::fixture;
use crate::error::Error;
use crate::model::QModel;
use crate::soft::soft_value_iteration;
use crate::trainer::{evaluate, train, Algorithm, ConfigFile, TrainConfig};
use crate::verify::run_all;

#[derive(Parser)]
#[command(
    name = "softq",
    version,
    about = "Soft Q-learning pretrained with reward-free imperfect demonstrations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training configuration and write metrics + checkpoints.
    Train {
        /// TOML config file (keys mirror the TrainConfig fields).
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the algorithm (ours, soft_q, bc, dqfd).
        #[arg(long)]
        algorithm: Option<String>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Fan out isolated runs over an inclusive seed range `a..b`,
        /// each in its own `seed_<k>` subdirectory.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Build an environment, solve it, and write imperfect expert demos.
    GenDemos {
        #[arg(long)]
        env: String,
        /// Softmax temperature applied to the optimal action values
        /// (0 = greedy with uniform tie-break).
        #[arg(long)]
        temperature: f64,
        /// Probability of replacing the expert action with a uniform one.
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Entropy temperature used when solving for the optimal values.
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
    },
    /// Evaluate a model checkpoint on an environment.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
    },
    /// Run the numerical verification suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Emit the reports as a JSON array instead of summary lines.
        #[arg(long)]
        json: bool,
    },
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::UnknownFixture(_)
        | Error::EnvHashMismatch { .. }
        | Error::DemoFormat { .. }
        | Error::InvalidSpec(_) => 2,
        _ => 1,
    }
}

fn parse_seed_range(spec: &str) -> Result<std::ops::RangeInclusive<u64>, Error> {
    let (a, b) = spec
        .split_once("..")
        .ok_or_else(|| Error::Config(format!("bad seed range `{spec}` (expected a..b)")))?;
    let a: u64 = a
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad seed range `{spec}`")))?;
    let b: u64 = b
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad seed range `{spec}`")))?;
    if b < a {
        return Err(Error::Config(format!("empty seed range `{spec}`")));
    }
    Ok(a..=b)
}

fn resolve_train_config(
    config: &PathBuf,
    seed: Option<u64>,
    algorithm: Option<&str>,
    out_dir: Option<&PathBuf>,
) -> Result<TrainConfig, Error> {
    let file = ConfigFile::load(config)?;
    let alg = match (algorithm, file.algorithm) {
        (Some(flag), _) => flag.parse::<Algorithm>()?,
        (None, Some(from_file)) => from_file,
        (None, None) => {
            return Err(Error::Config(
                "algorithm missing: set it in the config file or pass --algorithm".into(),
            ))
        }
    };
    let mut cfg = TrainConfig::defaults(alg);
    file.apply(&mut cfg);
    cfg.algorithm = alg;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn last_eval(metrics: &[crate::trainer::MetricsRow]) -> Option<f64> {
    metrics.iter().rev().find_map(|m| m.eval_return_mean)
}

fn cmd_train(
    config: PathBuf,
    seed: Option<u64>,
    algorithm: Option<String>,
    out_dir: Option<PathBuf>,
    seeds: Option<String>,
) -> Result<(), Error> {
    let base = resolve_train_config(&config, seed, algorithm.as_deref(), out_dir.as_ref())?;
    match seeds {
        None => {
            let result = train(&base)?;
            println!(
                "run finished: algorithm={} seed={} steps={} episodes={} final_eval={}",
                base.algorithm,
                base.seed,
                base.max_timesteps,
                result.episodes,
                last_eval(&result.metrics)
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "-".into())
            );
            if let Some(dir) = &base.out_dir {
                println!("outputs in {}", dir.display());
            }
            Ok(())
        }
        Some(range_spec) => {
            let range = parse_seed_range(&range_spec)?;
            let mut handles = Vec::new();
            for k in range {
                let mut cfg = base.clone();
                cfg.seed = k;
                cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(format!("seed_{k}")));
                handles.push((k, std::thread::spawn(move || train(&cfg))));
            }
            let mut first_err: Option<Error> = None;
            for (k, handle) in handles {
                match handle.join() {
                    Ok(Ok(result)) => println!(
                        "seed {k}: episodes={} final_eval={}",
                        result.episodes,
                        last_eval(&result.metrics)
                            .map(|v| v.to_string())
                            .unwrap_or_else(|| "-".into())
                    ),
                    Ok(Err(e)) => {
                        eprintln!("seed {k}: failed: {e}");
                        first_err.get_or_insert(e);
                    }
                    Err(_) => {
                        eprintln!("seed {k}: worker panicked");
                        first_err.get_or_insert(Error::Internal("worker panicked".into()));
                    }
                }
            }
            match first_err {
                None => Ok(()),
                Some(e) => Err(e),
            }
        }
    }
}

fn cmd_gen_demos(
    env: String,
    temperature: f64,
    noise: f64,
    steps: usize,
    seed: u64,
    out: PathBuf,
    epsilon: f64,
    gamma: f64,
) -> Result<(), Error> {
    let fix = fixture(&env)?;
    let vi = soft_value_iteration(&fix.mdp, epsilon, gamma, 1e-10, 1_000_000)?;
    let ds = generate_demos(
        &fix.mdp,
        &vi.q,
        temperature,
        noise,
        steps,
        fix.max_episode_steps,
        seed,
    )?;
    let mean = ds.meta.mean_return_for_reporting();
    demo_save(&ds, &out)?;
    println!("wrote {} steps to {}", ds.len(), out.display());
    println!("measured mean episode return: {mean}");
    Ok(())
}

fn cmd_eval(
    checkpoint: PathBuf,
    env: String,
    episodes: usize,
    seed: u64,
    epsilon: f64,
) -> Result<(), Error> {
    let fix = fixture(&env)?;
    let model = QModel::load(&checkpoint)?;
    if model.n_states() != fix.mdp.n_states() || model.n_actions() != fix.mdp.n_actions() {
        return Err(Error::Config(format!(
            "checkpoint shape ({} states, {} actions) does not match env `{}`",
            model.n_states(),
            model.n_actions(),
            env
        )));
    }
    let (mean, std) = evaluate(
        &model,
        &fix.mdp,
        episodes,
        epsilon,
        fix.max_episode_steps,
        seed,
    )?;
    println!("{mean} ± {std} over {episodes} episodes");
    Ok(())
}

fn cmd_verify(seed: u64, json: bool) -> Result<bool, Error> {
    let reports = run_all(seed);
    if json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        for r in &reports {
            println!("{}", r.summary_line());
        }
    }
    Ok(reports.iter().all(|r| r.passed))
}

/// Parses and executes an invocation; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; keep its help/version exit at 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Train {
            config,
            seed,
            algorithm,
            out_dir,
            seeds,
        } => cmd_train(config, seed, algorithm, out_dir, seeds).map(|()| true),
        Cmd::GenDemos {
            env,
            temperature,
            noise,
            steps,
            seed,
            out,
            epsilon,
            gamma,
        } => {
            cmd_gen_demos(env, temperature, noise, steps, seed, out, epsilon, gamma).map(|()| true)
        }
        Cmd::Eval {
            checkpoint,
            env,
            episodes,
            seed,
            epsilon,
        } => cmd_eval(checkpoint, env, episodes, seed, epsilon).map(|()| true),
        Cmd::Verify { seed, json } => cmd_verify(seed, json),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
