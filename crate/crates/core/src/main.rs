use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ttsnap::harness::{
    cmd_evaluate, cmd_gen_pool, cmd_search, cmd_sweep, cmd_train_narf, render, ExperimentConfig,
    Role, ALGORITHMS,
};
use ttsnap::par::Exec;
use ttsnap::{Error, Result};

#[derive(Parser)]
#[command(name = "ttsnap", version, about = "Budgeted pruned search over toy diffusion trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `master_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run every loop on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Train,
    Eval,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and/or evaluation trajectory pools.
    GenPool {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        role: RoleArg,
    },
    /// Pretrain and finetune the noise-aware verifiers; report Kendall tables.
    TrainNarf {
        #[command(flatten)]
        common: Common,
    },
    /// Seed-averaged reward-vs-budget curves.
    Search {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of bon,ttsp,ttsnap.
        #[arg(long, value_delimiter = ',', default_values_t = ALGORITHMS.map(String::from))]
        algorithm: Vec<String>,
    },
    /// Integrated gains and relative performance from persisted curves.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Rank pruning schedules over the configured grid.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Print the default config as JSON.
    DefaultConfig,
}

fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf, Exec)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::InvalidArgument("no output directory: pass --out".into()))?;
    let exec = if common.sequential { Exec::Sequential } else { Exec::default() };
    Ok((cfg, out, exec))
}

fn run(cli: Cli) -> Result<()> {
    let t0 = Instant::now();
    match cli.command {
        Command::GenPool { common, role } => {
            let (cfg, out, exec) = setup(&common)?;
            let roles: &[Role] = match role {
                RoleArg::Train => &[Role::Train],
                RoleArg::Eval => &[Role::Eval],
                RoleArg::All => &[Role::Train, Role::Eval],
            };
            for s in cmd_gen_pool(exec, &cfg, &out, roles)? {
                println!(
                    "{}: {} pools x {} trajectories, mean final-reward std {:.4}",
                    s.role, s.instances, s.per_instance, s.mean_reward_std
                );
            }
        }
        Command::TrainNarf { common } => {
            let (cfg, out, exec) = setup(&common)?;
            let r = cmd_train_narf(exec, &cfg, &out)?;
            println!("held-out Kendall tau, noisiest {} steps:", r.noisiest_steps);
            for k in r.kendall.keys() {
                println!("  {k:<18} {:.4}", r.noisy_mean(k).unwrap_or(f64::NAN));
            }
        }
        Command::Search { common, algorithm } => {
            let (cfg, out, exec) = setup(&common)?;
            let algs: Vec<&str> = algorithm.iter().map(String::as_str).collect();
            for a in cmd_search(exec, &cfg, &out, &algs)? {
                let c = &a.curves[0];
                println!(
                    "{:<7} N {}..{}  reward {:.4} -> {:.4}",
                    a.algorithm,
                    a.counts[0],
                    a.counts[a.counts.len() - 1],
                    c.rewards[0],
                    c.rewards[c.rewards.len() - 1]
                );
            }
        }
        Command::Evaluate { common } => {
            let (cfg, out, _) = setup(&common)?;
            print!("{}", render(&cmd_evaluate(&cfg, &out)?));
        }
        Command::Sweep { common } => {
            let (cfg, out, exec) = setup(&common)?;
            let s = cmd_sweep(exec, &cfg, &out)?;
            for (m, e) in &s.best_per_stages {
                let (t, a) = e.schedule.label();
                println!("{m} stage(s): T={t} A={a} omega={:+.4}", e.omega);
            }
            println!("{} configs ranked, {} skipped", s.report.entries.len(), s.report.skipped.len());
        }
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
        }
    }
    log::info!("done in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
