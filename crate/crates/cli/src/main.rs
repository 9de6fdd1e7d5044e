use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dlo_cli::commands::{self, EvalArgs, FuseArgs, InferArgs, TrainArgs};
use dlo_cli::config::RunConfig;
use dlo_cli::errors::Category;

#[derive(Parser)]
#[command(name = "dlo", version, about = "Occlusion-robust 3-D state estimation of deformable linear objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML run configuration; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run every loop on the calling thread.
    #[arg(long)]
    sequential: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        if let Some(p) = &self.config {
            if !p.exists() {
                return Err(anyhow::anyhow!("config file {} does not exist", p.display()).context(Category::Config));
            }
        }
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides).map_err(|e| e.context(Category::Config))?;
        if self.sequential {
            cfg.parallel = false;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate ropes and write a train/validation dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the estimator; writes the best checkpoint, `<out>.last` and a JSON-lines log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>.last` when it exists.
        #[arg(long)]
        resume: bool,
        /// Overfit the first N training frames without augmentation.
        #[arg(long, value_name = "N")]
        overfit: Option<usize>,
        /// Full-batch steps in overfit mode.
        #[arg(long, default_value_t = 500)]
        steps: usize,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add the fusion-threshold and jitter sweeps.
        #[arg(long)]
        sweep: bool,
    },
    /// Estimate the node sequence of one cloud (frame record or XYZ text).
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Vote on the frame's exact ground-truth field instead of the network.
        #[arg(long)]
        gt_replay: bool,
    },
    /// Fuse regression and voting node files given per-node visibility.
    Fuse {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        reg: PathBuf,
        #[arg(long)]
        vot: PathBuf,
        #[arg(long)]
        visibility: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every layer and the composed toy network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: perturb the analytic gradient of the named check.
        #[arg(long, value_name = "CHECK")]
        corrupt: Option<String>,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { cfg, out } => commands::gen_data(&cfg.load()?, &out),
        Command::Train { cfg, data, out, resume, overfit, steps } => commands::train_cmd(
            &cfg.load()?,
            &TrainArgs { data: &data, out: &out, resume, overfit, steps },
        ),
        Command::Eval { cfg, checkpoint, data, out, sweep } => commands::eval_cmd(
            &cfg.load()?,
            &EvalArgs { checkpoint: &checkpoint, data: &data, out: &out, sweep },
        ),
        Command::Infer { cfg, checkpoint, cloud, out, gt_replay } => commands::infer_cmd(
            &cfg.load()?,
            &InferArgs { checkpoint: checkpoint.as_deref(), cloud: &cloud, out: &out, gt_replay },
        ),
        Command::Fuse { cfg, reg, vot, visibility, out } => commands::fuse_cmd(
            &cfg.load()?,
            &FuseArgs { reg: &reg, vot: &vot, visibility: &visibility, out: &out },
        ),
        Command::Gradcheck { seed, corrupt } => {
            let o = commands::gradcheck_cmd(seed, corrupt.as_deref())?;
            println!("{}", o.text);
            if !o.passed {
                return Err(commands::check_failed(o.text.lines().last().unwrap_or("")));
            }
            Ok(String::new())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let cat = Category::of(&e);
            eprintln!("error[{}]: {}", cat.name(), dlo_cli::describe(&e));
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
