use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use grt::harness::config::OUTPUT_ROOT_ENV;
use grt::harness::eval::{write_logs, SplitName};
use grt::harness::report::{experiment_table, render_dir, run_table};
use grt::harness::{ablation_run, evaluate, evaluate_checkpoint, fusion_grid, train, Dataset, ExperimentConfig, HarnessError, OracleDecoder};
use grt::synth::{generate_split, write_split};

/// Edge-feature fusion experiments on synthetic spatial QA scenes.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, e.g. `--set lr=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_updates: Option<usize>,
    /// Run name under the output root.
    #[arg(long)]
    name: Option<String>,
    /// Directory that run outputs are written under.
    #[arg(long, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,
}

impl ConfigArgs {
    fn resolve(&self, default_name: &str) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| HarnessError::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.max_updates {
            cfg.max_updates = m;
        }
        if let Some(name) = &self.name {
            cfg.output_dir = Some(self.output_root.join(name));
        } else if cfg.output_dir.is_none() {
            cfg.output_dir = Some(self.output_root.join(format!("{default_name}-{}", cfg.hash())));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val scene files and a manifest.
    GenData {
        /// Seed of the split; `--seed` is the model seed and is ignored here.
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long, default_value_t = 2000)]
        train_size: usize,
        #[arg(long, default_value_t = 500)]
        val_size: usize,
        /// Generator keys (gen_*, feature_dims) are honored from here.
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model and write its report, checkpoint and decode logs.
    Train(ConfigArgs),
    /// Greedy-decode a split with a saved checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Decode with the ground truth instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Baseline plus the six (location, function) fusion cells.
    FusionGrid(ConfigArgs),
    /// All features plus each edge feature left out, fused at the values.
    Ablate(ConfigArgs),
    /// Render a run or experiment directory.
    Report { dir: PathBuf },
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData {
            data_seed,
            train_size,
            val_size,
            cfg,
        } => {
            let c = cfg.resolve("data")?;
            let dir = c.output_dir.clone().expect("resolved");
            let split = generate_split(data_seed, (train_size, val_size), &c.gen)?;
            write_split(&dir, &split)?;
            println!("wrote {} train and {} val scenes to {}", train_size, val_size, dir.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve("train")?;
            let data = Dataset::for_config(&cfg)?;
            let out = train(&cfg, &data)?;
            print!("{}", run_table(&out.report));
            println!("outputs in {}", cfg.output_dir.as_ref().expect("resolved").display());
        }
        Command::Eval {
            cfg,
            checkpoint,
            oracle,
            split,
        } => {
            let c = cfg.resolve("eval")?;
            let split = SplitName::parse(&split).ok_or_else(|| HarnessError::Config(format!("unknown split {split:?}")))?;
            let data = Dataset::for_config(&c)?;
            let result = if oracle {
                let examples = if split == SplitName::Train { &data.train } else { &data.val };
                evaluate(&OracleDecoder, examples, c.workers)?
            } else {
                let ckpt = checkpoint.ok_or_else(|| HarnessError::Config("--checkpoint is required unless --oracle is given".into()))?;
                evaluate_checkpoint(&c, &ckpt, &data, split)?
            };
            let dir = c.output_dir.expect("resolved");
            std::fs::create_dir_all(&dir)?;
            write_logs(&dir.join("decodes.jsonl"), &result.logs)?;
            println!("accuracy {:.4} over {} instances; decodes in {}", result.accuracy, result.logs.len(), dir.display());
        }
        Command::FusionGrid(args) => {
            let cfg = args.resolve("fusion-grid")?;
            let data = Dataset::for_config(&cfg)?;
            let report = fusion_grid(&cfg, &data)?;
            print!("{}", experiment_table(&report));
        }
        Command::Ablate(args) => {
            let cfg = args.resolve("ablate")?;
            let data = Dataset::for_config(&cfg)?;
            let report = ablation_run(&cfg, &data)?;
            print!("{}", experiment_table(&report));
        }
        Command::Report { dir } => {
            let text = render_dir(&dir)?;
            print!("{text}");
            write_text(&dir, "summary.txt", &text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
