use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use pdf_core::env::Shift;
use pdf_core::harness::{
    budget_sweep, compare_voting, emit_metrics, greedy_success, run_variant, summarize, train_snapshot, ConfigFile,
    ExperimentConfig, Format, MetricsRow, Variant,
};
use pdf_core::{load_policy, serialize_snapshot, BaselineMode, PdfError, PolicySnapshot, StoredWeights, VoteMode};

#[derive(Parser)]
#[command(name = "pdf", version, about = "Test-time adaptation of a frozen tokenized policy from delayed feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the frozen policy by behavior cloning on canonical expert demonstrations.
    TrainBc {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the snapshot (defaults to the config's `snapshot`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one variant and write one metrics row per (seed, task).
    Run {
        #[arg(long)]
        variant: Option<Variant>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full method once per augmentation budget cap.
    SweepBudget {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        budgets: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured variant under dimension-wise and action-wise voting.
    CompareVoting {
        #[arg(long)]
        variant: Option<Variant>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frozen policy snapshot (overrides the config's `snapshot`).
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Metrics output file.
    #[arg(long)]
    out: PathBuf,
    /// csv or jsonl; defaults to the output file's extension.
    #[arg(long)]
    format: Option<Format>,
    /// dim or action.
    #[arg(long)]
    vote: Option<VoteMode>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    /// fixed:<v> or mean:<window>.
    #[arg(long)]
    baseline: Option<BaselineMode>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps_per_episode: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    eval_rollouts: Option<usize>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated task list.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<u64>>,
    /// Environment shift: none, pose_shift:<n>, distractor:<n> or mask_target.
    #[arg(long)]
    shift: Option<Shift>,
    /// Write wall_time_ms as 0 so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

fn load_config(path: Option<&Path>) -> pdf_core::Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::default()),
    }
}

impl Common {
    fn experiment(&self, file: &ConfigFile, variant: Option<Variant>) -> ExperimentConfig {
        let mut cfg = file.experiment_config();
        if let Some(v) = variant {
            cfg.variant = v;
        }
        if let Some(v) = self.vote {
            cfg.vote = v;
        }
        let hp = &mut cfg.hp;
        if let Some(v) = self.lambda {
            hp.lambda = v;
        }
        if let Some(v) = self.lambda_kl {
            hp.lambda_kl = v;
        }
        if let Some(v) = self.baseline {
            hp.baseline = v;
        }
        if let Some(v) = self.lr {
            hp.learning_rate = v;
        }
        if let Some(v) = self.batch {
            hp.batch_size = v;
        }
        if let Some(v) = self.steps_per_episode {
            hp.grad_steps_per_episode = v;
        }
        if let Some(v) = self.n_max {
            hp.n_max = v;
        }
        if let Some(v) = self.episodes {
            cfg.episodes = v;
        }
        if let Some(v) = self.eval_rollouts {
            cfg.eval_rollouts = v;
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = &self.tasks {
            cfg.tasks = v.clone();
        }
        if let Some(v) = self.shift {
            cfg.env.shift = v;
        }
        cfg
    }

    fn snapshot(&self, file: &ConfigFile) -> pdf_core::Result<PolicySnapshot> {
        let path = self
            .snapshot
            .clone()
            .or_else(|| file.snapshot.clone())
            .ok_or_else(|| PdfError::InvalidConfig("no snapshot given (--snapshot or `snapshot` in config)".into()))?;
        if !path.exists() {
            return Err(PdfError::MissingSnapshot(path));
        }
        load_policy(&path, Some(&file.arch))
    }

    fn write(&self, rows: &[MetricsRow]) -> pdf_core::Result<()> {
        let format = self.format.unwrap_or_else(|| Format::from_path(&self.out));
        emit_metrics(rows, &self.out, format, !self.no_timing)?;
        for s in summarize(rows) {
            println!(
                "{:<10} vote={:<11} n_max={} seeds={:>2} success={:.4} (se {:.4}) budget={:.3}",
                s.variant, s.vote, s.n_max, s.seeds, s.mean, s.std_error, s.mean_budget
            );
        }
        println!("wrote {} rows to {}", rows.len(), self.out.display());
        Ok(())
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainBc {
            config,
            out,
            epochs,
            seed,
        } => {
            let file = load_config(config.as_deref())?;
            let mut opts = file.bc.options();
            if let Some(e) = epochs {
                opts.epochs = e;
            }
            if let Some(s) = seed {
                opts.seed = s;
            }
            let out = out
                .or_else(|| file.snapshot.clone())
                .ok_or_else(|| PdfError::InvalidConfig("no output path (--out or `snapshot` in config)".into()))?;
            let snapshot = train_snapshot(file.arch, &file.env, &file.bc.tasks, &opts)?;
            let canonical = greedy_success(&snapshot, &file.env, Shift::None, &[0], &file.bc.tasks)?;
            let checksum = snapshot.checksum();
            serialize_snapshot(&StoredWeights::Policy(snapshot), &out)?;
            println!("canonical greedy success {canonical:.4}");
            println!("sha256 {checksum}");
            println!("wrote {}", out.display());
        }
        Command::Run { variant, common } => {
            let file = load_config(common.config.as_deref())?;
            let cfg = common.experiment(&file, variant);
            let snapshot = common.snapshot(&file)?;
            let rows = run_variant(&snapshot, &cfg).context("experiment failed")?;
            common.write(&rows)?;
        }
        Command::SweepBudget { budgets, common } => {
            let file = load_config(common.config.as_deref())?;
            let cfg = common.experiment(&file, Some(Variant::PdfFull));
            let snapshot = common.snapshot(&file)?;
            let rows = budget_sweep(&snapshot, &cfg, &budgets).context("budget sweep failed")?;
            common.write(&rows)?;
        }
        Command::CompareVoting { variant, common } => {
            let file = load_config(common.config.as_deref())?;
            let cfg = common.experiment(&file, variant);
            let snapshot = common.snapshot(&file)?;
            let rows = compare_voting(&snapshot, &cfg).context("voting comparison failed")?;
            common.write(&rows)?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<PdfError>()) {
        Some(e) if e.is_config_error() => 2,
        Some(e) if e.is_numeric_error() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
