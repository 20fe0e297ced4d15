//! `dart`: pretrain the segmentation network, train, evaluate, run the
//! ablation grid, and re-export metrics.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dart_core::nn::{read_checkpoint, write_checkpoint};
use dart_core::perception::SegNet;
use dart_core::toy_env::SplitName;
use dart_core::trainer::{
    ablation_csv, ablation_medians, evaluate_run, export_metrics, pretrain, read_metrics_csv, run_ablation, run_training, RunOptions,
    TrainConfig, Variant,
};

#[derive(Parser)]
#[command(name = "dart", version, about = "Task-driven diffusion policy on toy articulated objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of the JSON config.
#[derive(clap::Args, Clone)]
struct Overrides {
    /// JSON config file; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; every random stream is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Environment step budget.
    #[arg(long)]
    total_steps: Option<usize>,
    /// Evaluate every this many environment steps.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Deploy-mode episodes per split at each evaluation.
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Task formula, e.g. "F(toilet_approached & F(lid_grasped & F lid_opened))".
    #[arg(long)]
    task: Option<String>,
    /// Feed the task embedding and the task reward to the agent.
    #[arg(long)]
    use_ltl: Option<bool>,
    /// Feed the contact planner's target point and its reward to the agent.
    #[arg(long)]
    use_affordance: Option<bool>,
}

impl Overrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.total_steps {
            cfg.total_steps = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.eval_episodes {
            cfg.eval_episodes = v;
        }
        if let Some(v) = &self.task {
            cfg.task = v.clone();
        }
        if let Some(v) = self.use_ltl {
            cfg.use_ltl = v;
        }
        if let Some(v) = self.use_affordance {
            cfg.use_affordance = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Seen,
    Unseen,
    Transfer,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Seen => SplitName::Seen,
            SplitArg::Unseen => SplitName::Unseen,
            SplitArg::Transfer => SplitName::Transfer,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config as JSON.
    DefaultConfig,
    /// Pretrain the segmentation network and write its checkpoint.
    PretrainSeg {
        #[command(flatten)]
        cfg: Overrides,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one agent into a run directory.
    Train {
        #[command(flatten)]
        cfg: Overrides,
        /// Pretrained segmentation checkpoint; pretrained on the fly if absent.
        #[arg(long)]
        seg: Option<PathBuf>,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Suppress per-evaluation progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a run directory in deploy mode.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Object split to evaluate on.
        #[arg(long, value_enum, default_value = "seen")]
        split: SplitArg,
        /// Number of episodes, cycling through the split's objects.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Seed of the evaluation episodes.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every ablation variant on every seed.
    Ablate {
        #[command(flatten)]
        cfg: Overrides,
        /// Pretrained segmentation checkpoint; pretrained on the fly if absent.
        #[arg(long)]
        seg: Option<PathBuf>,
        /// Directory receiving one run per variant and seed.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Suppress per-evaluation progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Rewrite the metric exports of a run from its metrics.csv.
    Export {
        /// Run directory containing metrics.csv.
        #[arg(long)]
        run: PathBuf,
        /// Destination directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_or_pretrain(seg: Option<&Path>, cfg: &TrainConfig) -> Result<SegNet> {
    if let Some(p) = seg {
        return Ok(SegNet::from_checkpoint(&read_checkpoint(p)?)?);
    }
    eprintln!("pretraining segmentation network");
    let (net, report) = pretrain(&cfg.pretrain)?;
    eprintln!("held-out accuracy {:.4}", report.test_accuracy);
    Ok(net)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::DefaultConfig => println!("{}", serde_json::to_string_pretty(&TrainConfig::default())?),
        Command::PretrainSeg { cfg, out } => {
            let cfg = cfg.resolve()?;
            let (net, report) = pretrain(&cfg.pretrain)?;
            write_checkpoint(&out, &net.to_checkpoint()?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Train { cfg, seg, out, quiet } => {
            let cfg = cfg.resolve()?;
            let net = load_or_pretrain(seg.as_deref(), &cfg)?;
            let opts = RunOptions {
                out_dir: Some(out.clone()),
                verbose: !quiet,
            };
            let run = run_training(&cfg, net, &opts)?;
            match run.history.iter().rev().find(|r| r.split == "seen") {
                Some(r) => println!("final seen success {:.3} at step {}", r.success_rate, r.step),
                None => println!("no evaluations (budget {})", cfg.total_steps),
            }
            println!("run written to {}", out.display());
        }
        Command::Eval { run, split, episodes, seed } => {
            let res = evaluate_run(&run, split.into(), episodes, seed)?;
            println!("{}", serde_json::to_string_pretty(&res)?);
        }
        Command::Ablate { cfg, seg, out, seeds, quiet } => {
            if seeds.is_empty() {
                bail!("at least one seed is required");
            }
            let cfg = cfg.resolve()?;
            let net = load_or_pretrain(seg.as_deref(), &cfg)?;
            let opts = RunOptions {
                out_dir: Some(out.clone()),
                verbose: !quiet,
            };
            let rows = run_ablation(&cfg, &seeds, &Variant::ALL, &net, &opts)?;
            print!("{}", ablation_csv(&rows));
            for (variant, m) in ablation_medians(&rows, "seen") {
                println!("median seen success {variant}: {m:.3}");
            }
        }
        Command::Export { run, out } => {
            let history = read_metrics_csv(&fs::read_to_string(run.join("metrics.csv"))?)?;
            let dir = out.unwrap_or(run);
            export_metrics(&history, &dir)?;
            println!("exported {} rows to {}", history.len(), dir.display());
        }
    }
    Ok(())
}
