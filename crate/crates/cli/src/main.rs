use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use metadapt_core::bilevel::Order;
use metadapt_core::trainer::{self, RunConfig};
use metadapt_core::{OpSet, Result};

#[derive(Parser)]
#[command(
    name = "metadapt",
    version,
    about = "Task-adaptive architecture search for few-shot learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train stem + plain block episodically.
    Pretrain(Common),
    /// Bi-level search of the adaptive block on the frozen stem.
    Search(WithInput),
    /// Train the per-edge controllers with everything else frozen.
    Controllers(WithInput),
    /// Meta-test evaluation; writes report.json.
    Eval(Eval),
    /// Retrain a freshly initialized block under a fixed α̂.
    Transfer(Transfer),
    /// Rows a-h of the ablation table.
    Ablate(Common),
    /// Print the top-k ops per edge as Graphviz DOT.
    ExportDag(ExportDag),
}

#[derive(Args)]
struct Common {
    /// JSON file with RunConfig fields; omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// first | second | exact
    #[arg(long)]
    order: Option<Order>,
    /// full | reduced
    #[arg(long)]
    ops: Option<OpSet>,
    #[arg(long)]
    stochastic: bool,
    /// Initial Gumbel-softmax temperature.
    #[arg(long)]
    gumbel_temp: Option<f32>,
    /// Per-epoch multiplicative temperature decay.
    #[arg(long)]
    gumbel_decay: Option<f32>,
    #[arg(long)]
    flip: bool,
    #[arg(long)]
    finetune: bool,
    #[arg(long)]
    dump_alpha: bool,
    #[arg(long)]
    uniform_alpha: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = self.order {
            cfg.order = o;
        }
        if let Some(o) = self.ops {
            cfg.model.ops = o;
        }
        if let Some(t) = self.gumbel_temp {
            cfg.gumbel.temperature = t;
        }
        if let Some(d) = self.gumbel_decay {
            cfg.gumbel.decay = Some(d);
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        cfg.stochastic |= self.stochastic;
        cfg.flip |= self.flip;
        cfg.finetune |= self.finetune;
        cfg.dump_alpha |= self.dump_alpha;
        cfg.uniform_alpha |= self.uniform_alpha;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct WithInput {
    #[command(flatten)]
    common: Common,
    /// Input checkpoint; defaults to the previous phase's file in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Load even if the checkpoint was written under another configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    input: WithInput,
    /// Number of meta-test episodes.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct Transfer {
    #[command(flatten)]
    input: WithInput,
    /// α̂ CSV of the source block.
    #[arg(long)]
    alpha: PathBuf,
}

#[derive(Args)]
struct ExportDag {
    /// Checkpoint or alpha CSV.
    input: PathBuf,
    #[arg(long, default_value_t = trainer::DOT_TOP_K)]
    top_k: usize,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let path = trainer::cmd_pretrain(&c.config()?)?;
            println!("{}", path.display());
        }
        Command::Search(w) => {
            let path = trainer::cmd_search(&w.common.config()?, w.checkpoint.as_deref(), w.force)?;
            println!("{}", path.display());
        }
        Command::Controllers(w) => {
            let path = trainer::cmd_train_controllers(
                &w.common.config()?,
                w.checkpoint.as_deref(),
                w.force,
            )?;
            println!("{}", path.display());
        }
        Command::Eval(e) => {
            let mut cfg = e.input.common.config()?;
            if let Some(n) = e.episodes {
                cfg.eval_episodes = n;
                cfg.validate()?;
            }
            let report = trainer::cmd_eval(&cfg, e.input.checkpoint.as_deref(), e.input.force)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Transfer(t) => {
            let cfg = t.input.common.config()?;
            let path = trainer::cmd_transfer(
                &cfg,
                &t.alpha,
                t.input.checkpoint.as_deref(),
                t.input.force,
            )?;
            println!("{}", path.display());
        }
        Command::Ablate(c) => {
            let rows = trainer::cmd_ablate(&c.config()?)?;
            print!("{}", trainer::ablation_markdown(&rows));
        }
        Command::ExportDag(x) => {
            let dot = trainer::cmd_export_dag(&x.input, x.top_k)?;
            match x.out {
                Some(p) => std::fs::write(p, dot)?,
                None => print!("{dot}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
