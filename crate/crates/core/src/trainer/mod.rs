//! Three-phase pipeline, evaluation protocol, transfer, ablation matrix and
//! the file plumbing around them.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod phases;

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilevel::Order;
use crate::data::{hflip_augment, sample_episode, EpisodeBatch, Splits};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamGroup;
use crate::search_space::{dag_edges, export_dot, AlphaTable, OpSet};

pub use checkpoint::{Checkpoint, CheckpointMeta, Phase, RngState};
pub use config::{derive_seed, DatasetSource, RunConfig};
pub use metrics::{append_metrics, read_metrics, MetricRow};
pub use phases::{evaluate, evaluate_cached, EvalOptions, Gap, Report};

/// Ops kept per edge in DOT exports.
pub const DOT_TOP_K: usize = 2;

/// Exclusive claim on an output directory for the lifetime of a command.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Precondition(format!(
                    "{} is locked by another run (remove {} if that run is gone)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn checkpoint_path(dir: &Path, phase: Phase) -> PathBuf {
    let name = match phase {
        Phase::Pretrain => "pretrain",
        Phase::Search => "search",
        Phase::Controllers => "controllers",
        Phase::Transfer => "transfer",
    };
    dir.join(format!("{name}.ckpt"))
}

fn save_phase(cfg: &RunConfig, model: &Model, phase: Phase, rng: &ChaCha8Rng) -> Result<PathBuf> {
    let meta = CheckpointMeta {
        stochastic: cfg.stochastic,
        rng: vec![RngState::capture(&format!("{phase:?}").to_lowercase(), rng)],
        ..Default::default()
    };
    let path = checkpoint_path(&cfg.output_dir, phase);
    Checkpoint::from_model(model, cfg.config_hash(), phase, meta).save(&path)?;
    info!("wrote {}", path.display());
    Ok(path)
}

/// Fresh model for `cfg` carrying the stem and plain block of `pretrained`.
pub fn model_from_pretrained(cfg: &RunConfig, pretrained: &Model) -> Result<Model> {
    let mut model = Model::new(&cfg.model, cfg.derive_seed("block-init"))?;
    let ckpt = Checkpoint::from_model(pretrained, 0, Phase::Pretrain, CheckpointMeta::default());
    ckpt.apply(&mut model, &[ParamGroup::Stem, ParamGroup::PlainBlock])?;
    Ok(model)
}

/// Rebuild a model from a checkpoint, controllers included when present.
pub fn model_from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(&cfg.model, cfg.derive_seed("block-init"))?;
    let groups: Vec<ParamGroup> = match ckpt.meta.controller_support {
        Some(s) => {
            model.init_controllers(s, &mut ChaCha8Rng::seed_from_u64(0));
            ParamGroup::ALL.to_vec()
        }
        None => ParamGroup::ALL
            .iter()
            .copied()
            .filter(|&g| g != ParamGroup::Controller)
            .collect(),
    };
    ckpt.apply(&mut model, &groups)?;
    Ok(model)
}

fn load_checkpoint(
    cfg: &RunConfig,
    path: &Path,
    allowed: &[Phase],
    force: bool,
) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_config(cfg.config_hash(), force)?;
    ckpt.expect_phase(allowed)?;
    Ok(ckpt)
}

fn default_input(cfg: &RunConfig, given: Option<&Path>, phases: &[Phase]) -> Result<PathBuf> {
    if let Some(p) = given {
        return Ok(p.to_path_buf());
    }
    phases
        .iter()
        .map(|&ph| checkpoint_path(&cfg.output_dir, ph))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::Precondition(format!(
                "no {phases:?} checkpoint in {}",
                cfg.output_dir.display()
            ))
        })
}

fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("metrics.csv")
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let splits = cfg.load_data()?;
    let out = phases::pretrain(cfg, &splits)?;
    append_metrics(&metrics_path(cfg), &out.metrics)?;
    save_phase(cfg, &out.model, Phase::Pretrain, &out.rng)
}

fn write_alpha(dir: &Path, stem: &str, table: &AlphaTable) -> Result<()> {
    fs::write(dir.join(format!("{stem}.csv")), table.to_csv()?)?;
    fs::write(
        dir.join(format!("{stem}.dot")),
        export_dot(table, DOT_TOP_K)?,
    )?;
    Ok(())
}

pub fn cmd_search(cfg: &RunConfig, pretrain: Option<&Path>, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let input = default_input(cfg, pretrain, &[Phase::Pretrain])?;
    let ckpt = load_checkpoint(cfg, &input, &[Phase::Pretrain], force)?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let splits = cfg.load_data()?;
    let mut model = Model::new(&cfg.model, cfg.derive_seed("block-init"))?;
    ckpt.apply(&mut model, &[ParamGroup::Stem, ParamGroup::PlainBlock])?;
    let out = phases::search(cfg, &splits, model)?;
    append_metrics(&metrics_path(cfg), &out.metrics)?;
    for (e, table) in out.alpha_history.iter().enumerate() {
        write_alpha(&cfg.output_dir, &format!("alpha_epoch{e}"), table)?;
    }
    write_alpha(&cfg.output_dir, "alpha", &out.model.alpha_table())?;
    info!("generalization gap {:.4}", out.gap.value());
    save_phase(cfg, &out.model, Phase::Search, &out.rng)
}

pub fn cmd_train_controllers(
    cfg: &RunConfig,
    input: Option<&Path>,
    force: bool,
) -> Result<PathBuf> {
    cfg.validate()?;
    let input = default_input(cfg, input, &[Phase::Search, Phase::Transfer])?;
    let ckpt = load_checkpoint(cfg, &input, &[Phase::Search, Phase::Transfer], force)?;
    let cfg = &RunConfig {
        stochastic: ckpt.meta.stochastic,
        ..cfg.clone()
    };
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let splits = cfg.load_data()?;
    let mut model = model_from_checkpoint(cfg, &ckpt)?;
    model.controllers = None;
    let out = phases::train_controllers(cfg, &splits, model)?;
    append_metrics(&metrics_path(cfg), &out.metrics)?;
    save_phase(cfg, &out.model, Phase::Controllers, &out.rng)
}

/// Meta-test evaluation. The report also lands in `report.json`; with
/// `dump_alpha` every episode's adapted logits go to `adapted_alpha/`.
pub fn cmd_eval(cfg: &RunConfig, input: Option<&Path>, force: bool) -> Result<Report> {
    cfg.validate()?;
    let allowed = [Phase::Controllers, Phase::Search, Phase::Transfer];
    let input = default_input(cfg, input, &allowed)?;
    let ckpt = load_checkpoint(cfg, &input, &allowed, force)?;
    let cfg = &RunConfig {
        stochastic: ckpt.meta.stochastic,
        ..cfg.clone()
    };
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let splits = cfg.load_data()?;
    let model = model_from_checkpoint(cfg, &ckpt)?;
    let cache = model.feature_cache(&splits.test)?;
    let pool = splits.test.pool();
    let opts = EvalOptions::from_config(cfg);
    let accs = evaluate_cached(cfg, &model, &cache, &pool, &opts, "eval")?;
    let report = Report::from_accuracies(&accs, cfg.config_hash());
    fs::write(
        cfg.output_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    if cfg.dump_alpha {
        if model.controllers.is_none() {
            return Err(Error::Precondition(
                "--dump-alpha needs a controller checkpoint".into(),
            ));
        }
        let dir = cfg.output_dir.join("adapted_alpha");
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("alpha_hat.csv"), model.alpha_table().to_csv()?)?;
        // same episode stream as the evaluation above
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("eval"));
        for n in 0..opts.episodes {
            let mut ep = sample_episode(&pool, cfg.way, cfg.shot, cfg.query, &mut rng)?;
            if opts.flip {
                ep = hflip_augment(&ep);
            }
            let table = phases::adapted_alpha(cfg, &model, &EpisodeBatch::new(&ep, &cache)?)?;
            fs::write(dir.join(format!("episode{n:04}.csv")), table.to_csv()?)?;
        }
    }
    Ok(report)
}

/// Train the configured block on `cfg.dataset` under a fixed α̂ read from
/// `alpha_csv`, starting from a pretrain checkpoint of that dataset.
pub fn cmd_transfer(
    cfg: &RunConfig,
    alpha_csv: &Path,
    pretrain: Option<&Path>,
    force: bool,
) -> Result<PathBuf> {
    cfg.validate()?;
    let alpha = AlphaTable::from_csv(&fs::read_to_string(alpha_csv)?)?;
    let input = default_input(cfg, pretrain, &[Phase::Pretrain])?;
    let ckpt = load_checkpoint(cfg, &input, &[Phase::Pretrain], force)?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let splits = cfg.load_data()?;
    let mut model = Model::new(&cfg.model, cfg.derive_seed("block-init"))?;
    ckpt.apply(&mut model, &[ParamGroup::Stem, ParamGroup::PlainBlock])?;
    if !alpha.same_structure(&model.alpha_table()) {
        return Err(Error::Config(format!(
            "alpha csv describes {} nodes × {} ops, the block has {} nodes × {} ops",
            alpha.num_nodes,
            alpha.ops.len(),
            cfg.model.num_nodes,
            model.ops().len()
        )));
    }
    let out = phases::transfer(cfg, &splits, model, &alpha)?;
    append_metrics(&metrics_path(cfg), &out.metrics)?;
    save_phase(cfg, &out.model, Phase::Transfer, &out.rng)
}

/// α̂ from an alpha CSV or any checkpoint holding block logits.
pub fn read_alpha(path: &Path) -> Result<AlphaTable> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(&checkpoint::MAGIC) {
        return AlphaTable::from_csv(
            std::str::from_utf8(&bytes).map_err(|e| Error::Config(e.to_string()))?,
        );
    }
    let ckpt = Checkpoint::decode(&bytes)?;
    let logits: Vec<(String, Vec<f32>)> = ckpt
        .sections
        .iter()
        .filter(|(k, _)| k.starts_with("param:alpha."))
        .map(|(k, t)| (k.clone(), t.data().to_vec()))
        .collect();
    let edges = logits.len();
    let num_nodes = (2..=64)
        .find(|&n| dag_edges(n).len() == edges)
        .ok_or_else(|| {
            Error::Integrity(format!(
                "{edges} alpha sections do not form a complete block"
            ))
        })?;
    let width = logits[0].1.len();
    let ops = [OpSet::Full, OpSet::Reduced]
        .into_iter()
        .map(OpSet::ops)
        .find(|o| o.len() == width)
        .ok_or_else(|| Error::Integrity(format!("alpha rows of width {width} match no op set")))?;
    let by_edge = dag_edges(num_nodes)
        .into_iter()
        .map(|(i, j)| {
            let key = format!("param:alpha.e{i}{j}");
            logits
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.clone())
                .ok_or(Error::Integrity(format!("missing {key}")))
        })
        .collect::<Result<Vec<_>>>()?;
    AlphaTable::from_logits(num_nodes, &ops, by_edge)
}

pub fn cmd_export_dag(input: &Path, top_k: usize) -> Result<String> {
    export_dot(&read_alpha(input)?, top_k)
}

pub const ABLATION_ROWS: [(char, &str); 8] = [
    ('a', "Plain residual block"),
    ('b', "Replacing last block with DAG (uniform α)"),
    ('c', "+ Iteratively optimizing w and α"),
    ('d', "+ 2nd order approx. of w for α update"),
    ('e', "+ Adding more operations (5×5 ops)"),
    ('f', "+ Task-adaptivness (controllers)"),
    ('g', "+ Test time flip augmentations"),
    ('h', "+ Test time fine tuning"),
];

/// Mean meta-test accuracy (percent) of rows a–h for one seed, plus the
/// generalization gaps of rows b and c.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAblation {
    pub seed: u64,
    pub rows: [f64; 8],
    pub gap_uniform: f32,
    pub gap_optimized: f32,
}

fn mean_pct(accs: &[f32]) -> f64 {
    100.0 * accs.iter().map(|&a| a as f64).sum::<f64>() / accs.len().max(1) as f64
}

pub fn ablate_seed(base: &RunConfig, splits: &Splits, seed: u64) -> Result<SeedAblation> {
    let cfg = RunConfig {
        seed,
        stochastic: false,
        flip: false,
        finetune: false,
        ..base.clone()
    };
    let pre = phases::pretrain(&cfg, splits)?.model;
    let test_cache = pre.feature_cache(&splits.test)?;
    let pool = splits.test.pool();
    let plain_opts = EvalOptions {
        episodes: cfg.eval_episodes,
        flip: false,
        finetune: false,
        adapt: false,
        plain: false,
    };
    let eval = |c: &RunConfig, m: &Model, o: &EvalOptions| -> Result<f64> {
        Ok(mean_pct(&evaluate_cached(
            c,
            m,
            &test_cache,
            &pool,
            o,
            "eval",
        )?))
    };
    let mut rows = [0.0; 8];
    rows[0] = eval(
        &cfg,
        &pre,
        &EvalOptions {
            plain: true,
            ..plain_opts
        },
    )?;
    let variant = |ops: OpSet, uniform: bool, order: Order| {
        let mut c = RunConfig {
            uniform_alpha: uniform,
            order,
            ..cfg.clone()
        };
        c.model.ops = ops;
        c
    };
    let mut gaps = [0.0; 2];
    let mut searched = None;
    for (r, c) in [
        variant(OpSet::Reduced, true, Order::First),
        variant(OpSet::Reduced, false, Order::First),
        variant(OpSet::Reduced, false, Order::Second),
        variant(OpSet::Full, false, Order::Second),
    ]
    .into_iter()
    .enumerate()
    {
        let out = phases::search(&c, splits, model_from_pretrained(&c, &pre)?)?;
        rows[r + 1] = eval(&c, &out.model, &plain_opts)?;
        if r < 2 {
            gaps[r] = out.gap.value();
        }
        info!(
            "seed {seed} row {}: {:.2}",
            ABLATION_ROWS[r + 1].0,
            rows[r + 1]
        );
        searched = Some((c, out.model));
    }
    let (c, model) = searched.expect("four searches ran");
    let adapted = phases::train_controllers(&c, splits, model.clone())?.model;
    rows[5] = eval(
        &c,
        &adapted,
        &EvalOptions {
            adapt: true,
            ..plain_opts
        },
    )?;
    let cf = RunConfig { flip: true, ..c };
    let flipped = phases::train_controllers(&cf, splits, model)?.model;
    rows[6] = eval(
        &cf,
        &flipped,
        &EvalOptions {
            adapt: true,
            flip: true,
            ..plain_opts
        },
    )?;
    rows[7] = eval(
        &cf,
        &flipped,
        &EvalOptions {
            adapt: true,
            flip: true,
            finetune: true,
            ..plain_opts
        },
    )?;
    Ok(SeedAblation {
        seed,
        rows,
        gap_uniform: gaps[0],
        gap_optimized: gaps[1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: char,
    pub description: String,
    pub accuracy_mean: f64,
    /// 1.96σ/√n over seeds.
    pub ci95: f64,
    pub seeds: usize,
}

pub fn summarize_ablation(runs: &[SeedAblation]) -> Vec<AblationRow> {
    ABLATION_ROWS
        .iter()
        .enumerate()
        .map(|(r, &(row, description))| {
            let xs: Vec<f32> = runs.iter().map(|s| (s.rows[r] / 100.0) as f32).collect();
            let rep = Report::from_accuracies(&xs, 0);
            AblationRow {
                row,
                description: description.to_string(),
                accuracy_mean: rep.accuracy_mean,
                ci95: rep.ci95,
                seeds: runs.len(),
            }
        })
        .collect()
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| | Description | 1-shot accuracy (%) |\n|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {}. | {} | {:.2} ± {:.2} |\n",
            r.row, r.description, r.accuracy_mean, r.ci95
        ));
    }
    s
}

/// Run rows a–h for `ablation_seeds` seeds; writes ablation.csv,
/// ablation.md and the per-seed values to ablation_seeds.json.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let splits = cfg.load_data()?;
    let runs = (0..cfg.ablation_seeds as u64)
        .map(|s| ablate_seed(cfg, &splits, cfg.seed + s))
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize_ablation(&runs);
    let mut w = csv::Writer::from_writer(File::create(cfg.output_dir.join("ablation.csv"))?);
    for r in &rows {
        w.serialize(r)
            .map_err(|e| Error::Config(format!("ablation csv: {e}")))?;
    }
    w.flush()?;
    fs::write(cfg.output_dir.join("ablation.md"), ablation_markdown(&rows))?;
    fs::write(
        cfg.output_dir.join("ablation_seeds.json"),
        serde_json::to_string_pretty(&runs)?,
    )?;
    Ok(rows)
}
