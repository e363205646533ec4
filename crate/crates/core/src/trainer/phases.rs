//! The training phases and the evaluation protocol, independent of files.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilevel::{hypergradient, AlphaOptimizer, BilevelObjective};
use crate::data::{
    check_fold, hflip_augment, sample_episode, ClassPool, Dataset, Episode, EpisodeBatch,
    FoldSplit, SampleRef, SampleSource, Splits,
};
use crate::error::{Error, Result};
use crate::head::accuracy;
use crate::layers::Forward;
use crate::model::{Arch, FeatureCache, Model};
use crate::optim::{cosine_lr, Sgd};
use crate::params::{ParamGroup, ParamId};
use crate::search_space::AlphaTable;
use crate::snas::gumbel_noise;
use crate::stem::pretrain_lr;
use crate::tensor::{Tape, Tensor, Var};

use super::config::RunConfig;
use super::metrics::MetricRow;

fn draw<R: Rng + ?Sized>(cfg: &RunConfig, pool: &ClassPool, rng: &mut R) -> Result<Episode> {
    sample_episode(pool, cfg.way, cfg.shot, cfg.query, rng)
}

fn mean(v: &[f32]) -> f32 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f32>() / v.len() as f32
}

fn batch_sizes(episodes: usize, batch: usize) -> Vec<usize> {
    let mut out = vec![batch; episodes / batch];
    if !episodes.is_multiple_of(batch) {
        out.push(episodes % batch);
    }
    out
}

/// Arch for one training episode: soft mixture, or a fresh Gumbel draw per
/// edge in the stochastic variant.
fn train_arch<R: Rng + ?Sized>(cfg: &RunConfig, model: &Model, epoch: usize, rng: &mut R) -> Arch {
    if cfg.stochastic {
        let k = model.ops().len();
        Arch::Gumbel {
            temperature: cfg.gumbel.temperature_at(epoch),
            noise: model.alpha.iter().map(|_| gumbel_noise(k, rng)).collect(),
        }
    } else {
        Arch::Soft
    }
}

fn test_arch(stochastic: bool) -> Arch {
    if stochastic {
        Arch::Discrete
    } else {
        Arch::Soft
    }
}

pub struct PhaseOutput {
    pub model: Model,
    pub metrics: Vec<MetricRow>,
    pub rng: ChaCha8Rng,
}

/// Episodic training of stem + plain block + head on raw images.
pub fn pretrain(cfg: &RunConfig, splits: &Splits) -> Result<PhaseOutput> {
    let mut model = Model::new(&cfg.model, cfg.derive_seed("init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("pretrain"));
    let mut ids = model.params.ids_in(ParamGroup::Stem);
    ids.extend(model.params.ids_in(ParamGroup::PlainBlock));
    let mut opt = Sgd::new(cfg.pretrain_sgd);
    let pool = splits.train.pool();
    let mut metrics = Vec::new();
    for epoch in 0..cfg.pretrain_epochs {
        let lr = pretrain_lr(cfg.pretrain_sgd.lr, epoch, cfg.pretrain_epochs);
        let (mut losses, mut accs) = (Vec::new(), Vec::new());
        for n in batch_sizes(cfg.pretrain_episodes, cfg.batch_episodes) {
            let batches = (0..n)
                .map(|_| EpisodeBatch::new(&draw(cfg, &pool, &mut rng)?, &splits.train))
                .collect::<Result<Vec<_>>>()?;
            let tape = Tape::new();
            let p = model
                .params
                .bind(&tape, &[ParamGroup::Stem, ParamGroup::PlainBlock]);
            let fwd = Forward::train(&model.buffers);
            let mut total: Option<Var> = None;
            for b in &batches {
                let (logits, loss) = model.pretrain_episode(&tape, &p, b, &fwd)?;
                accs.push(accuracy(&logits.value(), &b.query_labels));
                losses.push(loss.value().item());
                total = Some(match total {
                    Some(t) => t.add(loss)?,
                    None => loss,
                });
            }
            let loss = total.expect("non-empty batch").scale(1.0 / n as f32)?;
            let grads = tape.grad(loss, &p.vars(&ids))?;
            let stats = fwd.take_stats();
            let mut values = model.params.values(&ids);
            opt.step(&mut values, &grads, lr)?;
            model.params.set_all(&ids, values)?;
            model.apply_stats(stats);
        }
        metrics.push(
            MetricRow::new(epoch, "pretrain", "train")
                .loss(mean(&losses))
                .accuracy(mean(&accs))
                .rates(None, Some(lr)),
        );
        let (vl, va) = monitor_images(cfg, &model, &splits.val, &mut rng)?;
        metrics.push(
            MetricRow::new(epoch, "pretrain", "val")
                .loss(vl)
                .accuracy(va)
                .rates(None, Some(lr)),
        );
        info!(
            "pretrain epoch {epoch}: loss {:.4} acc {:.3} val acc {va:.3}",
            mean(&losses),
            mean(&accs)
        );
    }
    Ok(PhaseOutput {
        model,
        metrics,
        rng,
    })
}

fn monitor_images(
    cfg: &RunConfig,
    model: &Model,
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, f32)> {
    let pool = ds.pool();
    let (mut losses, mut accs) = (Vec::new(), Vec::new());
    for _ in 0..cfg.monitor_episodes {
        let b = EpisodeBatch::new(&draw(cfg, &pool, rng)?, ds)?;
        let tape = Tape::new();
        let p = model.params.bind(&tape, &[]);
        let (logits, loss) =
            model.pretrain_episode(&tape, &p, &b, &Forward::eval(&model.buffers))?;
        losses.push(loss.value().item());
        accs.push(accuracy(&logits.value(), &b.query_labels));
    }
    Ok((mean(&losses), mean(&accs)))
}

/// Fold losses over cached features, with w and α substituted into the
/// model's bindings. Batch-norm runs on batch statistics without touching
/// the running moments.
pub struct SearchObjective<'a> {
    pub model: &'a Model,
    pub w_ids: &'a [ParamId],
    pub alpha_ids: &'a [ParamId],
    pub batch_w: &'a [EpisodeBatch],
    pub arch_w: &'a [Arch],
    pub batch_alpha: &'a [EpisodeBatch],
    pub arch_alpha: &'a [Arch],
}

impl SearchObjective<'_> {
    fn loss<'t>(
        &self,
        tape: &'t Tape,
        w: &[Var<'t>],
        alpha: &[Var<'t>],
        batches: &[EpisodeBatch],
        archs: &[Arch],
    ) -> Result<Var<'t>> {
        let mut p = self.model.params.bind(tape, &[]);
        p.substitute(self.w_ids, w);
        p.substitute(self.alpha_ids, alpha);
        let fwd = Forward::train_frozen_stats(&self.model.buffers);
        let mut total: Option<Var<'t>> = None;
        for (b, arch) in batches.iter().zip(archs) {
            let l = self
                .model
                .block_episode(tape, &p, b, &fwd, arch, false)?
                .loss;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
        total
            .ok_or_else(|| Error::Precondition("empty batch".into()))?
            .scale(1.0 / batches.len() as f32)
    }
}

impl BilevelObjective for SearchObjective<'_> {
    fn loss_w<'t>(&self, tape: &'t Tape, w: &[Var<'t>], alpha: &[Var<'t>]) -> Result<Var<'t>> {
        self.loss(tape, w, alpha, self.batch_w, self.arch_w)
    }

    fn loss_alpha<'t>(&self, tape: &'t Tape, w: &[Var<'t>], alpha: &[Var<'t>]) -> Result<Var<'t>> {
        self.loss(tape, w, alpha, self.batch_alpha, self.arch_alpha)
    }
}

/// One SGD step on the block weights, updating running moments.
/// Returns (mean loss, mean accuracy).
pub fn w_step(
    model: &mut Model,
    batches: &[EpisodeBatch],
    archs: &[Arch],
    opt: &mut Sgd,
    lr: f32,
) -> Result<(f32, f32)> {
    let ids = model.block_ids();
    let tape = Tape::new();
    let p = model.params.bind(&tape, &[ParamGroup::Block]);
    let fwd = Forward::train(&model.buffers);
    let mut total: Option<Var> = None;
    let (mut losses, mut accs) = (Vec::new(), Vec::new());
    for (b, arch) in batches.iter().zip(archs) {
        let out = model.block_episode(&tape, &p, b, &fwd, arch, false)?;
        losses.push(out.loss.value().item());
        accs.push(accuracy(&out.logits.value(), &b.query_labels));
        total = Some(match total {
            Some(t) => t.add(out.loss)?,
            None => out.loss,
        });
    }
    let loss = total
        .ok_or_else(|| Error::Precondition("empty batch".into()))?
        .scale(1.0 / batches.len() as f32)?;
    let grads = tape.grad(loss, &p.vars(&ids))?;
    let stats = fwd.take_stats();
    let mut values = model.params.values(&ids);
    opt.step(&mut values, &grads, lr)?;
    model.params.set_all(&ids, values)?;
    model.apply_stats(stats);
    Ok((mean(&losses), mean(&accs)))
}

pub struct SearchOutput {
    pub model: Model,
    pub metrics: Vec<MetricRow>,
    /// α̂ after each epoch.
    pub alpha_history: Vec<AlphaTable>,
    pub gap: Gap,
    pub rng: ChaCha8Rng,
}

/// Accuracy on training-fold episodes minus accuracy on meta-validation
/// episodes, both in eval mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub train: f32,
    pub val: f32,
}

impl Gap {
    pub fn value(&self) -> f32 {
        self.train - self.val
    }
}

/// Bi-level search (or, with `uniform_alpha`, weight training under fixed
/// uniform α) of the block on top of a frozen stem.
pub fn search(cfg: &RunConfig, splits: &Splits, mut model: Model) -> Result<SearchOutput> {
    let stem_sum = model.params.checksum(ParamGroup::Stem);
    let stem_moments = model.buffers.checksum("stem.");
    let train = model.feature_cache(&splits.train)?;
    let val = model.feature_cache(&splits.val)?;
    let folds = FoldSplit::new(
        &splits.train.pool(),
        cfg.fold_ratio,
        cfg.derive_seed("folds"),
    )?;
    // separate streams keep the w-fold batches identical with and without α steps
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("search-w"));
    let mut rng_alpha = ChaCha8Rng::seed_from_u64(cfg.derive_seed("search-alpha"));
    let w_ids = model.block_ids();
    let alpha_ids = model.alpha.clone();
    let mut w_opt = Sgd::new(cfg.search_sgd);
    let mut a_opt = AlphaOptimizer::new(&cfg.alpha_opt);
    let mu = cfg.search_sgd.lr;
    let mut metrics = Vec::new();
    let mut alpha_history = Vec::new();
    for epoch in 0..cfg.search_epochs {
        let eta = cosine_lr(
            cfg.alpha_opt.lr(),
            cfg.alpha_lr_floor,
            epoch,
            cfg.search_epochs,
        );
        let (mut lw, mut aw, mut la) = (Vec::new(), Vec::new(), Vec::new());
        for n in batch_sizes(cfg.search_episodes, cfg.batch_episodes) {
            let make = |pool: &ClassPool,
                        rng: &mut ChaCha8Rng|
             -> Result<(Vec<EpisodeBatch>, Vec<Arch>)> {
                let mut bs = Vec::new();
                let mut archs = Vec::new();
                for _ in 0..n {
                    let ep = draw(cfg, pool, rng)?;
                    check_fold(&ep, pool)?;
                    bs.push(EpisodeBatch::new(&ep, &train)?);
                    archs.push(train_arch(cfg, &model, epoch, rng));
                }
                Ok((bs, archs))
            };
            let (bw, arch_w) = make(&folds.train_w, &mut rng)?;
            if !cfg.uniform_alpha {
                let (ba, arch_a) = make(&folds.train_alpha, &mut rng_alpha)?;
                let obj = SearchObjective {
                    model: &model,
                    w_ids: &w_ids,
                    alpha_ids: &alpha_ids,
                    batch_w: &bw,
                    arch_w: &arch_w,
                    batch_alpha: &ba,
                    arch_alpha: &arch_a,
                };
                let w_vals = model.params.values(&w_ids);
                let mut a_vals = model.params.values(&alpha_ids);
                let (loss, g) = hypergradient(&obj, &w_vals, &a_vals, mu, cfg.order)?;
                a_opt.step(&mut a_vals, &g, eta)?;
                model.params.set_all(&alpha_ids, a_vals)?;
                la.push(loss);
            }
            let (l, a) = w_step(&mut model, &bw, &arch_w, &mut w_opt, mu)?;
            lw.push(l);
            aw.push(a);
        }
        let eta_col = (!cfg.uniform_alpha).then_some(eta);
        metrics.push(
            MetricRow::new(epoch, "search", "train_w")
                .loss(mean(&lw))
                .accuracy(mean(&aw))
                .rates(eta_col, Some(mu)),
        );
        if !la.is_empty() {
            metrics.push(
                MetricRow::new(epoch, "search", "train_alpha")
                    .loss(mean(&la))
                    .rates(eta_col, Some(mu)),
            );
        }
        let mut monitor = ChaCha8Rng::seed_from_u64(cfg.derive_seed("search-monitor"));
        let va = accuracy_over(
            cfg,
            &model,
            &val,
            &splits.val.pool(),
            cfg.monitor_episodes,
            false,
            &mut monitor,
        )?;
        metrics.push(
            MetricRow::new(epoch, "search", "val")
                .accuracy(va)
                .rates(eta_col, Some(mu)),
        );
        info!(
            "search epoch {epoch}: train_w loss {:.4} acc {:.3}, val acc {va:.3}",
            mean(&lw),
            mean(&aw)
        );
        alpha_history.push(model.alpha_table());
    }
    let mut gap_rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("gap"));
    let gap = Gap {
        train: accuracy_over(
            cfg,
            &model,
            &train,
            &folds.train_w,
            cfg.monitor_episodes,
            false,
            &mut gap_rng,
        )?,
        val: accuracy_over(
            cfg,
            &model,
            &val,
            &splits.val.pool(),
            cfg.monitor_episodes,
            false,
            &mut gap_rng,
        )?,
    };
    let last = cfg.search_epochs - 1;
    metrics.push(MetricRow::new(last, "search", "gap_train").accuracy(gap.train));
    metrics.push(MetricRow::new(last, "search", "gap_val").accuracy(gap.val));
    if model.params.checksum(ParamGroup::Stem) != stem_sum
        || model.buffers.checksum("stem.") != stem_moments
    {
        return Err(Error::Precondition("stem changed during search".into()));
    }
    Ok(SearchOutput {
        model,
        metrics,
        alpha_history,
        gap,
        rng,
    })
}

/// Mean eval-mode query accuracy over `n` episodes from `pool`.
fn accuracy_over(
    cfg: &RunConfig,
    model: &Model,
    src: &FeatureCache,
    pool: &ClassPool,
    n: usize,
    adapt: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    let arch = test_arch(cfg.stochastic);
    let mut accs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut ep = draw(cfg, pool, rng)?;
        if adapt && cfg.flip {
            ep = hflip_augment(&ep);
        }
        accs.push(model.evaluate_episode(&EpisodeBatch::new(&ep, src)?, &arch, adapt, None)?);
    }
    Ok(mean(&accs))
}

/// Train the per-edge controllers with everything else frozen.
pub fn train_controllers(
    cfg: &RunConfig,
    splits: &Splits,
    mut model: Model,
) -> Result<PhaseOutput> {
    let frozen: Vec<_> = [
        ParamGroup::Stem,
        ParamGroup::PlainBlock,
        ParamGroup::Block,
        ParamGroup::Alpha,
    ]
    .iter()
    .map(|&g| model.params.checksum(g))
    .collect();
    let moments = model.buffers.checksum("");
    let train = model.feature_cache(&splits.train)?;
    let val = model.feature_cache(&splits.val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("controllers"));
    model.init_controllers(cfg.support_size(), &mut rng);
    let ids = model.controller_ids();
    let mut opt = Sgd::new(cfg.controller_sgd);
    let pool = splits.train.pool();
    let mut metrics = Vec::new();
    let monitor_rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("controllers-monitor"));
    let val_pool = splits.val.pool();
    let frozen_acc = accuracy_over(
        cfg,
        &model,
        &val,
        &val_pool,
        cfg.monitor_episodes,
        false,
        &mut monitor_rng.clone(),
    )?;
    let init_acc = accuracy_over(
        cfg,
        &model,
        &val,
        &val_pool,
        cfg.monitor_episodes,
        true,
        &mut monitor_rng.clone(),
    )?;
    metrics.push(MetricRow::new(0, "controllers", "val_frozen").accuracy(frozen_acc));
    metrics.push(MetricRow::new(0, "controllers", "val_init").accuracy(init_acc));
    for epoch in 0..cfg.controller_epochs {
        let (mut losses, mut accs) = (Vec::new(), Vec::new());
        for n in batch_sizes(cfg.controller_episodes, cfg.batch_episodes) {
            let mut batches = Vec::new();
            let mut archs = Vec::new();
            for _ in 0..n {
                let mut ep = draw(cfg, &pool, &mut rng)?;
                if cfg.flip {
                    ep = hflip_augment(&ep);
                }
                batches.push(EpisodeBatch::new(&ep, &train)?);
                archs.push(train_arch(cfg, &model, epoch, &mut rng));
            }
            let tape = Tape::new();
            let p = model.params.bind(&tape, &[ParamGroup::Controller]);
            let fwd = Forward::train_frozen_stats(&model.buffers);
            let mut total: Option<Var> = None;
            for (b, arch) in batches.iter().zip(&archs) {
                let out = model.block_episode(&tape, &p, b, &fwd, arch, true)?;
                losses.push(out.loss.value().item());
                accs.push(accuracy(&out.logits.value(), &b.query_labels));
                total = Some(match total {
                    Some(t) => t.add(out.loss)?,
                    None => out.loss,
                });
            }
            let loss = total.expect("non-empty batch").scale(1.0 / n as f32)?;
            let grads = tape.grad(loss, &p.vars(&ids))?;
            let mut values = model.params.values(&ids);
            opt.step(&mut values, &grads, cfg.controller_sgd.lr)?;
            model.params.set_all(&ids, values)?;
        }
        let lr = Some(cfg.controller_sgd.lr);
        metrics.push(
            MetricRow::new(epoch, "controllers", "train")
                .loss(mean(&losses))
                .accuracy(mean(&accs))
                .rates(None, lr),
        );
        let va = accuracy_over(
            cfg,
            &model,
            &val,
            &val_pool,
            cfg.monitor_episodes,
            true,
            &mut monitor_rng.clone(),
        )?;
        metrics.push(
            MetricRow::new(epoch, "controllers", "val")
                .accuracy(va)
                .rates(None, lr),
        );
        info!(
            "controllers epoch {epoch}: loss {:.4}, val acc {va:.3} (frozen {frozen_acc:.3})",
            mean(&losses)
        );
    }
    let after: Vec<_> = [
        ParamGroup::Stem,
        ParamGroup::PlainBlock,
        ParamGroup::Block,
        ParamGroup::Alpha,
    ]
    .iter()
    .map(|&g| model.params.checksum(g))
    .collect();
    if after != frozen || model.buffers.checksum("") != moments {
        return Err(Error::Precondition(
            "a frozen parameter group changed during controller training".into(),
        ));
    }
    Ok(PhaseOutput {
        model,
        metrics,
        rng,
    })
}

/// Retrain freshly initialized block weights under a fixed α̂.
pub fn transfer(
    cfg: &RunConfig,
    splits: &Splits,
    mut model: Model,
    alpha: &AlphaTable,
) -> Result<PhaseOutput> {
    model.set_alpha_table(alpha)?;
    let alpha_sum = model.params.checksum(ParamGroup::Alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("transfer"));
    model.reinit_block(&mut rng)?;
    let train = model.feature_cache(&splits.train)?;
    let val = model.feature_cache(&splits.val)?;
    let pool = splits.train.pool();
    let mut opt = Sgd::new(cfg.search_sgd);
    let mut metrics = Vec::new();
    for epoch in 0..cfg.search_epochs {
        let (mut lw, mut aw) = (Vec::new(), Vec::new());
        for n in batch_sizes(cfg.search_episodes, cfg.batch_episodes) {
            let mut bs = Vec::new();
            let mut archs = Vec::new();
            for _ in 0..n {
                bs.push(EpisodeBatch::new(&draw(cfg, &pool, &mut rng)?, &train)?);
                archs.push(train_arch(cfg, &model, epoch, &mut rng));
            }
            let (l, a) = w_step(&mut model, &bs, &archs, &mut opt, cfg.search_sgd.lr)?;
            lw.push(l);
            aw.push(a);
        }
        let mu = Some(cfg.search_sgd.lr);
        metrics.push(
            MetricRow::new(epoch, "transfer", "train")
                .loss(mean(&lw))
                .accuracy(mean(&aw))
                .rates(None, mu),
        );
        let va = accuracy_over(
            cfg,
            &model,
            &val,
            &splits.val.pool(),
            cfg.monitor_episodes,
            false,
            &mut rng,
        )?;
        metrics.push(
            MetricRow::new(epoch, "transfer", "val")
                .accuracy(va)
                .rates(None, mu),
        );
    }
    if model.params.checksum(ParamGroup::Alpha) != alpha_sum {
        return Err(Error::Precondition("α̂ changed during transfer".into()));
    }
    Ok(PhaseOutput {
        model,
        metrics,
        rng,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    pub flip: bool,
    pub finetune: bool,
    /// Use controllers when the model has them.
    pub adapt: bool,
    /// Evaluate the plain residual block instead of the searched one.
    pub plain: bool,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        EvalOptions {
            episodes: cfg.eval_episodes,
            flip: cfg.flip,
            finetune: cfg.finetune,
            adapt: true,
            plain: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub accuracy_mean: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub config_hash: String,
}

impl Report {
    /// Mean and 1.96·σ/√E half-width (sample σ) of per-episode accuracies,
    /// in percent.
    pub fn from_accuracies(accs: &[f32], config_hash: u64) -> Self {
        let n = accs.len();
        let m = accs.iter().map(|&a| a as f64).sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            accs.iter().map(|&a| (a as f64 - m).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Report {
            accuracy_mean: 100.0 * m,
            ci95: 100.0 * 1.96 * var.sqrt() / (n.max(1) as f64).sqrt(),
            episodes: n,
            config_hash: format!("{config_hash:016x}"),
        }
    }
}

/// Meta-test evaluation. Returns per-episode accuracies.
pub fn evaluate(
    cfg: &RunConfig,
    model: &Model,
    test: &Dataset,
    opts: &EvalOptions,
    seed_label: &str,
) -> Result<Vec<f32>> {
    let cache = model.feature_cache(test)?;
    evaluate_cached(cfg, model, &cache, &test.pool(), opts, seed_label)
}

pub fn evaluate_cached(
    cfg: &RunConfig,
    model: &Model,
    cache: &FeatureCache,
    pool: &ClassPool,
    opts: &EvalOptions,
    seed_label: &str,
) -> Result<Vec<f32>> {
    let adapt = opts.adapt && model.controllers.is_some() && !opts.plain;
    if let (true, Some(bank)) = (adapt, &model.controllers) {
        let s = cfg.way * cfg.shot * if opts.flip { 2 } else { 1 };
        if bank.support_size() != s {
            return Err(Error::Precondition(format!(
                "controllers were trained for {} support samples but evaluation uses {s}",
                bank.support_size()
            )));
        }
    }
    let arch = test_arch(cfg.stochastic);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed(seed_label));
    let mut accs = Vec::with_capacity(opts.episodes);
    for _ in 0..opts.episodes {
        let base = draw(cfg, pool, &mut rng)?;
        let ep = if opts.flip {
            hflip_augment(&base)
        } else {
            base.clone()
        };
        let batch = EpisodeBatch::new(&ep, cache)?;
        if opts.plain {
            let tape = Tape::new();
            let p = model.params.bind(&tape, &[]);
            let (logits, _) =
                model.plain_episode(&tape, &p, &batch, &Forward::eval(&model.buffers))?;
            accs.push(accuracy(&logits.value(), &batch.query_labels));
            continue;
        }
        let ft = if opts.finetune {
            Some(finetune_batch(&ep, &base, cache)?)
        } else {
            None
        };
        let finetune = ft.as_ref().map(|b| (b, &cfg.finetune_config));
        accs.push(model.evaluate_episode(&batch, &arch, adapt, finetune)?);
    }
    Ok(accs)
}

/// The episode's support with the mirrored original support as labeled
/// query, for test-time fine-tuning.
fn finetune_batch<S: SampleSource>(ep: &Episode, base: &Episode, src: &S) -> Result<EpisodeBatch> {
    let mut ft = ep.clone();
    ft.query = base
        .support
        .iter()
        .map(|r| SampleRef {
            flipped: !r.flipped,
            ..*r
        })
        .collect();
    ft.query_labels = base.support_labels.clone();
    EpisodeBatch::new(&ft, src)
}

/// Tensor of per-edge Δα-adapted logits for one episode (for dumps).
pub fn adapted_alpha(cfg: &RunConfig, model: &Model, batch: &EpisodeBatch) -> Result<AlphaTable> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, &[]);
    let out = model.block_episode(
        &tape,
        &p,
        batch,
        &Forward::eval(&model.buffers),
        &test_arch(cfg.stochastic),
        true,
    )?;
    let logits = out.alphas.iter().map(|a| a.value().into_vec()).collect();
    AlphaTable::from_logits(cfg.model.num_nodes, model.ops(), logits)
}

pub fn alpha_tensors(table: &AlphaTable) -> Vec<Tensor> {
    table
        .logits
        .iter()
        .map(|l| Tensor::new(&[l.len()], l.clone()).expect("vector"))
        .collect()
}
