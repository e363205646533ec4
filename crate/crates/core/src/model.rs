//! The full few-shot model: frozen stem, searched block with its logits,
//! optional controllers, and a closed-form head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{canonical_order, default_bottleneck, ControllerBank};
use crate::data::{Dataset, EpisodeBatch, SampleRef, SampleSource};
use crate::error::{Error, Result};
use crate::head::{accuracy, embed, HeadConfig};
use crate::layers::Forward;
use crate::optim::{Sgd, SgdConfig};
use crate::params::{Bound, BufferId, Buffers, ParamGroup, ParamId, ParamStore};
use crate::search_space::{argmax, dag_edges, AdaptiveBlock, AlphaTable, OpKind, OpSet};
use crate::snas::gumbel_relax;
use crate::stem::{PlainBlock, Stem, StemConfig};
use crate::tensor::{kernels, BatchStats, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stem: StemConfig,
    pub num_nodes: usize,
    pub ops: OpSet,
    pub head: HeadConfig,
    /// Controller bottleneck width; `None` means max(8, D/8).
    pub bottleneck: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stem: StemConfig::default(),
            num_nodes: 4,
            ops: OpSet::Full,
            head: HeadConfig::default(),
            bottleneck: None,
        }
    }
}

/// How each edge turns its logits into op weights.
#[derive(Clone, Debug)]
pub enum Arch {
    Soft,
    /// Relaxed one-hot draw with pre-sampled Gumbel noise per edge.
    Gumbel {
        temperature: f32,
        noise: Vec<Tensor>,
    },
    /// One-hot on the most probable op.
    Discrete,
}

pub struct EpisodeOutput<'t> {
    pub logits: Var<'t>,
    pub loss: Var<'t>,
    /// Logits actually used on each edge (α̂, or α̂ + Δα).
    pub alphas: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub buffers: Buffers,
    pub stem: Stem,
    pub plain: PlainBlock,
    pub block: AdaptiveBlock,
    pub alpha: Vec<ParamId>,
    pub controllers: Option<ControllerBank>,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.head.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = Buffers::default();
        let stem = Stem::new(&config.stem, &mut params, &mut buffers, &mut rng);
        let d = config.stem.out_channels();
        let plain = PlainBlock::new(
            d,
            ParamGroup::PlainBlock,
            &mut params,
            &mut buffers,
            &mut rng,
        );
        let ops = config.ops.ops();
        let block = AdaptiveBlock::new(
            config.num_nodes,
            d,
            &ops,
            "block",
            ParamGroup::Block,
            &mut params,
            &mut buffers,
            &mut rng,
        )?;
        let alpha = dag_edges(config.num_nodes)
            .into_iter()
            .map(|(i, j)| {
                params.add(
                    format!("alpha.e{i}{j}"),
                    ParamGroup::Alpha,
                    Tensor::zeros(&[ops.len()]),
                )
            })
            .collect();
        Ok(Model {
            config: config.clone(),
            params,
            buffers,
            stem,
            plain,
            block,
            alpha,
            controllers: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.stem.out_channels()
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.block.ops
    }

    pub fn init_controllers<R: Rng + ?Sized>(&mut self, support_size: usize, rng: &mut R) {
        let d = self.channels();
        let bottleneck = self
            .config
            .bottleneck
            .unwrap_or_else(|| default_bottleneck(d));
        let edges = dag_edges(self.config.num_nodes);
        let bank = ControllerBank::new(
            &edges,
            d,
            bottleneck,
            support_size,
            self.block.ops.len(),
            &mut self.params,
            rng,
        );
        self.controllers = Some(bank);
    }

    pub fn alpha_table(&self) -> AlphaTable {
        let logits = self
            .alpha
            .iter()
            .map(|&id| self.params.get(id).data().to_vec())
            .collect();
        AlphaTable::from_logits(self.config.num_nodes, &self.block.ops, logits)
            .expect("model alpha is well formed")
    }

    pub fn set_alpha_table(&mut self, table: &AlphaTable) -> Result<()> {
        if table.num_nodes != self.config.num_nodes || table.ops != self.block.ops {
            return Err(Error::Shape(
                "alpha table does not match the block's edges/ops".into(),
            ));
        }
        if table.logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Precondition(
                "a discretized table cannot be loaded as logits".into(),
            ));
        }
        for (&id, l) in self.alpha.iter().zip(&table.logits) {
            self.params.set(id, Tensor::new(&[l.len()], l.clone())?)?;
        }
        Ok(())
    }

    pub fn block_ids(&self) -> Vec<ParamId> {
        self.params.ids_in(ParamGroup::Block)
    }

    pub fn controller_ids(&self) -> Vec<ParamId> {
        self.params.ids_in(ParamGroup::Controller)
    }

    /// Re-draw block weights (He normal), reset its BN affine and moments.
    pub fn reinit_block<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        for id in self.block_ids() {
            let t = self.params.get(id);
            let shape = t.shape().to_vec();
            let name = self.params.name(id).to_string();
            let fresh = if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[1..].iter().product::<usize>() as f32;
                Tensor::randn(&shape, (2.0 / fan_in).sqrt(), rng)
            };
            self.params.set(id, fresh)?;
        }
        for m in self
            .buffers
            .iter_mut()
            .filter(|m| m.name.starts_with("block."))
        {
            m.mean = Tensor::zeros(m.mean.shape());
            m.var = Tensor::ones(m.var.shape());
        }
        Ok(())
    }

    pub fn apply_stats(&mut self, stats: Vec<(BufferId, BatchStats)>) {
        self.buffers.apply(stats);
    }

    /// Eval-mode stem features for a batch of images.
    pub fn stem_features(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = (n - start).min(64);
            let tape = Tape::new();
            let p = self.params.bind(&tape, &[]);
            let x = tape.constant(images.narrow_rows(start, len)?);
            parts.push(
                self.stem
                    .forward(x, &p, &Forward::eval(&self.buffers))?
                    .value(),
            );
            start += len;
        }
        concat_rows(&parts)
    }

    pub fn feature_cache(&self, ds: &Dataset) -> Result<FeatureCache> {
        let [c, h, w] = ds.image_shape();
        let m = self.config.stem.out_size(h);
        let shape = vec![self.channels(), m, m];
        let per = shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(ds.num_classes * ds.samples_per_class * 2 * per);
        for class in 0..ds.num_classes {
            let mut imgs = Vec::with_capacity(ds.samples_per_class * 2 * ds.image_len());
            for i in 0..ds.samples_per_class {
                let img = ds.image(class, i);
                imgs.extend_from_slice(img);
                imgs.extend(kernels::hflip(img, c, h, w));
            }
            let batch = Tensor::new(&[ds.samples_per_class * 2, c, h, w], imgs)?;
            data.extend(self.stem_features(&batch)?.into_vec());
        }
        Ok(FeatureCache {
            shape,
            samples_per_class: ds.samples_per_class,
            data,
        })
    }

    /// Stem + plain residual block + head on raw images (pretraining path).
    pub fn pretrain_episode<'t>(
        &self,
        tape: &'t Tape,
        params: &Bound<'t>,
        batch: &EpisodeBatch,
        fwd: &Forward<'_>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let x = tape.constant(batch.inputs.clone());
        let f = self
            .plain
            .forward(self.stem.forward(x, params, fwd)?, params, fwd)?;
        self.head_loss(f, batch)
    }

    /// Plain residual block + head on cached stem features.
    pub fn plain_episode<'t>(
        &self,
        tape: &'t Tape,
        params: &Bound<'t>,
        batch: &EpisodeBatch,
        fwd: &Forward<'_>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let x = tape.constant(batch.inputs.clone());
        self.head_loss(self.plain.forward(x, params, fwd)?, batch)
    }

    fn head_loss<'t>(&self, features: Var<'t>, batch: &EpisodeBatch) -> Result<(Var<'t>, Var<'t>)> {
        let e = embed(features)?;
        let s = e.rows(&batch.support_rows())?;
        let q = e.rows(&batch.query_rows())?;
        let logits = self
            .config
            .head
            .logits(s, &batch.support_labels, batch.way, q)?;
        let loss = logits.cross_entropy(&batch.query_labels)?;
        Ok((logits, loss))
    }

    fn edge_weights<'t>(&self, alphas: &[Var<'t>], arch: &Arch) -> Result<Vec<Var<'t>>> {
        alphas
            .iter()
            .enumerate()
            .map(|(e, &a)| match arch {
                Arch::Soft => a.softmax(),
                Arch::Gumbel { temperature, noise } => {
                    gumbel_relax(a.softmax()?, &noise[e], *temperature)
                }
                Arch::Discrete => {
                    let v = a.value();
                    let best = argmax(v.data());
                    let hot = (0..v.numel())
                        .map(|o| if o == best { 1.0 } else { 0.0 })
                        .collect();
                    Ok(a.tape().constant(Tensor::new(&[v.numel()], hot)?))
                }
            })
            .collect()
    }

    /// Searched block + head on cached stem features. With `adapt`, the
    /// controllers read each node's support activations under α̂ and the
    /// block is re-run under α̂ + Δα.
    pub fn block_episode<'t>(
        &self,
        tape: &'t Tape,
        params: &Bound<'t>,
        batch: &EpisodeBatch,
        fwd: &Forward<'_>,
        arch: &Arch,
        adapt: bool,
    ) -> Result<EpisodeOutput<'t>> {
        let x0 = tape.constant(batch.inputs.clone());
        let alpha_hat = params.vars(&self.alpha);
        let alphas = match (&self.controllers, adapt) {
            (Some(bank), true) => {
                let w = self.edge_weights(&alpha_hat, arch)?;
                let nodes = self.block.forward_nodes(x0, &w, params, &fwd.quiet())?;
                let nodes: Vec<Var<'t>> = nodes.iter().map(|n| n.detach()).collect();
                let rows = canonical_order(&batch.support_labels);
                let deltas = bank.deltas(&nodes, &rows, params)?;
                alpha_hat
                    .iter()
                    .zip(deltas)
                    .map(|(&a, d)| a.add(d))
                    .collect::<Result<Vec<_>>>()?
            }
            (None, true) => {
                return Err(Error::Precondition(
                    "adaptation requested but no controllers".into(),
                ))
            }
            _ => alpha_hat,
        };
        let w = self.edge_weights(&alphas, arch)?;
        let out = self.block.forward_weighted(x0, &w, params, fwd)?;
        let (logits, loss) = self.head_loss(out, batch)?;
        Ok(EpisodeOutput {
            logits,
            loss,
            alphas,
        })
    }

    /// Query accuracy of one feature-space episode in eval mode, optionally
    /// after fine-tuning the block weights on a private copy.
    pub fn evaluate_episode(
        &self,
        batch: &EpisodeBatch,
        arch: &Arch,
        adapt: bool,
        finetune: Option<(&EpisodeBatch, &FinetuneConfig)>,
    ) -> Result<f32> {
        let tuned;
        let model = match finetune {
            Some((ft_batch, cfg)) => {
                tuned = self.finetuned(ft_batch, arch, adapt, cfg)?;
                &tuned
            }
            None => self,
        };
        let tape = Tape::new();
        let p = model.params.bind(&tape, &[]);
        let out = model.block_episode(
            &tape,
            &p,
            batch,
            &Forward::eval(&model.buffers),
            arch,
            adapt,
        )?;
        Ok(accuracy(&out.logits.value(), &batch.query_labels))
    }

    /// Copy of the model with block weights tuned on `batch` (train-mode BN,
    /// running moments untouched).
    pub fn finetuned(
        &self,
        batch: &EpisodeBatch,
        arch: &Arch,
        adapt: bool,
        cfg: &FinetuneConfig,
    ) -> Result<Model> {
        let mut m = self.clone();
        let ids = m.block_ids();
        let mut opt = Sgd::new(cfg.sgd);
        for _ in 0..cfg.iterations {
            let tape = Tape::new();
            let p = m.params.bind(&tape, &[ParamGroup::Block]);
            let out = m.block_episode(
                &tape,
                &p,
                batch,
                &Forward::train_frozen_stats(&m.buffers),
                arch,
                adapt,
            )?;
            let grads = tape.grad(out.loss, &p.vars(&ids))?;
            let mut values = m.params.values(&ids);
            opt.step(&mut values, &grads, cfg.sgd.lr)?;
            m.params.set_all(&ids, values)?;
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub sgd: SgdConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 10,
            sgd: SgdConfig {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
        }
    }
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("no rows to concatenate".into()))?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}

/// Eval-mode stem features for every sample and its mirror image.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub shape: Vec<usize>,
    samples_per_class: usize,
    data: Vec<f32>,
}

impl SampleSource for FeatureCache {
    fn item_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn write_item(&self, r: &SampleRef, out: &mut Vec<f32>) {
        let per: usize = self.shape.iter().product();
        let at = ((r.class * self.samples_per_class + r.index) * 2 + r.flipped as usize) * per;
        out.extend_from_slice(&self.data[at..at + per]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{hflip_augment, sample_episode, synth_dataset, SynthSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            stem: StemConfig {
                channels: vec![8],
                ..StemConfig::default()
            },
            num_nodes: 3,
            ops: OpSet::Reduced,
            ..ModelConfig::default()
        }
    }

    fn data() -> Dataset {
        synth_dataset(
            &SynthSpec {
                num_classes: 10,
                samples_per_class: 10,
                ..SynthSpec::default()
            },
            1,
        )
        .unwrap()
        .train
    }

    #[test]
    fn cache_matches_direct_stem() {
        let m = Model::new(&tiny(), 1).unwrap();
        let ds = data();
        let cache = m.feature_cache(&ds).unwrap();
        let ep = sample_episode(&ds.pool(), 3, 1, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ep = hflip_augment(&ep);
        let from_cache = EpisodeBatch::new(&ep, &cache).unwrap();
        let images = EpisodeBatch::new(&ep, &ds).unwrap();
        let direct = m.stem_features(&images.inputs).unwrap();
        assert!(from_cache.inputs.max_abs_diff(&direct) < 1e-5);
    }

    #[test]
    fn zero_controllers_do_not_change_the_loss() {
        let mut m = Model::new(&tiny(), 3).unwrap();
        let ds = data();
        let cache = m.feature_cache(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        m.set_alpha_table(
            &AlphaTable::from_logits(
                3,
                m.ops(),
                (0..3)
                    .map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
            )
            .unwrap(),
        )
        .unwrap();
        m.init_controllers(3, &mut rng);
        let ep = sample_episode(&ds.pool(), 3, 1, 2, &mut rng).unwrap();
        let b = EpisodeBatch::new(&ep, &cache).unwrap();
        let tape = Tape::new();
        let p = m.params.bind(&tape, &[]);
        let fwd = Forward::train_frozen_stats(&m.buffers);
        let a = m
            .block_episode(&tape, &p, &b, &fwd, &Arch::Soft, true)
            .unwrap()
            .loss
            .value()
            .item();
        let f = m
            .block_episode(&tape, &p, &b, &fwd, &Arch::Soft, false)
            .unwrap()
            .loss
            .value()
            .item();
        assert!((a - f).abs() < 1e-6);
    }

    #[test]
    fn finetune_leaves_original_untouched() {
        let m = Model::new(&tiny(), 5).unwrap();
        let ds = data();
        let cache = m.feature_cache(&ds).unwrap();
        let ep = sample_episode(&ds.pool(), 3, 1, 2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let b = EpisodeBatch::new(&ep, &cache).unwrap();
        let before = m.params.checksum(ParamGroup::Block);
        let tuned = m
            .finetuned(&b, &Arch::Soft, false, &FinetuneConfig::default())
            .unwrap();
        assert_eq!(m.params.checksum(ParamGroup::Block), before);
        assert_ne!(tuned.params.checksum(ParamGroup::Block), before);
        assert_eq!(
            tuned.params.checksum(ParamGroup::Alpha),
            m.params.checksum(ParamGroup::Alpha)
        );
    }

    #[test]
    fn reinit_changes_only_block() {
        let mut m = Model::new(&tiny(), 7).unwrap();
        let stem = m.params.checksum(ParamGroup::Stem);
        let block = m.params.checksum(ParamGroup::Block);
        m.reinit_block(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.params.checksum(ParamGroup::Stem), stem);
        assert_ne!(m.params.checksum(ParamGroup::Block), block);
    }
}
