use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bilevel::{AlphaOptConfig, Order};
use crate::data::{synth_dataset, Splits, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{FinetuneConfig, ModelConfig};
use crate::optim::SgdConfig;
use crate::snas::GumbelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    /// Generated on the fly from a spec and `data_seed`.
    Synth(SynthSpec),
    /// Directory holding train.fsds, val.fsds and test.fsds.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub data_seed: u64,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub model: ModelConfig,
    pub pretrain_epochs: usize,
    pub pretrain_episodes: usize,
    pub search_epochs: usize,
    pub search_episodes: usize,
    pub controller_epochs: usize,
    pub controller_episodes: usize,
    pub batch_episodes: usize,
    pub pretrain_sgd: SgdConfig,
    pub search_sgd: SgdConfig,
    pub alpha_opt: AlphaOptConfig,
    /// Cosine floor for the α learning rate, clamped to the initial rate.
    pub alpha_lr_floor: f32,
    pub controller_sgd: SgdConfig,
    pub order: Order,
    pub uniform_alpha: bool,
    pub stochastic: bool,
    pub gumbel: GumbelConfig,
    pub fold_ratio: f32,
    pub flip: bool,
    pub finetune: bool,
    pub finetune_config: FinetuneConfig,
    pub eval_episodes: usize,
    /// Episodes per split for the per-epoch validation and gap rows.
    pub monitor_episodes: usize,
    pub dump_alpha: bool,
    /// Seeds per row in the ablation table (seed, seed + 1, ...).
    pub ablation_seeds: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSource::Synth(SynthSpec::default()),
            data_seed: 0,
            way: 5,
            shot: 1,
            query: 6,
            model: ModelConfig::default(),
            pretrain_epochs: 6,
            pretrain_episodes: 200,
            search_epochs: 4,
            search_episodes: 200,
            controller_epochs: 1,
            controller_episodes: 400,
            batch_episodes: 4,
            pretrain_sgd: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            search_sgd: SgdConfig {
                lr: 0.001,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            alpha_opt: AlphaOptConfig::default(),
            alpha_lr_floor: 3e-5,
            controller_sgd: SgdConfig {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            order: Order::Second,
            uniform_alpha: false,
            stochastic: false,
            gumbel: GumbelConfig::default(),
            fold_ratio: 0.5,
            flip: false,
            finetune: false,
            finetune_config: FinetuneConfig::default(),
            eval_episodes: 1000,
            monitor_episodes: 50,
            dump_alpha: false,
            ablation_seeds: 5,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Full-scale budgets: 60/10/1 epochs of 8000 episodes.
    pub fn full_scale() -> Self {
        RunConfig {
            pretrain_epochs: 60,
            pretrain_episodes: 8000,
            search_epochs: 10,
            search_episodes: 8000,
            controller_episodes: 8000,
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let budgets = [
            ("way", self.way),
            ("shot", self.shot),
            ("query", self.query),
            ("pretrain_epochs", self.pretrain_epochs),
            ("pretrain_episodes", self.pretrain_episodes),
            ("search_epochs", self.search_epochs),
            ("search_episodes", self.search_episodes),
            ("controller_epochs", self.controller_epochs),
            ("controller_episodes", self.controller_episodes),
            ("batch_episodes", self.batch_episodes),
            ("eval_episodes", self.eval_episodes),
            ("monitor_episodes", self.monitor_episodes),
            ("ablation_seeds", self.ablation_seeds),
        ];
        if let Some((name, _)) = budgets.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.fold_ratio > 0.0 && self.fold_ratio < 1.0) {
            return Err(Error::Config(format!(
                "fold_ratio must lie in (0,1), got {}",
                self.fold_ratio
            )));
        }
        for (name, lr) in [
            ("pretrain_sgd", self.pretrain_sgd.lr),
            ("search_sgd", self.search_sgd.lr),
            ("alpha_opt", self.alpha_opt.lr()),
            ("controller_sgd", self.controller_sgd.lr),
        ] {
            if lr.is_nan() || lr <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} learning rate must be positive"
                )));
            }
        }
        if self.model.num_nodes < 2 {
            return Err(Error::Config("the block needs at least 2 nodes".into()));
        }
        self.model.head.validate()?;
        self.gumbel.validate()
    }

    /// Hash of the fields that fix the data and network layout. The op set
    /// is left out so one pretrained stem can feed several searches;
    /// checkpoint sections still have to match by name and shape.
    pub fn config_hash(&self) -> u64 {
        #[derive(Serialize)]
        struct Key<'a> {
            dataset: &'a DatasetSource,
            data_seed: u64,
            way: usize,
            shot: usize,
            query: usize,
            stem: &'a crate::stem::StemConfig,
            num_nodes: usize,
            head: &'a crate::head::HeadConfig,
            bottleneck: Option<usize>,
        }
        let key = Key {
            dataset: &self.dataset,
            data_seed: self.data_seed,
            way: self.way,
            shot: self.shot,
            query: self.query,
            stem: &self.model.stem,
            num_nodes: self.model.num_nodes,
            head: &self.model.head,
            bottleneck: self.model.bottleneck,
        };
        let bytes = serde_json::to_vec(&key).expect("config key serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn load_data(&self) -> Result<Splits> {
        let splits = match &self.dataset {
            DatasetSource::Synth(spec) => synth_dataset(spec, self.data_seed)?,
            DatasetSource::Path(dir) => Splits::load_dir(dir)?,
        };
        let ds = &splits.train;
        if ds.channels != self.model.stem.in_channels {
            return Err(Error::Config(format!(
                "dataset has {} channels, stem expects {}",
                ds.channels, self.model.stem.in_channels
            )));
        }
        self.model.stem.validate(ds.height, ds.width)?;
        Ok(splits)
    }

    /// Seed for one named random stream of this run.
    pub fn derive_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    /// Support-set size the controllers see.
    pub fn support_size(&self) -> usize {
        self.way * self.shot * if self.flip { 2 } else { 1 }
    }
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}
