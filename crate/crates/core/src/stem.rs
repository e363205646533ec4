//! Convolutional feature extractor in front of the block, plus the plain
//! residual block it is pretrained with.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, Forward};
use crate::params::{Bound, Buffers, ParamGroup, ParamStore};
use crate::search_space::LEAKY_SLOPE;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StemConfig {
    pub in_channels: usize,
    /// Output channels of each residual stage.
    pub channels: Vec<usize>,
    /// Max-pool factor after each stage.
    pub downsample: usize,
    pub frozen: bool,
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig {
            in_channels: 3,
            channels: vec![16, 16],
            downsample: 2,
            frozen: true,
        }
    }
}

impl StemConfig {
    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    /// Output grid side for a square input of side `size`.
    pub fn out_size(&self, size: usize) -> usize {
        self.channels
            .iter()
            .fold(size, |s, _| s / self.downsample.max(1))
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.downsample == 0 {
            return Err(Error::Config(format!(
                "stem needs ≥1 stage of nonzero width: {self:?}"
            )));
        }
        if height != width {
            return Err(Error::Config(format!(
                "stem expects square images, got {height}×{width}"
            )));
        }
        if self.out_size(height) < 2 {
            return Err(Error::Config(format!(
                "{} stages of ×{} pooling leave a grid smaller than 2 for {height}px input",
                self.channels.len(),
                self.downsample
            )));
        }
        Ok(())
    }
}

/// conv3→BN→LReLU twice, added to the (projected) input, then max-pooled.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub project: Option<Conv>,
    pub pool: usize,
}

impl ResidualUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        pool: usize,
        group: ParamGroup,
        store: &mut ParamStore,
        buffers: &mut Buffers,
        rng: &mut R,
    ) -> Self {
        ResidualUnit {
            conv1: Conv::new(
                &format!("{name}.conv1"),
                in_ch,
                out_ch,
                3,
                1,
                1,
                group,
                store,
                rng,
            ),
            bn1: BatchNorm::new(&format!("{name}.bn1"), out_ch, group, store, buffers),
            conv2: Conv::new(
                &format!("{name}.conv2"),
                out_ch,
                out_ch,
                3,
                1,
                1,
                group,
                store,
                rng,
            ),
            bn2: BatchNorm::new(&format!("{name}.bn2"), out_ch, group, store, buffers),
            project: (in_ch != out_ch).then(|| {
                Conv::new(
                    &format!("{name}.proj"),
                    in_ch,
                    out_ch,
                    1,
                    1,
                    0,
                    group,
                    store,
                    rng,
                )
            }),
            pool,
        }
    }

    pub fn forward<'t>(
        &self,
        x: Var<'t>,
        params: &Bound<'t>,
        fwd: &Forward<'_>,
    ) -> Result<Var<'t>> {
        let h = self
            .bn1
            .forward(self.conv1.forward(x, params)?, params, fwd)?
            .leaky_relu(LEAKY_SLOPE)?;
        let h = self
            .bn2
            .forward(self.conv2.forward(h, params)?, params, fwd)?
            .leaky_relu(LEAKY_SLOPE)?;
        let skip = match &self.project {
            Some(p) => p.forward(x, params)?,
            None => x,
        };
        let y = h.add(skip)?;
        if self.pool > 1 {
            y.max_pool2d(self.pool, self.pool, 0)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stem {
    pub config: StemConfig,
    pub units: Vec<ResidualUnit>,
}

impl Stem {
    pub fn new<R: Rng + ?Sized>(
        config: &StemConfig,
        store: &mut ParamStore,
        buffers: &mut Buffers,
        rng: &mut R,
    ) -> Self {
        let mut in_ch = config.in_channels;
        let mut units = Vec::new();
        for (s, &out) in config.channels.iter().enumerate() {
            units.push(ResidualUnit::new(
                &format!("stem.s{s}"),
                in_ch,
                out,
                config.downsample,
                ParamGroup::Stem,
                store,
                buffers,
                rng,
            ));
            in_ch = out;
        }
        Stem {
            config: config.clone(),
            units,
        }
    }

    pub fn forward<'t>(
        &self,
        images: Var<'t>,
        params: &Bound<'t>,
        fwd: &Forward<'_>,
    ) -> Result<Var<'t>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "stem wants (B,{},H,W), got {:?}",
                self.config.in_channels, shape
            )));
        }
        self.units
            .iter()
            .try_fold(images, |x, u| u.forward(x, params, fwd))
    }
}

/// x + BN(conv3(LReLU(BN(conv3(x))))): the ordinary residual block the
/// searched block replaces.
#[derive(Clone, Debug)]
pub struct PlainBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
}

impl PlainBlock {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        group: ParamGroup,
        store: &mut ParamStore,
        buffers: &mut Buffers,
        rng: &mut R,
    ) -> Self {
        PlainBlock {
            conv1: Conv::new(
                "plain.conv1",
                channels,
                channels,
                3,
                1,
                1,
                group,
                store,
                rng,
            ),
            bn1: BatchNorm::new("plain.bn1", channels, group, store, buffers),
            conv2: Conv::new(
                "plain.conv2",
                channels,
                channels,
                3,
                1,
                1,
                group,
                store,
                rng,
            ),
            bn2: BatchNorm::new("plain.bn2", channels, group, store, buffers),
        }
    }

    pub fn forward<'t>(
        &self,
        x: Var<'t>,
        params: &Bound<'t>,
        fwd: &Forward<'_>,
    ) -> Result<Var<'t>> {
        let h = self
            .bn1
            .forward(self.conv1.forward(x, params)?, params, fwd)?
            .leaky_relu(LEAKY_SLOPE)?;
        let h = self
            .bn2
            .forward(self.conv2.forward(h, params)?, params, fwd)?;
        x.add(h)
    }
}

/// Learning rate of the pretraining step schedule at `epoch` of `total`:
/// 0.1, then 0.006 / 0.0012 / 0.00024 from 1/3, 2/3 and 5/6 of the budget.
pub fn pretrain_lr(base: f32, epoch: usize, total: usize) -> f32 {
    let e = epoch * 6;
    let t = total.max(1);
    let factor = if e < 2 * t {
        1.0
    } else if e < 4 * t {
        0.06
    } else if e < 5 * t {
        0.012
    } else {
        0.0024
    };
    base * factor
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_stem_gives_four_by_four() {
        let cfg = StemConfig::default();
        assert_eq!(cfg.out_size(16), 4);
        cfg.validate(16, 16).unwrap();
        assert!(StemConfig {
            channels: vec![8, 8, 8, 8],
            ..cfg.clone()
        }
        .validate(16, 16)
        .is_err());
        let mut store = ParamStore::new();
        let mut buffers = Buffers::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stem = Stem::new(
            &StemConfig {
                channels: vec![8, 16],
                ..cfg
            },
            &mut store,
            &mut buffers,
            &mut rng,
        );
        let tape = Tape::new();
        let p = store.bind(&tape, &[]);
        let x = tape.constant(Tensor::randn(&[2, 3, 16, 16], 1.0, &mut rng));
        assert_eq!(
            stem.forward(x, &p, &Forward::train(&buffers))
                .unwrap()
                .shape(),
            vec![2, 16, 4, 4]
        );
        assert!(stem
            .forward(
                tape.constant(Tensor::zeros(&[1, 1, 16, 16])),
                &p,
                &Forward::eval(&buffers)
            )
            .is_err());
    }

    #[test]
    fn zero_scale_unit_is_pool_only() {
        let mut store = ParamStore::new();
        let mut buffers = Buffers::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let unit = ResidualUnit::new(
            "u",
            4,
            4,
            2,
            ParamGroup::Stem,
            &mut store,
            &mut buffers,
            &mut rng,
        );
        let mut eye = vec![0.0f32; 4 * 4 * 9];
        for c in 0..4 {
            eye[(c * 4 + c) * 9 + 4] = 1.0;
        }
        store
            .set(unit.conv2.weight, Tensor::new(&[4, 4, 3, 3], eye).unwrap())
            .unwrap();
        store.set(unit.bn2.gamma, Tensor::zeros(&[4])).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, &[]);
        let x = tape.constant(Tensor::randn(&[3, 4, 8, 8], 1.0, &mut rng));
        let y = unit
            .forward(x, &p, &Forward::train(&buffers))
            .unwrap()
            .value();
        let want = x.max_pool2d(2, 2, 0).unwrap().value();
        assert!(y.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn schedule_anchors() {
        let lrs: Vec<f32> = (0..60).map(|e| pretrain_lr(0.1, e, 60)).collect();
        assert_eq!(lrs[19], 0.1);
        assert!((lrs[20] - 0.006).abs() < 1e-9);
        assert!((lrs[40] - 0.0012).abs() < 1e-9);
        assert!((lrs[50] - 0.00024).abs() < 1e-9);
        let desk: Vec<f32> = (0..6).map(|e| pretrain_lr(0.1, e, 6)).collect();
        assert_eq!(desk[1], 0.1);
        assert!(
            (desk[2] - 0.006).abs() < 1e-9
                && (desk[4] - 0.0012).abs() < 1e-9
                && (desk[5] - 0.00024).abs() < 1e-9
        );
    }
}
