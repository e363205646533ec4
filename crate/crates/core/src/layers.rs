//! Convolution and batch-norm building blocks with stored parameters.

use std::cell::RefCell;

use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, BufferId, Buffers, ParamGroup, ParamId, ParamStore, BN_EPS};
use crate::tensor::{BatchStats, BnMode, Tensor, Var};

/// Per-forward settings: batch-norm mode, where running moments come from,
/// and a sink for the batch statistics observed in train mode.
pub struct Forward<'a> {
    pub mode: BnMode,
    pub buffers: &'a Buffers,
    observed: Option<RefCell<Vec<(BufferId, BatchStats)>>>,
}

impl<'a> Forward<'a> {
    /// Train-mode forward whose batch statistics are collected for
    /// [`Buffers::apply`].
    pub fn train(buffers: &'a Buffers) -> Self {
        Forward {
            mode: BnMode::Train,
            buffers,
            observed: Some(RefCell::new(Vec::new())),
        }
    }

    /// Train-mode forward that leaves running moments alone.
    pub fn train_frozen_stats(buffers: &'a Buffers) -> Self {
        Forward {
            mode: BnMode::Train,
            buffers,
            observed: None,
        }
    }

    pub fn eval(buffers: &'a Buffers) -> Self {
        Forward {
            mode: BnMode::Eval,
            buffers,
            observed: None,
        }
    }

    /// Same mode and buffers, but statistics are not collected.
    pub fn quiet(&self) -> Forward<'a> {
        Forward {
            mode: self.mode,
            buffers: self.buffers,
            observed: None,
        }
    }

    pub fn take_stats(self) -> Vec<(BufferId, BatchStats)> {
        self.observed.map(RefCell::into_inner).unwrap_or_default()
    }

    fn record(&self, id: BufferId, stats: BatchStats) {
        if let Some(sink) = &self.observed {
            sink.borrow_mut().push((id, stats));
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub moments: BufferId,
}

impl BatchNorm {
    pub fn new(
        name: &str,
        channels: usize,
        group: ParamGroup,
        store: &mut ParamStore,
        buffers: &mut Buffers,
    ) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[channels])),
            moments: buffers.add(name, channels),
        }
    }

    pub fn forward<'t>(
        &self,
        x: Var<'t>,
        params: &Bound<'t>,
        fwd: &Forward<'_>,
    ) -> Result<Var<'t>> {
        match fwd.mode {
            BnMode::Train => {
                let (y, stats) =
                    x.batch_norm_train(params[self.gamma], params[self.beta], BN_EPS)?;
                fwd.record(self.moments, stats);
                Ok(y)
            }
            BnMode::Eval => {
                let m = fwd.buffers.get(self.moments);
                x.batch_norm_eval(
                    params[self.gamma],
                    params[self.beta],
                    &m.mean,
                    &m.var,
                    BN_EPS,
                )
            }
        }
    }
}

/// He-normal initialized square convolution without bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        group: ParamGroup,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f32;
        let w = Tensor::randn(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Conv {
            weight: store.add(format!("{name}.weight"), group, w),
            stride,
            pad,
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>, params: &Bound<'t>) -> Result<Var<'t>> {
        x.conv2d(params[self.weight], self.stride, self.pad)
    }
}
