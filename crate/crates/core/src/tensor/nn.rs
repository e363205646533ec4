//! Layers composed from the tape primitives. Because they are compositions,
//! their gradients are differentiable again without extra work.

use super::tape::Var;
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running moments.
    Eval,
}

/// Per-channel moments of one batch (biased variance), plus the element
/// count per channel they were computed from.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub count: usize,
}

impl<'t> Var<'t> {
    pub fn leaky_relu(self, slope: f32) -> Result<Var<'t>> {
        let mask = self.value().map(|x| if x > 0.0 { 1.0 } else { slope });
        self.mul_const(&mask)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.leaky_relu(0.0)
    }

    /// `self · weight + bias` for `self` B×D, `weight` D×E, `bias` E.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let e = *weight
            .shape()
            .last()
            .ok_or_else(|| shape_err!("linear: scalar weight"))?;
        if bias.shape() != [e] {
            return Err(shape_err!(
                "linear: bias {:?} for output width {}",
                bias.shape(),
                e
            ));
        }
        self.matmul(weight)?.add(bias.reshape(&[1, e])?)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(self) -> Result<Var<'t>> {
        let shifted = self.sub(self.row_max()?)?;
        let e = shifted.exp()?;
        let mut reduced = self.shape();
        *reduced
            .last_mut()
            .ok_or_else(|| shape_err!("softmax on a scalar"))? = 1;
        e.div(e.sum_to(&reduced)?)
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let shifted = self.sub(self.row_max()?)?;
        let mut reduced = self.shape();
        *reduced
            .last_mut()
            .ok_or_else(|| shape_err!("log_softmax on a scalar"))? = 1;
        shifted.sub(shifted.exp()?.sum_to(&reduced)?.ln()?)
    }

    /// Detached per-row maximum over the last axis, keeping that axis as 1.
    fn row_max(self) -> Result<Var<'t>> {
        let v = self.value();
        let k = *v
            .shape()
            .last()
            .ok_or_else(|| shape_err!("row max on a scalar"))?;
        if k == 0 {
            return Err(shape_err!("softmax over an empty axis"));
        }
        let maxima: Vec<f32> = v
            .data()
            .chunks(k)
            .map(|row| row.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        Ok(self.tape().constant(Tensor::new(&shape, maxima)?))
    }

    /// Mean cross-entropy of B×N logits against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let &[b, n] = shape.as_slice() else {
            return Err(shape_err!(
                "cross_entropy wants B×N logits, got {:?}",
                shape
            ));
        };
        if labels.len() != b {
            return Err(shape_err!("{} labels for {} rows", labels.len(), b));
        }
        let onehot = one_hot(labels, n)?;
        self.log_softmax()?
            .mul_const(&onehot)?
            .sum()?
            .scale(-1.0 / b as f32)
    }

    /// S×D×M×M -> S×D spatial mean.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let &[s, d, h, w] = shape.as_slice() else {
            return Err(shape_err!(
                "global_avg_pool wants a 4-d input, got {:?}",
                shape
            ));
        };
        if h == 0 || w == 0 {
            return Err(shape_err!("global_avg_pool over empty spatial extent"));
        }
        self.sum_to(&[s, d, 1, 1])?
            .scale(1.0 / (h * w) as f32)?
            .reshape(&[s, d])
    }

    /// Batch normalization over N, H, W of a BCHW input using this batch's
    /// statistics. Returns the moments so callers can track running values.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f32,
    ) -> Result<(Var<'t>, BatchStats)> {
        let shape = self.shape();
        let c = check_bn_shapes(&shape, &gamma, &beta)?;
        let count = shape[0] * shape[2] * shape[3];
        if count == 0 {
            return Err(Error::Precondition("batch norm over an empty batch".into()));
        }
        let inv_n = 1.0 / count as f32;
        let per_channel = [1, c, 1, 1];
        let mean = self.sum_to(&per_channel)?.scale(inv_n)?;
        let centered = self.sub(mean)?;
        let var = centered.mul(centered)?.sum_to(&per_channel)?.scale(inv_n)?;
        let inv_std = var.add_scalar(eps)?.powf(-0.5)?;
        let y = centered
            .mul(inv_std)?
            .mul(gamma.reshape(&per_channel)?)?
            .add(beta.reshape(&per_channel)?)?;
        let stats = BatchStats {
            mean: mean.value().reshape(&[c])?,
            var: var.value().reshape(&[c])?,
            count,
        };
        Ok((y, stats))
    }

    /// Batch normalization with fixed moments.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &Tensor,
        var: &Tensor,
        eps: f32,
    ) -> Result<Var<'t>> {
        let shape = self.shape();
        let c = check_bn_shapes(&shape, &gamma, &beta)?;
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(shape_err!(
                "running moments {:?}/{:?} for {} channels",
                mean.shape(),
                var.shape(),
                c
            ));
        }
        let per_channel = [1, c, 1, 1];
        let tape = self.tape();
        let shift = tape.constant(mean.reshape(&per_channel)?);
        let inv_std = tape.constant(var.map(|v| 1.0 / (v + eps).sqrt()).reshape(&per_channel)?);
        self.sub(shift)?
            .mul(inv_std)?
            .mul(gamma.reshape(&per_channel)?)?
            .add(beta.reshape(&per_channel)?)
    }
}

fn check_bn_shapes(shape: &[usize], gamma: &Var<'_>, beta: &Var<'_>) -> Result<usize> {
    if shape.len() != 4 {
        return Err(shape_err!("batch norm wants BCHW input, got {:?}", shape));
    }
    let c = shape[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "batch norm: gamma {:?} / beta {:?} for {} channels",
            gamma.shape(),
            beta.shape(),
            c
        ));
    }
    Ok(c)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (row, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(shape_err!(
                "label {} out of range for {} classes",
                l,
                classes
            ));
        }
        data[row * classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], data)
}
