//! Per-edge controllers mapping an episode's support features to a residual
//! adjustment of that edge's architecture logits.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::search_space::AlphaTable;
use crate::tensor::{Tensor, Var};

pub fn default_bottleneck(channels: usize) -> usize {
    (channels / 8).max(8)
}

#[derive(Clone, Debug)]
pub struct Controller {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub support_size: usize,
    pub bottleneck: usize,
    pub num_ops: usize,
}

impl Controller {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        channels: usize,
        bottleneck: usize,
        support_size: usize,
        num_ops: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (channels as f32).sqrt();
        let g = ParamGroup::Controller;
        Controller {
            w1: store.add(
                format!("{name}.w1"),
                g,
                Tensor::uniform(&[channels, bottleneck], -bound, bound, rng),
            ),
            b1: store.add(format!("{name}.b1"), g, Tensor::zeros(&[bottleneck])),
            // zero output layer: Δα = 0 until trained
            w2: store.add(
                format!("{name}.w2"),
                g,
                Tensor::zeros(&[support_size * bottleneck, num_ops]),
            ),
            b2: store.add(format!("{name}.b2"), g, Tensor::zeros(&[num_ops])),
            support_size,
            bottleneck,
            num_ops,
        }
    }

    /// Δα (length |O|) from canonically ordered support features S×D×M×M.
    pub fn forward<'t>(&self, support: Var<'t>, params: &Bound<'t>) -> Result<Var<'t>> {
        let s = support.shape()[0];
        if s != self.support_size {
            return Err(Error::Shape(format!(
                "controller built for {} support samples, got {s}",
                self.support_size
            )));
        }
        let h = support
            .global_avg_pool()?
            .linear(params[self.w1], params[self.b1])?
            .relu()?;
        let flat = h.reshape(&[1, s * self.bottleneck])?;
        flat.linear(params[self.w2], params[self.b2])?
            .reshape(&[self.num_ops])
    }
}

/// One controller per block edge, in the block's edge order.
#[derive(Clone, Debug)]
pub struct ControllerBank {
    pub controllers: Vec<Controller>,
    pub edges: Vec<(usize, usize)>,
}

impl ControllerBank {
    pub fn new<R: Rng + ?Sized>(
        edges: &[(usize, usize)],
        channels: usize,
        bottleneck: usize,
        support_size: usize,
        num_ops: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let controllers = edges
            .iter()
            .map(|(i, j)| {
                Controller::new(
                    &format!("ctrl.e{i}{j}"),
                    channels,
                    bottleneck,
                    support_size,
                    num_ops,
                    store,
                    rng,
                )
            })
            .collect();
        ControllerBank {
            controllers,
            edges: edges.to_vec(),
        }
    }

    pub fn support_size(&self) -> usize {
        self.controllers.first().map_or(0, |c| c.support_size)
    }

    /// Δα per edge; edge (i, j) reads node x_i restricted to `support_rows`.
    pub fn deltas<'t>(
        &self,
        nodes: &[Var<'t>],
        support_rows: &[usize],
        params: &Bound<'t>,
    ) -> Result<Vec<Var<'t>>> {
        self.controllers
            .iter()
            .zip(&self.edges)
            .map(|(c, &(i, _))| c.forward(nodes[i].rows(support_rows)?, params))
            .collect()
    }
}

/// Support indices sorted by (label, position within the class).
pub fn canonical_order(labels: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by_key(|&i| labels[i]);
    idx
}

/// α = α̂ + Δα, edge by edge.
pub fn adapt_alphas(alpha_hat: &AlphaTable, deltas: &[Vec<f32>]) -> Result<AlphaTable> {
    if deltas.len() != alpha_hat.logits.len()
        || deltas
            .iter()
            .zip(&alpha_hat.logits)
            .any(|(d, a)| d.len() != a.len())
    {
        return Err(Error::Shape(
            "Δα does not match the alpha table's edges/ops".into(),
        ));
    }
    let logits = alpha_hat
        .logits
        .iter()
        .zip(deltas)
        .map(|(a, d)| a.iter().zip(d).map(|(x, y)| x + y).collect())
        .collect();
    AlphaTable::from_logits(alpha_hat.num_nodes, &alpha_hat.ops, logits)
}
