use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::kernels::{ConvGeom, PoolGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// A recorded primitive. Inputs are node ids on the owning tape.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f32),
    AddScalar(usize),
    MulConst(usize, Tensor),
    Powf(usize, f32),
    Exp(usize),
    Log(usize),
    Expand(usize),
    SumTo(usize),
    Reshape(usize),
    Transpose(usize),
    MatMul(usize, usize),
    Conv { x: usize, w: usize, geom: ConvGeom },
    ConvBackInput { gy: usize, w: usize, geom: ConvGeom },
    ConvBackWeight { x: usize, gy: usize, geom: ConvGeom },
    AvgPool { x: usize, geom: PoolGeom },
    AvgPoolAdjoint { gy: usize, geom: PoolGeom },
    Gather { x: usize, idx: Arc<Vec<usize>> },
    Scatter { x: usize, idx: Arc<Vec<usize>> },
    Solve(usize, usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | Solve(a, b) => vec![a, b],
            Neg(a)
            | Scale(a, _)
            | AddScalar(a)
            | MulConst(a, _)
            | Powf(a, _)
            | Exp(a)
            | Log(a)
            | Expand(a)
            | SumTo(a)
            | Reshape(a)
            | Transpose(a) => vec![a],
            Conv { x, w, .. } => vec![x, w],
            ConvBackInput { gy, w, .. } => vec![gy, w],
            ConvBackWeight { x, gy, .. } => vec![x, gy],
            AvgPool { x, .. } | AvgPoolAdjoint { gy: x, .. } => vec![x],
            Gather { x, .. } | Scatter { x, .. } => vec![x],
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
}

/// Append-only record of a computation.
///
/// Node ids are assigned in creation order, so every node's inputs precede
/// it and a reverse sweep over ids is a valid reverse topological order.
/// A tape is meant to live for one forward/backward cycle; start a fresh
/// one for the next step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every leaf that requires one.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bind a value that gradients should flow to.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, true, None)
    }

    /// Bind a value treated as fixed.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, false, None)
    }

    fn insert(&self, value: Tensor, requires_grad: bool, op: Option<Op>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {:?}",
                op_name(&op)
            )));
        }
        let requires_grad = self.grad_enabled.get() && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.insert(value, requires_grad, requires_grad.then_some(op)))
    }

    pub(crate) fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    fn node_value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Gradients of `loss` for every requires-grad leaf created before it.
    ///
    /// Nothing is accumulated on the tape: calling this twice returns the
    /// same gradients both times.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mark = self.len();
        let result = self.sweep(loss, false, &HashSet::new());
        let grads = match result {
            Ok(grads) => {
                let nodes = self.nodes.borrow();
                let mut by_id = HashMap::new();
                for (id, node) in nodes.iter().enumerate().take(loss.id + 1) {
                    if node.requires_grad && node.op.is_none() {
                        let g = match grads.get(&id) {
                            Some(&gid) => nodes[gid].value.clone(),
                            None => Tensor::zeros(node.value.shape()),
                        };
                        by_id.insert(id, g);
                    }
                }
                Ok(Gradients { by_id })
            }
            Err(e) => Err(e),
        };
        self.nodes.borrow_mut().truncate(mark);
        grads
    }

    /// Gradients of `loss` with respect to `wrt`, as plain values.
    pub fn grad(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let keep: HashSet<usize> = wrt.iter().map(|v| v.id).collect();
        let result = self.sweep(loss, false, &keep).map(|grads| {
            let nodes = self.nodes.borrow();
            wrt.iter()
                .map(|v| match grads.get(&v.id) {
                    Some(&gid) => nodes[gid].value.clone(),
                    None => Tensor::zeros(nodes[v.id].value.shape()),
                })
                .collect()
        });
        self.nodes.borrow_mut().truncate(mark);
        result
    }

    /// Gradients of `loss` with respect to `wrt`, recorded on the tape so
    /// they can be differentiated again.
    pub fn grad_graph<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let keep: HashSet<usize> = wrt.iter().map(|v| v.id).collect();
        let grads = self.sweep(loss, true, &keep)?;
        Ok(wrt
            .iter()
            .map(|v| match grads.get(&v.id) {
                Some(&gid) => self.var(gid),
                None => self.constant(Tensor::zeros(&v.shape())),
            })
            .collect())
    }

    /// Reverse sweep from `loss`; returns node id -> id of its gradient node.
    fn sweep(
        &self,
        loss: Var<'_>,
        create_graph: bool,
        keep: &HashSet<usize>,
    ) -> Result<HashMap<usize, usize>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Precondition(
                "loss belongs to a different tape".into(),
            ));
        }
        let (shape, requires_grad) = {
            let nodes = self.nodes.borrow();
            let node = &nodes[loss.id];
            (node.value.shape().to_vec(), node.requires_grad)
        };
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        if !requires_grad {
            return Err(Error::Detached);
        }

        let previous = self.grad_enabled.replace(create_graph);
        let result = (|| {
            let mut grads: HashMap<usize, usize> = HashMap::new();
            let seed = self.constant(Tensor::ones(&shape));
            grads.insert(loss.id, seed.id);
            for id in (0..=loss.id).rev() {
                let Some(&gid) = grads.get(&id) else { continue };
                let op = {
                    let nodes = self.nodes.borrow();
                    match &nodes[id].op {
                        Some(op) => op.clone(),
                        None => continue,
                    }
                };
                if !keep.contains(&id) {
                    grads.remove(&id);
                }
                let contributions = self.vjp(&op, id, self.var(gid))?;
                for (input, g) in contributions {
                    if !self.nodes.borrow()[input].requires_grad {
                        continue;
                    }
                    let merged = match grads.get(&input) {
                        Some(&existing) => self.var(existing).add(g)?.id,
                        None => g.id,
                    };
                    grads.insert(input, merged);
                }
            }
            Ok(grads)
        })();
        self.grad_enabled.set(previous);
        result
    }

    /// Vector-Jacobian product of one recorded op, expressed with recorded
    /// ops so the result is itself differentiable.
    fn vjp<'t>(&'t self, op: &Op, out: usize, g: Var<'t>) -> Result<Vec<(usize, Var<'t>)>> {
        use Op::*;
        let v = |id| self.var(id);
        Ok(match op {
            Add(a, b) => vec![(*a, g), (*b, g)],
            Sub(a, b) => vec![(*a, g), (*b, g.neg()?)],
            Mul(a, b) => vec![(*a, g.mul(v(*b))?), (*b, g.mul(v(*a))?)],
            Neg(a) => vec![(*a, g.neg()?)],
            Scale(a, s) => vec![(*a, g.scale(*s)?)],
            AddScalar(a) => vec![(*a, g)],
            MulConst(a, c) => vec![(*a, g.mul_const(c)?)],
            Powf(a, p) => vec![(*a, g.mul(v(*a).powf(p - 1.0)?)?.scale(*p)?)],
            Exp(a) => vec![(*a, g.mul(v(out))?)],
            Log(a) => vec![(*a, g.mul(v(*a).powf(-1.0)?)?)],
            Expand(a) => vec![(*a, g.sum_to(self.node_value(*a).shape())?)],
            SumTo(a) => vec![(*a, g.expand(self.node_value(*a).shape())?)],
            Reshape(a) => vec![(*a, g.reshape(self.node_value(*a).shape())?)],
            Transpose(a) => vec![(*a, g.t()?)],
            MatMul(a, b) => vec![(*a, g.matmul(v(*b).t()?)?), (*b, v(*a).t()?.matmul(g)?)],
            Conv { x, w, geom } => vec![
                (*x, g.conv_back_input(v(*w), *geom)?),
                (*w, v(*x).conv_back_weight(g, *geom)?),
            ],
            ConvBackInput { gy, w, geom } => vec![
                (*gy, g.conv2d(v(*w), geom.stride, geom.pad)?),
                (*w, g.conv_back_weight(v(*gy), *geom)?),
            ],
            ConvBackWeight { x, gy, geom } => vec![
                (*x, v(*gy).conv_back_input(g, *geom)?),
                (*gy, v(*x).conv2d(g, geom.stride, geom.pad)?),
            ],
            AvgPool { x, geom } => {
                vec![(*x, g.avg_pool_adjoint(*geom, self.node_value(*x).shape())?)]
            }
            AvgPoolAdjoint { gy, geom } => vec![(*gy, g.avg_pool_geom(*geom)?)],
            Gather { x, idx } => {
                vec![(*x, g.scatter(Arc::clone(idx), self.node_value(*x).shape())?)]
            }
            Scatter { x, idx } => {
                vec![(*x, g.gather(Arc::clone(idx), self.node_value(*x).shape())?)]
            }
            Solve(a, b) => {
                // x = a^-1 b  =>  gb = a^-T g,  ga = -gb x^T
                let gb = v(*a).t()?.solve(g)?;
                let ga = gb.matmul(v(out).t()?)?.neg()?;
                vec![(*a, ga), (*b, gb)]
            }
        })
    }
}

fn op_name(op: &Op) -> &'static str {
    use Op::*;
    match op {
        Add(..) => "add",
        Sub(..) => "sub",
        Mul(..) => "mul",
        Neg(..) => "neg",
        Scale(..) => "scale",
        AddScalar(..) => "add_scalar",
        MulConst(..) => "mul_const",
        Powf(..) => "powf",
        Exp(..) => "exp",
        Log(..) => "log",
        Expand(..) => "expand",
        SumTo(..) => "sum_to",
        Reshape(..) => "reshape",
        Transpose(..) => "transpose",
        MatMul(..) => "matmul",
        Conv { .. } => "conv2d",
        ConvBackInput { .. } => "conv2d_back_input",
        ConvBackWeight { .. } => "conv2d_back_weight",
        AvgPool { .. } => "avg_pool",
        AvgPoolAdjoint { .. } => "avg_pool_adjoint",
        Gather { .. } => "gather",
        Scatter { .. } => "scatter",
        Solve(..) => "solve",
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.node_value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}
