//! The task-adaptable block: a complete DAG whose edges are softmax-weighted
//! mixtures of candidate operations.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, Forward};
use crate::params::{Bound, Buffers, ParamGroup, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LEAKY_SLOPE: f32 = 0.1;

/// Candidate operations, in canonical order (ties break toward lower index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Zero,
    Skip,
    Mean3,
    Max3,
    Conv1,
    Conv5Act,
    Conv5,
    Conv3Act,
    Conv3,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Zero,
        OpKind::Skip,
        OpKind::Mean3,
        OpKind::Max3,
        OpKind::Conv1,
        OpKind::Conv5Act,
        OpKind::Conv5,
        OpKind::Conv3Act,
        OpKind::Conv3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Skip => "skip",
            OpKind::Mean3 => "mean3",
            OpKind::Max3 => "max3",
            OpKind::Conv1 => "conv1",
            OpKind::Conv5Act => "conv5+",
            OpKind::Conv5 => "conv5",
            OpKind::Conv3Act => "conv3+",
            OpKind::Conv3 => "conv3",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|op| op.name() == name)
    }

    /// Kernel size for the convolutional ops.
    fn kernel(self) -> Option<usize> {
        match self {
            OpKind::Conv1 => Some(1),
            OpKind::Conv3 | OpKind::Conv3Act => Some(3),
            OpKind::Conv5 | OpKind::Conv5Act => Some(5),
            _ => None,
        }
    }
}

/// Which candidate set the block searches over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpSet {
    #[default]
    Full,
    /// Without the 5×5 convolutions.
    Reduced,
}

impl OpSet {
    pub fn ops(self) -> Vec<OpKind> {
        match self {
            OpSet::Full => OpKind::ALL.to_vec(),
            OpSet::Reduced => OpKind::ALL
                .into_iter()
                .filter(|op| !matches!(op, OpKind::Conv5 | OpKind::Conv5Act))
                .collect(),
        }
    }
}

impl std::str::FromStr for OpSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(OpSet::Full),
            "reduced" => Ok(OpSet::Reduced),
            other => Err(Error::Config(format!(
                "unknown op set {other:?} (full|reduced)"
            ))),
        }
    }
}

/// One parameterized instance of an operation on one edge.
#[derive(Clone, Debug)]
pub struct EdgeOp {
    pub kind: OpKind,
    conv: Option<Conv>,
    bn: Option<BatchNorm>,
}

impl EdgeOp {
    pub fn new<R: Rng + ?Sized>(
        kind: OpKind,
        channels: usize,
        name: &str,
        group: ParamGroup,
        store: &mut ParamStore,
        buffers: &mut Buffers,
        rng: &mut R,
    ) -> Self {
        let conv = kind.kernel().map(|k| {
            Conv::new(
                &format!("{name}.conv"),
                channels,
                channels,
                k,
                1,
                k / 2,
                group,
                store,
                rng,
            )
        });
        let bn = match kind {
            OpKind::Zero | OpKind::Skip => None,
            _ => Some(BatchNorm::new(
                &format!("{name}.bn"),
                channels,
                group,
                store,
                buffers,
            )),
        };
        EdgeOp { kind, conv, bn }
    }

    /// Apply the op; `None` stands for the all-zero output.
    pub fn forward<'t>(
        &self,
        x: Var<'t>,
        params: &Bound<'t>,
        fwd: &Forward<'_>,
    ) -> Result<Option<Var<'t>>> {
        let y = match self.kind {
            OpKind::Zero => return Ok(None),
            OpKind::Skip => return Ok(Some(x)),
            OpKind::Mean3 => x.avg_pool2d(3, 1, 1)?,
            OpKind::Max3 => x.max_pool2d(3, 1, 1)?,
            _ => self
                .conv
                .as_ref()
                .expect("conv op without weights")
                .forward(x, params)?,
        };
        let y = self
            .bn
            .as_ref()
            .expect("op without batch norm")
            .forward(y, params, fwd)?;
        Ok(Some(match self.kind {
            OpKind::Conv3Act | OpKind::Conv5Act => y.leaky_relu(LEAKY_SLOPE)?,
            _ => y,
        }))
    }
}

/// Σ_o w_o·o(x) for simplex weights `w` (one entry per op).
///
/// Ops whose weight is a constant exact zero are not evaluated.
pub fn mixed_op_weighted<'t>(
    x: Var<'t>,
    ops: &[EdgeOp],
    weights: Var<'t>,
    params: &Bound<'t>,
    fwd: &Forward<'_>,
) -> Result<Option<Var<'t>>> {
    let w = weights.value();
    if w.shape() != [ops.len()] {
        return Err(Error::Shape(format!(
            "{} ops but weights of shape {:?}",
            ops.len(),
            w.shape()
        )));
    }
    let fixed = !weights.requires_grad();
    let mut acc: Option<Var<'t>> = None;
    for (o, op) in ops.iter().enumerate() {
        if op.kind == OpKind::Zero || (fixed && w.data()[o] == 0.0) {
            continue;
        }
        let Some(y) = op.forward(x, params, fwd)? else {
            continue;
        };
        if y.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "{} changed shape {:?} -> {:?}",
                op.kind.name(),
                x.shape(),
                y.shape()
            )));
        }
        let term = if fixed && w.data()[o] == 1.0 {
            y
        } else {
            y.mul(weights.index(o)?)?
        };
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc)
}

/// Softmax-weighted mixed operation over one edge's logits.
pub fn mixed_op_forward<'t>(
    x: Var<'t>,
    ops: &[EdgeOp],
    alpha_edge: Var<'t>,
    params: &Bound<'t>,
    fwd: &Forward<'_>,
) -> Result<Var<'t>> {
    let out = mixed_op_weighted(x, ops, alpha_edge.softmax()?, params, fwd)?;
    zero_if_none(out, x)
}

fn zero_if_none<'t>(v: Option<Var<'t>>, like: Var<'t>) -> Result<Var<'t>> {
    Ok(v.unwrap_or_else(|| like.tape().constant(Tensor::zeros(&like.shape()))))
}

/// Edges (i, j), i < j, in lexicographic order.
pub fn dag_edges(num_nodes: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..num_nodes {
        for j in i + 1..num_nodes {
            edges.push((i, j));
        }
    }
    edges
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub ops: Vec<EdgeOp>,
}

#[derive(Clone, Debug)]
pub struct AdaptiveBlock {
    pub num_nodes: usize,
    pub channels: usize,
    pub ops: Vec<OpKind>,
    pub edges: Vec<Edge>,
}

impl AdaptiveBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        num_nodes: usize,
        channels: usize,
        ops: &[OpKind],
        prefix: &str,
        group: ParamGroup,
        store: &mut ParamStore,
        buffers: &mut Buffers,
        rng: &mut R,
    ) -> Result<Self> {
        if num_nodes < 2 || channels == 0 || ops.is_empty() {
            return Err(Error::Config(format!(
                "block needs ≥2 nodes, ≥1 channel and ≥1 op (got {num_nodes}, {channels}, {})",
                ops.len()
            )));
        }
        let edges = dag_edges(num_nodes)
            .into_iter()
            .map(|(i, j)| Edge {
                from: i,
                to: j,
                ops: ops
                    .iter()
                    .map(|&k| {
                        EdgeOp::new(
                            k,
                            channels,
                            &format!("{prefix}.e{i}{j}.{}", k.name()),
                            group,
                            store,
                            buffers,
                            rng,
                        )
                    })
                    .collect(),
            })
            .collect();
        Ok(AdaptiveBlock {
            num_nodes,
            channels,
            ops: ops.to_vec(),
            edges,
        })
    }

    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        self.edges.iter().position(|e| e.from == i && e.to == j)
    }

    /// Every node's output, x_0 first.
    pub fn forward_nodes<'t>(
        &self,
        x0: Var<'t>,
        weights: &[Var<'t>],
        params: &Bound<'t>,
        fwd: &Forward<'_>,
    ) -> Result<Vec<Var<'t>>> {
        if weights.len() != self.edges.len() {
            return Err(Error::Shape(format!(
                "{} edges but {} weight vectors",
                self.edges.len(),
                weights.len()
            )));
        }
        let shape = x0.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "block wants (B,{},M,M), got {:?}",
                self.channels, shape
            )));
        }
        let mut nodes = vec![x0];
        for j in 1..self.num_nodes {
            let mut acc: Option<Var<'t>> = None;
            for (e, edge) in self.edges.iter().enumerate().filter(|(_, e)| e.to == j) {
                if let Some(y) =
                    mixed_op_weighted(nodes[edge.from], &edge.ops, weights[e], params, fwd)?
                {
                    acc = Some(match acc {
                        Some(a) => a.add(y)?,
                        None => y,
                    });
                }
            }
            nodes.push(zero_if_none(acc, x0)?);
        }
        Ok(nodes)
    }

    /// x_{|V|-1} under per-edge simplex weights.
    pub fn forward_weighted<'t>(
        &self,
        x0: Var<'t>,
        weights: &[Var<'t>],
        params: &Bound<'t>,
        fwd: &Forward<'_>,
    ) -> Result<Var<'t>> {
        Ok(*self
            .forward_nodes(x0, weights, params, fwd)?
            .last()
            .expect("at least two nodes"))
    }

    /// x_{|V|-1} under per-edge logits.
    pub fn forward<'t>(
        &self,
        x0: Var<'t>,
        alpha: &[Var<'t>],
        params: &Bound<'t>,
        fwd: &Forward<'_>,
    ) -> Result<Var<'t>> {
        let w = alpha
            .iter()
            .map(|a| a.softmax())
            .collect::<Result<Vec<_>>>()?;
        self.forward_weighted(x0, &w, params, fwd)
    }
}

/// Per-edge architecture logits. Discretized tables hold 0 on the chosen op
/// and −∞ elsewhere, so their softmax is exactly one-hot.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTable {
    pub num_nodes: usize,
    pub ops: Vec<OpKind>,
    pub logits: Vec<Vec<f32>>,
}

impl AlphaTable {
    pub fn zeros(num_nodes: usize, ops: &[OpKind]) -> Self {
        let edges = dag_edges(num_nodes).len();
        AlphaTable {
            num_nodes,
            ops: ops.to_vec(),
            logits: vec![vec![0.0; ops.len()]; edges],
        }
    }

    pub fn from_logits(num_nodes: usize, ops: &[OpKind], logits: Vec<Vec<f32>>) -> Result<Self> {
        let table = AlphaTable {
            num_nodes,
            ops: ops.to_vec(),
            logits,
        };
        table.check()?;
        Ok(table)
    }

    fn check(&self) -> Result<()> {
        let edges = dag_edges(self.num_nodes).len();
        if self.logits.len() != edges || self.logits.iter().any(|l| l.len() != self.ops.len()) {
            return Err(Error::Shape(format!(
                "alpha table for {} nodes needs {} edges × {} ops",
                self.num_nodes,
                edges,
                self.ops.len()
            )));
        }
        Ok(())
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        dag_edges(self.num_nodes)
    }

    pub fn edge(&self, i: usize, j: usize) -> Option<&[f32]> {
        let e = self.edges().iter().position(|&p| p == (i, j))?;
        Some(&self.logits[e])
    }

    pub fn same_structure(&self, other: &AlphaTable) -> bool {
        self.num_nodes == other.num_nodes && self.ops == other.ops
    }

    pub fn weights(&self) -> Vec<Vec<f32>> {
        self.logits.iter().map(|l| softmax(l)).collect()
    }

    pub fn is_discrete(&self) -> bool {
        self.logits
            .iter()
            .all(|l| l.iter().filter(|v| v.is_finite()).count() == 1)
    }

    /// Bind as per-edge simplex weights: softmax on the tape for trainable
    /// logits, constants otherwise.
    pub fn weight_constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.weights()
            .into_iter()
            .map(|w| tape.constant(Tensor::new(&[w.len()], w).expect("length matches")))
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = csv::Writer::from_writer(Vec::new());
        out.write_record(["edge_i", "edge_j", "op_name", "logit", "softmax_weight"])
            .map_err(csv_err)?;
        for ((i, j), (logits, weights)) in self
            .edges()
            .into_iter()
            .zip(self.logits.iter().zip(self.weights()))
        {
            for ((op, l), w) in self.ops.iter().zip(logits).zip(weights) {
                out.write_record([
                    i.to_string(),
                    j.to_string(),
                    op.name().to_string(),
                    l.to_string(),
                    w.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = out.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parse the CSV produced by [`AlphaTable::to_csv`]; the edge and op
    /// structure is inferred and must be complete.
    pub fn from_csv(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            edge_i: usize,
            edge_j: usize,
            op_name: String,
            logit: f32,
        }
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for r in reader.deserialize::<Row>() {
            rows.push(r.map_err(csv_err)?);
        }
        let num_nodes = rows
            .iter()
            .map(|r| r.edge_j + 1)
            .max()
            .ok_or_else(|| Error::Config("empty alpha csv".into()))?;
        let mut ops = Vec::new();
        for r in rows
            .iter()
            .take_while(|r| (r.edge_i, r.edge_j) == (rows[0].edge_i, rows[0].edge_j))
        {
            ops.push(
                OpKind::from_name(&r.op_name)
                    .ok_or_else(|| Error::Config(format!("unknown op {:?}", r.op_name)))?,
            );
        }
        let edges = dag_edges(num_nodes);
        if rows.len() != edges.len() * ops.len() {
            return Err(Error::Config(format!(
                "alpha csv has {} rows, expected {}",
                rows.len(),
                edges.len() * ops.len()
            )));
        }
        let mut logits = Vec::with_capacity(edges.len());
        for (e, chunk) in rows.chunks(ops.len()).enumerate() {
            for (r, op) in chunk.iter().zip(&ops) {
                if (r.edge_i, r.edge_j) != edges[e] || r.op_name != op.name() {
                    return Err(Error::Config(format!(
                        "alpha csv row ({},{},{}) out of order",
                        r.edge_i, r.edge_j, r.op_name
                    )));
                }
            }
            logits.push(chunk.iter().map(|r| r.logit).collect());
        }
        AlphaTable::from_logits(num_nodes, &ops, logits)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Max-subtracted softmax that tolerates −∞ entries.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per edge, the `k` ops with the highest softmax weight, descending.
pub fn top_k_ops(alpha: &AlphaTable, k: usize) -> Result<Vec<Vec<(OpKind, f32)>>> {
    if k > alpha.ops.len() {
        return Err(Error::Precondition(format!(
            "k={k} exceeds {} ops",
            alpha.ops.len()
        )));
    }
    Ok(alpha
        .weights()
        .into_iter()
        .map(|w| {
            let mut order: Vec<usize> = (0..w.len()).collect();
            // stable sort keeps canonical order among equal weights
            order.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
            order
                .into_iter()
                .take(k)
                .map(|o| (alpha.ops[o], w[o]))
                .collect()
        })
        .collect())
}

pub fn discretize(alpha: &AlphaTable) -> AlphaTable {
    let logits = alpha
        .weights()
        .iter()
        .map(|w| {
            let best = argmax(w);
            (0..w.len())
                .map(|o| if o == best { 0.0 } else { f32::NEG_INFINITY })
                .collect()
        })
        .collect();
    AlphaTable {
        num_nodes: alpha.num_nodes,
        ops: alpha.ops.clone(),
        logits,
    }
}

/// DOT digraph of the top-`k` ops per edge; zero-weight entries are omitted.
pub fn export_dot(alpha: &AlphaTable, k: usize) -> Result<String> {
    let top = top_k_ops(alpha, k)?;
    let mut s = String::from("digraph block {\n  rankdir=LR;\n");
    for n in 0..alpha.num_nodes {
        let _ = writeln!(s, "  x{n} [shape=box];");
    }
    for ((i, j), ranked) in alpha.edges().into_iter().zip(top) {
        for (rank, (op, w)) in ranked.into_iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let style = if rank == 0 { "solid" } else { "dashed" };
            let _ = writeln!(
                s,
                "  x{i} -> x{j} [label=\"{} {w:.3}\", style={style}];",
                op.name()
            );
        }
    }
    s.push_str("}\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(
        nodes: usize,
        ch: usize,
        ops: &[OpKind],
        seed: u64,
    ) -> (AdaptiveBlock, ParamStore, Buffers) {
        let mut store = ParamStore::new();
        let mut buffers = Buffers::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = AdaptiveBlock::new(
            nodes,
            ch,
            ops,
            "blk",
            ParamGroup::Block,
            &mut store,
            &mut buffers,
            &mut rng,
        )
        .unwrap();
        (b, store, buffers)
    }

    fn vec_var<'t>(tape: &'t Tape, v: &[f32]) -> Var<'t> {
        tape.constant(Tensor::new(&[v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn names_round_trip_and_reduced_set() {
        for op in OpKind::ALL {
            assert_eq!(OpKind::from_name(op.name()), Some(op));
        }
        let reduced = OpSet::Reduced.ops();
        assert_eq!(reduced.len(), 7);
        assert!(!reduced.contains(&OpKind::Conv5));
        assert_eq!("reduced".parse::<OpSet>().unwrap(), OpSet::Reduced);
    }

    #[test]
    fn zero_skip_uniform_halves_input() {
        let (b, store, buffers) = block(2, 2, &[OpKind::Zero, OpKind::Skip], 1);
        let tape = Tape::new();
        let p = store.bind(&tape, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let x = tape.constant(xt.clone());
        let y = mixed_op_forward(
            x,
            &b.edges[0].ops,
            vec_var(&tape, &[0.0, 0.0]),
            &p,
            &Forward::train(&buffers),
        )
        .unwrap();
        assert!(y.value().max_abs_diff(&xt.map(|v| v / 2.0)) < 1e-7);

        let y = mixed_op_forward(
            x,
            &b.edges[0].ops,
            vec_var(&tape, &[0.0, 20.0]),
            &p,
            &Forward::train(&buffers),
        )
        .unwrap();
        assert!(y.value().max_abs_diff(&xt) < 1e-6 * 4.0);
    }

    #[test]
    fn all_zero_mass_gives_zero_output() {
        let (b, store, buffers) = block(4, 3, &OpKind::ALL, 3);
        let tape = Tape::new();
        let p = store.bind(&tape, &[]);
        let mut logits = vec![-1e9f32; 9];
        logits[0] = 0.0;
        let alpha = AlphaTable::from_logits(4, &OpKind::ALL, vec![logits; 6]).unwrap();
        let x = tape.constant(Tensor::ones(&[2, 3, 4, 4]));
        let y = b
            .forward_weighted(
                x,
                &alpha.weight_constants(&tape),
                &p,
                &Forward::train(&buffers),
            )
            .unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn top_k_ties_and_order() {
        let uniform = AlphaTable::zeros(2, &OpKind::ALL);
        let top = top_k_ops(&uniform, 2).unwrap();
        assert_eq!(
            top[0].iter().map(|t| t.0).collect::<Vec<_>>(),
            vec![OpKind::Zero, OpKind::Skip]
        );

        let mut logits = vec![-0.5f32; 9];
        logits[1] = 1.0;
        logits[8] = 0.9;
        logits[0] = 0.0;
        let a = AlphaTable::from_logits(2, &OpKind::ALL, vec![logits]).unwrap();
        let top = top_k_ops(&a, 2).unwrap();
        assert_eq!(
            top[0].iter().map(|t| t.0).collect::<Vec<_>>(),
            vec![OpKind::Skip, OpKind::Conv3]
        );
        assert!(top_k_ops(&a, 10).is_err());
    }

    #[test]
    fn discretize_picks_argmax_and_is_idempotent() {
        let ops = &OpKind::ALL[..3];
        let a = AlphaTable::from_logits(2, ops, vec![vec![0.7f32.ln(), 0.2f32.ln(), 0.1f32.ln()]])
            .unwrap();
        let d = discretize(&a);
        assert_eq!(d.weights()[0], vec![1.0, 0.0, 0.0]);
        assert!(d.is_discrete());
        assert_eq!(discretize(&d), d);
        let tied = discretize(&AlphaTable::zeros(2, ops));
        assert_eq!(tied.weights()[0], vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = (0..6)
            .map(|_| (0..7).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let a = AlphaTable::from_logits(4, &OpSet::Reduced.ops(), logits).unwrap();
        let text = a.to_csv().unwrap();
        assert!(text.starts_with("edge_i,edge_j,op_name,logit,softmax_weight\n"));
        assert_eq!(text.lines().count(), 1 + 6 * 7);
        assert_eq!(AlphaTable::from_csv(&text).unwrap(), a);
        let d = discretize(&a);
        assert_eq!(AlphaTable::from_csv(&d.to_csv().unwrap()).unwrap(), d);
        assert!(AlphaTable::from_csv(
            "edge_i,edge_j,op_name,logit,softmax_weight\n0,1,bogus,0,1\n"
        )
        .is_err());
    }

    #[test]
    fn dot_single_edge() {
        let ops = [OpKind::Zero, OpKind::Skip];
        let a = discretize(&AlphaTable::from_logits(2, &ops, vec![vec![0.0, 5.0]]).unwrap());
        let dot = export_dot(&a, 2).unwrap();
        assert_eq!(dot.matches("->").count(), 1);
        assert!(dot.contains("x0 -> x1 [label=\"skip 1.000\""));
        let full = export_dot(&AlphaTable::zeros(4, &OpKind::ALL), 2).unwrap();
        assert_eq!(full.matches("->").count(), 12);
    }

    #[test]
    fn bad_shapes_rejected() {
        let (b, store, buffers) = block(3, 2, &OpKind::ALL, 5);
        let tape = Tape::new();
        let p = store.bind(&tape, &[]);
        let x = tape.constant(Tensor::ones(&[1, 3, 4, 4]));
        let w = AlphaTable::zeros(3, &OpKind::ALL).weight_constants(&tape);
        assert!(b
            .forward_weighted(x, &w, &p, &Forward::train(&buffers))
            .is_err());
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        assert!(b
            .forward_weighted(x, &w[..2], &p, &Forward::train(&buffers))
            .is_err());
        assert!(AlphaTable::from_logits(3, &OpKind::ALL, vec![vec![0.0; 9]; 2]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn table() -> impl Strategy<Value = AlphaTable> {
            (2usize..5).prop_flat_map(|n| {
                let edges = dag_edges(n).len();
                prop::collection::vec(
                    prop::collection::vec(-8.0f32..8.0, OpKind::ALL.len()),
                    edges,
                )
                .prop_map(move |l| AlphaTable::from_logits(n, &OpKind::ALL, l).unwrap())
            })
        }

        proptest! {
            #[test]
            fn csv_round_trip_keeps_logits(t in table()) {
                let back = AlphaTable::from_csv(&t.to_csv().unwrap()).unwrap();
                prop_assert!(back.same_structure(&t));
                for (a, b) in back.logits.iter().flatten().zip(t.logits.iter().flatten()) {
                    prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
                }
            }

            #[test]
            fn edge_weights_lie_on_simplex(t in table()) {
                for w in t.weights() {
                    prop_assert!(w.iter().all(|&v| v >= 0.0));
                    prop_assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}
