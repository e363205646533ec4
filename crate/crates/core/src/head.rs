//! Closed-form episode classifiers over pooled features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{one_hot, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Prototype,
    Ridge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub lambda: f32,
    pub tau: f32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig::ridge()
    }
}

impl HeadConfig {
    pub fn ridge() -> Self {
        HeadConfig {
            kind: HeadKind::Ridge,
            lambda: 1.0,
            tau: 1.0,
        }
    }

    pub fn prototype() -> Self {
        HeadConfig {
            kind: HeadKind::Prototype,
            lambda: 1.0,
            tau: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.tau > 0.0) {
            return Err(Error::Config(format!(
                "head needs λ>0 and τ>0, got λ={} τ={}",
                self.lambda, self.tau
            )));
        }
        Ok(())
    }

    /// Query logits (B×N) from support and query embeddings.
    pub fn logits<'t>(
        &self,
        support: Var<'t>,
        labels: &[usize],
        way: usize,
        query: Var<'t>,
    ) -> Result<Var<'t>> {
        match self.kind {
            HeadKind::Prototype => prototype_logits(support, labels, way, query, self.tau),
            HeadKind::Ridge => ridge_logits(support, labels, way, query, self.lambda, self.tau),
        }
    }
}

pub fn embed(features: Var<'_>) -> Result<Var<'_>> {
    features.global_avg_pool()
}

fn check_labels(labels: &[usize], way: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {} support rows",
            labels.len(),
            rows
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= way) {
        return Err(Error::Precondition(format!("label {bad} outside 0..{way}")));
    }
    Ok(())
}

/// Squared distances (B×N) between rows of `a` (B×D) and `b` (N×D).
fn sq_distances<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (rows_a, rows_b) = (a.shape()[0], b.shape()[0]);
    let an = a.mul(a)?.sum_to(&[rows_a, 1])?;
    let bn = b.mul(b)?.sum_to(&[rows_b, 1])?.t()?;
    an.add(bn)?.sub(a.matmul(b.t()?)?.scale(2.0)?)
}

/// logit(q, c) = −τ‖q − p_c‖² with p_c the class mean of the support.
pub fn prototype_logits<'t>(
    support: Var<'t>,
    labels: &[usize],
    way: usize,
    query: Var<'t>,
    tau: f32,
) -> Result<Var<'t>> {
    let s = support.shape()[0];
    check_labels(labels, way, s)?;
    let mut counts = vec![0usize; way];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Precondition(format!(
            "class {c} has no support samples"
        )));
    }
    let mut avg = vec![0.0f32; way * s];
    for (i, &l) in labels.iter().enumerate() {
        avg[l * s + i] = 1.0 / counts[l] as f32;
    }
    let avg = support.tape().constant(Tensor::new(&[way, s], avg)?);
    let protos = avg.matmul(support)?;
    sq_distances(query, protos)?.scale(-tau)
}

/// Ridge regression onto one-hot targets, solved in whichever of the dual
/// (S×S) or primal (D×D) forms is smaller.
pub fn ridge_logits<'t>(
    support: Var<'t>,
    labels: &[usize],
    way: usize,
    query: Var<'t>,
    lambda: f32,
    tau: f32,
) -> Result<Var<'t>> {
    let shape = support.shape();
    let (s, d) = (shape[0], shape[1]);
    check_labels(labels, way, s)?;
    if lambda <= 0.0 {
        return Err(Error::Precondition(format!(
            "ridge λ must be positive, got {lambda}"
        )));
    }
    let tape = support.tape();
    let y = tape.constant(one_hot(labels, way)?);
    let w = if s <= d {
        let k = support
            .matmul(support.t()?)?
            .add(tape.constant(scaled_identity(s, lambda)))?;
        support.t()?.matmul(k.solve(y)?)?
    } else {
        let g = support
            .t()?
            .matmul(support)?
            .add(tape.constant(scaled_identity(d, lambda)))?;
        g.solve(support.t()?.matmul(y)?)?
    };
    query.matmul(w)?.scale(tau)
}

fn scaled_identity(n: usize, v: f32) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = v;
    }
    Tensor::new(&[n, n], data).expect("square")
}

pub fn episode_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.cross_entropy(labels)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f32 {
    let n = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(n)
        .zip(labels)
        .filter(|(row, &l)| crate::search_space::argmax(row) == l)
        .count();
    hits as f32 / labels.len().max(1) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_prototypes(
        s: &Tensor,
        labels: &[usize],
        q: &Tensor,
        way: usize,
        tau: f32,
    ) -> Vec<f32> {
        let d = s.shape()[1];
        let mut out = Vec::new();
        for qi in q.data().chunks(d) {
            for c in 0..way {
                let members: Vec<&[f32]> = s
                    .data()
                    .chunks(d)
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(r, _)| r)
                    .collect();
                let mut dist = 0.0;
                for k in 0..d {
                    let p = members.iter().map(|r| r[k]).sum::<f32>() / members.len() as f32;
                    dist += (qi[k] - p).powi(2);
                }
                out.push(-tau * dist);
            }
        }
        out
    }

    #[test]
    fn prototype_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let labels = [0, 1, 2, 0, 1, 2];
        let s = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let q = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let tape = Tape::new();
        let l = prototype_logits(
            tape.constant(s.clone()),
            &labels,
            3,
            tape.constant(q.clone()),
            0.5,
        )
        .unwrap();
        let want = brute_prototypes(&s, &labels, &q, 3, 0.5);
        for (a, b) in l.value().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn query_at_prototype_wins_and_one_shot_prototype_is_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let q = tape.constant(s.clone());
        let l = prototype_logits(tape.constant(s), &[0, 1, 2], 3, q, 1.0).unwrap();
        assert_eq!(accuracy(&l.value(), &[0, 1, 2]), 1.0);
        for c in 0..3 {
            assert!(l.value().data()[c * 3 + c].abs() < 1e-5);
        }
    }

    #[test]
    fn empty_class_is_rejected() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::ones(&[2, 3]));
        assert!(prototype_logits(s, &[0, 0], 2, s, 1.0).is_err());
        assert!(prototype_logits(s, &[0, 5], 2, s, 1.0).is_err());
    }

    #[test]
    fn ridge_huge_lambda_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let s = tape.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
        let q = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let l = ridge_logits(s, &[0, 1, 2, 3, 4], 5, q, 1e9, 1.0).unwrap();
        assert!(l.value().data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn ridge_interpolates_with_tiny_lambda() {
        // dual and primal forms against a direct normal-equation solve
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (s_rows, d) in [(4, 8), (10, 3)] {
            let labels: Vec<usize> = (0..s_rows).map(|i| i % 2).collect();
            let st = Tensor::randn(&[s_rows, d], 1.0, &mut rng);
            let tape = Tape::new();
            let s = tape.constant(st.clone());
            let l = ridge_logits(s, &labels, 2, s, 1e-6, 1.0).unwrap().value();
            if s_rows <= d {
                let y = one_hot(&labels, 2).unwrap();
                assert!(l.max_abs_diff(&y) < 1e-2);
            }
            let x = nalgebra::DMatrix::from_row_slice(s_rows, d, st.data()).cast::<f64>();
            let y =
                nalgebra::DMatrix::from_row_slice(s_rows, 2, one_hot(&labels, 2).unwrap().data())
                    .cast::<f64>();
            let g = x.transpose() * &x + nalgebra::DMatrix::identity(d, d) * 1e-6;
            let w = g.lu().solve(&(x.transpose() * y)).unwrap();
            let want = x * w;
            for (a, b) in l.data().iter().zip(want.transpose().iter()) {
                assert!((*a as f64 - b).abs() < 1e-2, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let tape = Tape::new();
        let l = episode_loss(tape.constant(Tensor::zeros(&[3, 5])), &[0, 1, 4]).unwrap();
        assert!((l.value().item() - 5f32.ln()).abs() < 1e-4);
        let confident = tape.constant(Tensor::new(&[2, 2], vec![1e3, 0.0, 0.0, 1e3]).unwrap());
        assert!(episode_loss(confident, &[0, 1]).unwrap().value().item() < 1e-3);
        // hand value: rows (1,0) label 0, (0,2) label 0
        let z = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let want = ((1.0 + (-1f32).exp()).ln() + (1.0 + 2f32.exp()).ln()) / 2.0;
        assert!((episode_loss(z, &[0, 0]).unwrap().value().item() - want).abs() < 1e-5);
    }

    #[test]
    fn accuracy_breaks_ties_low() {
        let l = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(accuracy(&l, &[0, 1]), 0.5);
    }
}
