//! Alternating optimization of weights w and architecture logits α on
//! disjoint folds, with first- and second-order α gradients.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, Sgd};
use crate::tensor::{Tape, Tensor, Var};

/// How the α gradient accounts for the weight step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    First,
    /// Differentiate through one virtual SGD step by double backward.
    Exact,
    /// Virtual step with the Hessian-vector product taken by central
    /// differences of ∇_α L_w.
    #[default]
    Second,
}

impl std::str::FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Order::First),
            "second" => Ok(Order::Second),
            "exact" => Ok(Order::Exact),
            other => Err(Error::Config(format!(
                "unknown order {other:?} (first|second|exact)"
            ))),
        }
    }
}

/// The two fold losses as functions of (w, α). Implementations capture
/// their batches.
pub trait BilevelObjective {
    fn loss_w<'t>(&self, tape: &'t Tape, w: &[Var<'t>], alpha: &[Var<'t>]) -> Result<Var<'t>>;
    fn loss_alpha<'t>(&self, tape: &'t Tape, w: &[Var<'t>], alpha: &[Var<'t>]) -> Result<Var<'t>>;
}

fn leaves<'t>(tape: &'t Tape, xs: &[Tensor]) -> Vec<Var<'t>> {
    xs.iter().map(|x| tape.leaf(x.clone())).collect()
}

fn constants<'t>(tape: &'t Tape, xs: &[Tensor]) -> Vec<Var<'t>> {
    xs.iter().map(|x| tape.constant(x.clone())).collect()
}

fn ensure_finite(gs: &[Tensor]) -> Result<()> {
    if gs.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(())
}

/// (L_w, ∇_w L_w) at (w, α).
pub fn weight_gradient<O: BilevelObjective + ?Sized>(
    obj: &O,
    w: &[Tensor],
    alpha: &[Tensor],
) -> Result<(f32, Vec<Tensor>)> {
    let tape = Tape::new();
    let (wv, av) = (leaves(&tape, w), constants(&tape, alpha));
    let loss = obj.loss_w(&tape, &wv, &av)?;
    let value = loss.value().item();
    let g = grad_or_zero(&tape, loss, &wv)?;
    ensure_finite(&g)?;
    Ok((value, g))
}

fn alpha_grad_of_loss_w<O: BilevelObjective + ?Sized>(
    obj: &O,
    w: &[Tensor],
    alpha: &[Tensor],
) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let (wv, av) = (constants(&tape, w), leaves(&tape, alpha));
    let loss = obj.loss_w(&tape, &wv, &av)?;
    grad_or_zero(&tape, loss, &av)
}

/// Gradient of `loss`, or zeros when it does not depend on anything trainable.
fn grad_or_zero<'t>(tape: &'t Tape, loss: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Tensor>> {
    if !loss.requires_grad() {
        return Ok(wrt.iter().map(|v| Tensor::zeros(&v.shape())).collect());
    }
    tape.grad(loss, wrt)
}

fn axpy(a: f32, x: &[Tensor], y: &[Tensor]) -> Vec<Tensor> {
    x.iter()
        .zip(y)
        .map(|(xi, yi)| yi.zip_map(xi, |b, a_| b + a * a_).expect("same shapes"))
        .collect()
}

/// ∇_α of the α-fold loss, at w or at the virtual step w' = w − µ∇_w L_w.
/// Returns (L_α at the evaluation point, gradient).
pub fn hypergradient<O: BilevelObjective + ?Sized>(
    obj: &O,
    w: &[Tensor],
    alpha: &[Tensor],
    mu: f32,
    order: Order,
) -> Result<(f32, Vec<Tensor>)> {
    let out = match order {
        Order::First => {
            let tape = Tape::new();
            let (wv, av) = (constants(&tape, w), leaves(&tape, alpha));
            let loss = obj.loss_alpha(&tape, &wv, &av)?;
            let value = loss.value().item();
            (value, grad_or_zero(&tape, loss, &av)?)
        }
        Order::Exact => {
            let tape = Tape::new();
            let (wv, av) = (leaves(&tape, w), leaves(&tape, alpha));
            let lw = obj.loss_w(&tape, &wv, &av)?;
            let gw = tape.grad_graph(lw, &wv)?;
            let w_virtual = wv
                .iter()
                .zip(&gw)
                .map(|(&wi, &gi)| wi.sub(gi.scale(mu)?))
                .collect::<Result<Vec<_>>>()?;
            let la = obj.loss_alpha(&tape, &w_virtual, &av)?;
            let value = la.value().item();
            (value, grad_or_zero(&tape, la, &av)?)
        }
        Order::Second => {
            let w_virtual = if mu == 0.0 {
                w.to_vec()
            } else {
                let (_, gw) = weight_gradient(obj, w, alpha)?;
                axpy(-mu, &gw, w)
            };
            let tape = Tape::new();
            let (wv, av) = (leaves(&tape, &w_virtual), leaves(&tape, alpha));
            let la = obj.loss_alpha(&tape, &wv, &av)?;
            let value = la.value().item();
            let mut grads = grad_or_zero(&tape, la, &[av.clone(), wv.clone()].concat())?;
            let v = grads.split_off(alpha.len());
            let norm = v.iter().map(|t| t.sq_norm() as f64).sum::<f64>().sqrt() as f32;
            if mu != 0.0 {
                if norm == 0.0 || !norm.is_finite() {
                    warn!("virtual-step gradient has norm {norm}; skipping the second-order correction");
                } else {
                    let eps = 0.01 / norm;
                    let plus = alpha_grad_of_loss_w(obj, &axpy(eps, &v, w), alpha)?;
                    let minus = alpha_grad_of_loss_w(obj, &axpy(-eps, &v, w), alpha)?;
                    for ((g, p), m) in grads.iter_mut().zip(plus).zip(minus) {
                        let hvp = p.zip_map(&m, |a, b| (a - b) / (2.0 * eps))?;
                        *g = g.zip_map(&hvp, |gi, h| gi - mu * h)?;
                    }
                }
            }
            (value, grads)
        }
    };
    ensure_finite(&out.1)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AlphaOptConfig {
    Adam(AdamConfig),
    /// Plain gradient descent, no state.
    Sgd {
        lr: f32,
    },
}

impl Default for AlphaOptConfig {
    fn default() -> Self {
        AlphaOptConfig::Adam(AdamConfig::default())
    }
}

impl AlphaOptConfig {
    pub fn lr(&self) -> f32 {
        match self {
            AlphaOptConfig::Adam(c) => c.lr,
            AlphaOptConfig::Sgd { lr } => *lr,
        }
    }
}

#[derive(Clone, Debug)]
pub enum AlphaOptimizer {
    Adam(Adam),
    Sgd,
}

impl AlphaOptimizer {
    pub fn new(config: &AlphaOptConfig) -> Self {
        match config {
            AlphaOptConfig::Adam(c) => AlphaOptimizer::Adam(Adam::new(*c)),
            AlphaOptConfig::Sgd { .. } => AlphaOptimizer::Sgd,
        }
    }

    pub fn step(&mut self, alpha: &mut [Tensor], grads: &[Tensor], eta: f32) -> Result<()> {
        match self {
            AlphaOptimizer::Adam(a) => a.step(alpha, grads, eta),
            AlphaOptimizer::Sgd => {
                ensure_finite(grads)?;
                for (a, g) in alpha.iter_mut().zip(grads) {
                    *a = a.zip_map(g, |x, gi| x - eta * gi)?;
                }
                Ok(())
            }
        }
    }
}

/// w ← SGD step on ∇_w L_w(w, α). Returns L_w before the step.
pub fn step_w<O: BilevelObjective + ?Sized>(
    obj: &O,
    w: &mut [Tensor],
    alpha: &[Tensor],
    opt: &mut Sgd,
    mu: f32,
) -> Result<f32> {
    let (loss, g) = weight_gradient(obj, w, alpha)?;
    opt.step(w, &g, mu)?;
    Ok(loss)
}

/// α ← optimizer step on the hypergradient. Returns L_α.
#[allow(clippy::too_many_arguments)]
pub fn step_alpha<O: BilevelObjective + ?Sized>(
    obj: &O,
    w: &[Tensor],
    alpha: &mut [Tensor],
    opt: &mut AlphaOptimizer,
    mu: f32,
    eta: f32,
    order: Order,
) -> Result<f32> {
    let (loss, g) = hypergradient(obj, w, alpha, mu, order)?;
    opt.step(alpha, &g, eta)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::SgdConfig;

    /// L_w = (w − α)², L_α = (w − 1)².
    struct Quadratic;

    impl BilevelObjective for Quadratic {
        fn loss_w<'t>(&self, _: &'t Tape, w: &[Var<'t>], a: &[Var<'t>]) -> Result<Var<'t>> {
            let d = w[0].sub(a[0])?;
            d.mul(d)
        }
        fn loss_alpha<'t>(&self, _: &'t Tape, w: &[Var<'t>], _: &[Var<'t>]) -> Result<Var<'t>> {
            let d = w[0].add_scalar(-1.0)?;
            d.mul(d)
        }
    }

    fn s(v: f32) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn quadratic_hypergradient_all_modes() {
        // w' = w − 2µ(w − α) so dL_α/dα = 2(w' − 1)·2µ = −2 at w=α=0, µ=½
        let (_, exact) = hypergradient(&Quadratic, &s(0.0), &s(0.0), 0.5, Order::Exact).unwrap();
        assert!((exact[0].item() + 2.0).abs() < 1e-5);
        let (_, fd) = hypergradient(&Quadratic, &s(0.0), &s(0.0), 0.5, Order::Second).unwrap();
        assert!((fd[0].item() + 2.0).abs() < 2e-2);
        let (_, first) = hypergradient(&Quadratic, &s(0.0), &s(0.0), 0.5, Order::First).unwrap();
        assert_eq!(first[0].item(), 0.0);

        let mut alpha = s(0.0);
        let mut opt = AlphaOptimizer::new(&AlphaOptConfig::Sgd { lr: 0.1 });
        step_alpha(
            &Quadratic,
            &s(0.0),
            &mut alpha,
            &mut opt,
            0.5,
            0.1,
            Order::Exact,
        )
        .unwrap();
        assert!((alpha[0].item() - 0.2).abs() < 1e-6);
    }

    #[test]
    fn brute_force_composite_derivative() {
        // numeric derivative of α ↦ L_α(w'(α)) at a generic point
        let (w, a, mu) = (0.3f64, -0.2f64, 0.4f64);
        let f = |a: f64| {
            let wp = w - mu * 2.0 * (w - a);
            (wp - 1.0).powi(2)
        };
        let h = 1e-5;
        let numeric = (f(a + h) - f(a - h)) / (2.0 * h);
        let (_, g) = hypergradient(
            &Quadratic,
            &s(w as f32),
            &s(a as f32),
            mu as f32,
            Order::Exact,
        )
        .unwrap();
        assert!((g[0].item() as f64 - numeric).abs() < 1e-5);
    }

    #[test]
    fn zero_mu_reduces_to_first_order() {
        for order in [Order::Exact, Order::Second] {
            let (_, g2) = hypergradient(&Quadratic, &s(0.7), &s(0.1), 0.0, order).unwrap();
            let (_, g1) = hypergradient(&Quadratic, &s(0.7), &s(0.1), 0.0, Order::First).unwrap();
            assert!((g2[0].item() - g1[0].item()).abs() < 1e-6);
        }
    }

    #[test]
    fn plain_alpha_step_and_independent_loss() {
        struct Linear;
        impl BilevelObjective for Linear {
            fn loss_w<'t>(&self, _: &'t Tape, w: &[Var<'t>], _: &[Var<'t>]) -> Result<Var<'t>> {
                w[0].mul(w[0])
            }
            fn loss_alpha<'t>(&self, _: &'t Tape, w: &[Var<'t>], a: &[Var<'t>]) -> Result<Var<'t>> {
                w[0].add(a[0])
            }
        }
        let mut alpha = s(0.5);
        let mut opt = AlphaOptimizer::new(&AlphaOptConfig::Sgd { lr: 0.1 });
        step_alpha(
            &Linear,
            &s(1.0),
            &mut alpha,
            &mut opt,
            0.0,
            0.1,
            Order::First,
        )
        .unwrap();
        assert!((alpha[0].item() - 0.4).abs() < 1e-7);
        // α does not enter L_α here
        let mut alpha = s(0.5);
        step_alpha(
            &Quadratic,
            &s(1.0),
            &mut alpha,
            &mut opt,
            0.0,
            0.1,
            Order::First,
        )
        .unwrap();
        assert_eq!(alpha[0].item(), 0.5);
    }

    #[test]
    fn finite_diff_warns_on_zero_norm() {
        // w = 1 makes ∇_{w'}L_α vanish when µ·∇_w L_w = 0
        let (_, g) = hypergradient(&Quadratic, &s(1.0), &s(1.0), 0.5, Order::Second).unwrap();
        assert_eq!(g[0].item(), 0.0);
    }

    #[test]
    fn step_w_descends() {
        let mut w = s(0.0);
        let mut opt = Sgd::new(SgdConfig::plain(0.1));
        for _ in 0..200 {
            step_w(&Quadratic, &mut w, &s(3.0), &mut opt, 0.1).unwrap();
        }
        assert!((w[0].item() - 3.0).abs() < 1e-3);
    }
}
