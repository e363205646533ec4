//! Gumbel-relaxed op sampling for the stochastic variant.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::argmax;
use crate::tensor::{Tensor, Var};

pub const PROB_FLOOR: f32 = 1e-20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GumbelConfig {
    pub temperature: f32,
    /// Multiplicative decay per epoch; `None` keeps τ constant.
    pub decay: Option<f32>,
    pub floor: f32,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            temperature: 1.0,
            decay: None,
            floor: 0.1,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.floor > 0.0)
            || self.decay.is_some_and(|d| !(d > 0.0 && d <= 1.0))
        {
            return Err(Error::Config(format!("invalid gumbel settings {self:?}")));
        }
        Ok(())
    }

    pub fn temperature_at(&self, epoch: usize) -> f32 {
        match self.decay {
            Some(d) => {
                (self.temperature * d.powi(epoch as i32)).max(self.floor.min(self.temperature))
            }
            None => self.temperature,
        }
    }
}

/// `k` i.i.d. standard Gumbel draws.
pub fn gumbel_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Tensor {
    let g = Gumbel::new(0.0f32, 1.0).expect("unit scale");
    Tensor::new(&[k], (0..k).map(|_| g.sample(rng)).collect()).expect("length k")
}

/// z = softmax((log p + g)/τ), differentiable in `probs`.
pub fn gumbel_relax<'t>(probs: Var<'t>, noise: &Tensor, temperature: f32) -> Result<Var<'t>> {
    if temperature <= 0.0 {
        return Err(Error::Precondition(format!(
            "gumbel temperature must be positive, got {temperature}"
        )));
    }
    let floor = Tensor::full(&probs.shape(), PROB_FLOOR);
    // clamp from below without cutting the gradient for ordinary entries
    let clamp = probs
        .value()
        .zip_map(&floor, |p, f| if p < f { f - p } else { 0.0 })?;
    let p = probs.add(probs.tape().constant(clamp))?;
    p.ln()?
        .add(probs.tape().constant(noise.clone()))?
        .scale(1.0 / temperature)?
        .softmax()
}

/// Plain-value draw of z for a probability vector.
pub fn gumbel_sample<R: Rng + ?Sized>(
    probs: &[f32],
    temperature: f32,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let tape = crate::tensor::Tape::new();
    let p = tape.constant(Tensor::new(&[probs.len()], probs.to_vec())?);
    let noise = gumbel_noise(probs.len(), rng);
    Ok(gumbel_relax(p, &noise, temperature)?.value().into_vec())
}

/// One-hot on the most probable op, lowest index on ties.
pub fn test_time_select(probs: &[f32]) -> Vec<f32> {
    let best = argmax(probs);
    (0..probs.len())
        .map(|o| if o == best { 1.0 } else { 0.0 })
        .collect()
}
