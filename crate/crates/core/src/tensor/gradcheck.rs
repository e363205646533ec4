use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over inputs of `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, 1e-6)`.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub checked: usize,
    /// Elements where left and right difference quotients disagree
    /// (the function has a kink within `eps`), excluded from the error.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Check the gradients of `f` at `inputs`.
///
/// The output is projected onto a fixed random direction `r`; the analytic
/// side is the tape's vector-Jacobian product with `r`, the numeric side
/// is the central difference of `<r, f(x)>` accumulated in f64.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f32, seed: u64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let proj = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut rng);
    let loss = out.mul_const(&proj)?.sum()?;
    let analytic = tape.grad(loss, &vars)?;

    let project = |args: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = args.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?.value();
        Ok(out
            .data()
            .iter()
            .zip(proj.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };
    let base = project(inputs)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let (mut checked, mut skipped) = (0, 0);
    for (which, input) in inputs.iter().enumerate() {
        let scale = analytic[which]
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs() as f64));
        let mut max_diff = 0.0f64;
        let mut max_num = 0.0f64;
        let mut max_ana = 0.0f64;
        for j in 0..input.numel() {
            let x = input.data()[j];
            let (xp, xm) = (x + eps, x - eps);
            let mut args = inputs.to_vec();
            args[which].data_mut()[j] = xp;
            let fp = project(&args)?;
            args[which].data_mut()[j] = xm;
            let fm = project(&args)?;

            let right = (fp - base) / (xp - x) as f64;
            let left = (base - fm) / (x - xm) as f64;
            let kink =
                (right - left).abs() > 0.25 * (right.abs() + left.abs()) + 1e-2 * scale.max(1e-3);
            if kink {
                skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (fp - fm) / (xp - xm) as f64;
            let a = analytic[which].data()[j] as f64;
            max_diff = max_diff.max((a - numeric).abs());
            max_num = max_num.max(numeric.abs());
            max_ana = max_ana.max(a.abs());
        }
        per_input.push(max_diff / max_ana.max(max_num).max(1e-6));
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
        checked,
        skipped,
    })
}
