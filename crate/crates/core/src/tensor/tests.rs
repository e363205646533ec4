use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct six-loop convolution.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f64; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                let xv =
                                    x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oi * c + ci) * k + ky) * k + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, o, oh, ow], out.into_iter().map(|v| v as f32).collect()).unwrap()
}

/// 3×3 stride-1 pad-1 sliding window.
fn naive_pool(x: &Tensor, max: bool) -> Tensor {
    let (p, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = vec![0.0; x.numel()];
    for pi in 0..p {
        for y in 0..h as isize {
            for xi in 0..w as isize {
                let mut vals = Vec::new();
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, xi + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            vals.push(x.data()[(pi * h + yy as usize) * w + xx as usize]);
                        }
                    }
                }
                out[(pi * h + y as usize) * w + xi as usize] = if max {
                    vals.iter().copied().fold(f32::NEG_INFINITY, f32::max)
                } else {
                    vals.iter().sum::<f32>() / vals.len() as f32
                };
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k)
                .map(|t| a.data()[i * k + t] * b.data()[t * n + j])
                .sum();
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

fn eval1(x: &Tensor, f: impl for<'t> Fn(Var<'t>) -> crate::Result<Var<'t>>) -> Tensor {
    let tape = Tape::new();
    f(tape.constant(x.clone())).unwrap().value()
}

/// Uniform values bounded away from zero, for checks across kinks.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.05, 1.0, &mut rng(seed))
        .zip_map(
            &Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed + 1)),
            |m, s| m * s.signum(),
        )
        .unwrap()
}

#[test]
fn conv_scalar_and_identity() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
    assert_eq!(x.conv2d(w, 1, 0).unwrap().value().item(), 6.0);

    let input = Tensor::randn(&[2, 1, 5, 5], 1.0, &mut rng(1));
    let out = eval1(&input, |x| {
        let id = x.tape().constant(Tensor::ones(&[1, 1, 1, 1]));
        x.conv2d(id, 1, 0)
    });
    assert_eq!(out, input);
}

#[test]
fn conv_matches_naive_loops() {
    let mut r = rng(2);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
    let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
    let tape = Tape::new();
    let got = tape
        .constant(x.clone())
        .conv2d(tape.constant(w.clone()), 1, 1)
        .unwrap()
        .value();
    assert_eq!(got.shape(), &[2, 4, 8, 8]);
    assert!(got.max_abs_diff(&naive_conv(&x, &w, 1, 1)) < 1e-5);

    for (k, stride, pad) in [(5, 1, 2), (1, 1, 0), (3, 2, 0), (3, 2, 1)] {
        let w = Tensor::randn(&[2, 3, k, k], 1.0, &mut r);
        let got = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), stride, pad)
            .unwrap()
            .value();
        let expected = naive_conv(&x, &w, stride, pad);
        assert_eq!(got.shape(), expected.shape());
        assert!(
            got.max_abs_diff(&expected) < 1e-5,
            "k={k} s={stride} p={pad}"
        );
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(x.conv2d(w, 1, 1), Err(crate::Error::Shape(_))));
    assert!(x
        .conv2d(tape.constant(Tensor::zeros(&[1, 2, 3, 3])), 0, 1)
        .is_err());
}

#[test]
fn pools_match_naive_windows() {
    let x = Tensor::randn(&[2, 3, 5, 6], 1.0, &mut rng(3));
    let avg = eval1(&x, |v| v.avg_pool2d(3, 1, 1));
    let max = eval1(&x, |v| v.max_pool2d(3, 1, 1));
    assert_eq!(avg.shape(), x.shape());
    assert!(avg.max_abs_diff(&naive_pool(&x, false)) < 1e-6);
    assert!(max.max_abs_diff(&naive_pool(&x, true)) < 1e-6);

    let c = Tensor::full(&[1, 2, 4, 4], 1.5);
    assert!(eval1(&c, |v| v.avg_pool2d(3, 1, 1))
        .data()
        .iter()
        .all(|&v| (v - 1.5).abs() < 1e-6));
    assert!(eval1(&c, |v| v.max_pool2d(3, 1, 1))
        .data()
        .iter()
        .all(|&v| v == 1.5));

    let ramp = Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
    assert_eq!(eval1(&ramp, |v| v.max_pool2d(3, 1, 1)).data()[4], 9.0);
}

#[test]
fn leaky_relu_values_and_slope() {
    let x = Tensor::new(&[2], vec![5.0, -10.0]).unwrap();
    assert_eq!(eval1(&x, |v| v.leaky_relu(0.1)).data(), &[5.0, -1.0]);

    let tape = Tape::new();
    let v = tape.leaf(Tensor::scalar(-2.0));
    let g = tape.grad(v.leaky_relu(0.1).unwrap(), &[v]).unwrap();
    assert!((g[0].item() - 0.1).abs() < 1e-7);
    let report = grad_check(
        |_, v| v[0].leaky_relu(0.1),
        &[Tensor::scalar(-2.0)],
        1e-2,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn linear_special_cases_and_naive_matmul() {
    let mut r = rng(4);
    let x = Tensor::randn(&[4, 6], 1.0, &mut r);
    let eye = Tensor::new(
        &[6, 6],
        (0..36)
            .map(|i| if i % 7 == 0 { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = xv
        .linear(tape.constant(eye), tape.constant(Tensor::zeros(&[6])))
        .unwrap()
        .value();
    assert_eq!(out, x);

    let b = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let out = xv
        .linear(
            tape.constant(Tensor::zeros(&[6, 3])),
            tape.constant(b.clone()),
        )
        .unwrap()
        .value();
    for row in out.data().chunks(3) {
        assert_eq!(row, b.data());
    }

    let w = Tensor::randn(&[6, 3], 1.0, &mut r);
    let got = xv.matmul(tape.constant(w.clone())).unwrap().value();
    assert!(got.max_abs_diff(&naive_matmul(&x, &w)) < 1e-5);
    assert!(xv.matmul(tape.constant(Tensor::zeros(&[5, 3]))).is_err());
}

#[test]
fn softmax_closed_forms() {
    let uniform = eval1(&Tensor::zeros(&[4]), |v| v.softmax());
    assert!(uniform.data().iter().all(|&p| (p - 0.25).abs() < 1e-7));

    let two = eval1(&Tensor::new(&[2], vec![0.0, 3f32.ln()]).unwrap(), |v| {
        v.softmax()
    });
    assert!((two.data()[0] - 0.25).abs() < 1e-6 && (two.data()[1] - 0.75).abs() < 1e-6);

    let base = Tensor::new(&[2, 3], vec![0.0, 1.5, -2.0, 3.0, 3.0, 0.1]).unwrap();
    let shifted = base.map(|v| v + 40.0);
    let (a, b) = (
        eval1(&base, |v| v.softmax()),
        eval1(&shifted, |v| v.softmax()),
    );
    assert!(a.max_abs_diff(&b) < 1e-7);
}

#[test]
fn global_pool_shape_and_mean() {
    let x = Tensor::randn(&[3, 5, 4, 4], 1.0, &mut rng(5));
    let out = eval1(&x, |v| v.global_avg_pool());
    assert_eq!(out.shape(), &[3, 5]);
    for (i, plane) in x.data().chunks(16).enumerate() {
        let mean: f32 = plane.iter().sum::<f32>() / 16.0;
        assert!((out.data()[i] - mean).abs() < 1e-6);
    }
    let c = eval1(&Tensor::full(&[2, 2, 3, 3], 0.7), |v| v.global_avg_pool());
    assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
}

#[test]
fn batch_norm_moments_and_modes() {
    let x = Tensor::randn(&[6, 3, 4, 4], 2.0, &mut rng(6)).map(|v| v + 1.0);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (one, zero) = (
        tape.constant(Tensor::ones(&[3])),
        tape.constant(Tensor::zeros(&[3])),
    );
    let (y, stats) = xv.batch_norm_train(one, zero, 1e-5).unwrap();
    let y = y.value();
    for c in 0..3 {
        let vals: Vec<f32> = (0..6)
            .flat_map(|b| y.data()[(b * 3 + c) * 16..(b * 3 + c + 1) * 16].to_vec())
            .collect();
        let mean = vals.iter().sum::<f32>() / vals.len() as f32;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }

    let eval = xv
        .batch_norm_eval(one, zero, &stats.mean, &stats.var, 1e-5)
        .unwrap()
        .value();
    assert!(eval.max_abs_diff(&y) < 1e-5);

    let beta = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let (z, _) = xv
        .batch_norm_train(
            tape.constant(Tensor::zeros(&[3])),
            tape.constant(beta.clone()),
            1e-5,
        )
        .unwrap();
    for (i, plane) in z.value().data().chunks(16).enumerate() {
        assert!(plane.iter().all(|&v| v == beta.data()[i % 3]));
    }

    let empty = tape.constant(Tensor::zeros(&[0, 3, 4, 4]));
    assert!(matches!(
        empty.batch_norm_train(one, zero, 1e-5),
        Err(crate::Error::Precondition(_))
    ));
}

#[test]
fn backward_basics() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
    let y = tape.leaf(Tensor::scalar(2.0));
    let loss = x.sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert_eq!(grads.get(y).unwrap().data(), &[0.0]);

    // repeated backward on the same tape returns identical gradients
    let again = tape.backward(loss).unwrap();
    assert_eq!(again.get(x), grads.get(x));

    assert!(matches!(tape.backward(x), Err(crate::Error::NotScalar(_))));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(c), Err(crate::Error::Detached)));
}

#[test]
fn two_linear_layers_match_hand_chain_rule() {
    // loss = sum((x W1) W2) ; dL/dW2 = (x W1)^T 1 ; dL/dW1 = x^T (1 W2^T)
    let mut r = rng(7);
    let x = Tensor::randn(&[2, 3], 1.0, &mut r);
    let w1 = Tensor::randn(&[3, 4], 1.0, &mut r);
    let w2 = Tensor::randn(&[4, 2], 1.0, &mut r);
    let tape = Tape::new();
    let (xv, a, b) = (
        tape.constant(x.clone()),
        tape.leaf(w1.clone()),
        tape.leaf(w2.clone()),
    );
    let loss = xv.matmul(a).unwrap().matmul(b).unwrap().sum().unwrap();
    let g = tape.grad(loss, &[a, b]).unwrap();

    let h = naive_matmul(&x, &w1);
    let mut dw2 = vec![0.0; 8];
    for j in 0..4 {
        for k in 0..2 {
            dw2[j * 2 + k] = (0..2).map(|i| h.data()[i * 4 + j]).sum();
        }
    }
    let row_w2: Vec<f32> = (0..4)
        .map(|j| w2.data()[j * 2] + w2.data()[j * 2 + 1])
        .collect();
    let mut dw1 = vec![0.0; 12];
    for i in 0..3 {
        for j in 0..4 {
            dw1[i * 4 + j] = (0..2).map(|n| x.data()[n * 3 + i]).sum::<f32>() * row_w2[j];
        }
    }
    assert!(g[0].max_abs_diff(&Tensor::new(&[3, 4], dw1).unwrap()) < 1e-5);
    assert!(g[1].max_abs_diff(&Tensor::new(&[4, 2], dw2).unwrap()) < 1e-5);
}

#[test]
fn grad_check_primitives() {
    let mut r = rng(8);
    let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut r);
    let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut r);
    let rep = grad_check(|_, v| v[0].conv2d(v[1], 1, 1), &[x.clone(), w], 1e-2, 1).unwrap();
    assert!(rep.passed(1e-3) && rep.skipped == 0, "{rep:?}");

    let a = Tensor::randn(&[4, 6], 1.0, &mut r);
    let b = Tensor::randn(&[6, 3], 1.0, &mut r);
    let bias = Tensor::randn(&[3], 1.0, &mut r);
    let rep = grad_check(|_, v| v[0].linear(v[1], v[2]), &[a, b, bias], 1e-2, 2).unwrap();
    assert!(rep.passed(1e-3) && rep.skipped == 0, "{rep:?}");

    let rep = grad_check(
        |_, v| v[0].avg_pool2d(3, 1, 1),
        std::slice::from_ref(&x),
        1e-2,
        3,
    )
    .unwrap();
    assert!(rep.passed(1e-3), "{rep:?}");

    let rep = grad_check(
        |_, v| v[0].softmax(),
        &[Tensor::randn(&[3, 5], 1.0, &mut r)],
        1e-2,
        4,
    )
    .unwrap();
    assert!(rep.passed(1e-3) && rep.skipped == 0, "{rep:?}");
}

#[test]
fn grad_check_flags_max_pool_ties() {
    let tied = Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, -1.0]).unwrap();
    let rep = grad_check(|_, v| v[0].max_pool2d(2, 2, 0), &[tied], 1e-2, 5).unwrap();
    assert!(rep.skipped > 0);
    assert!(rep.passed(1e-3), "{rep:?}");
}

#[test]
fn double_backward_through_gradient() {
    // f(w, a) = (w a)^2 ; df/dw = 2 w a^2 ; d/da (df/dw) = 4 w a
    let tape = Tape::new();
    let w = tape.leaf(Tensor::scalar(1.5));
    let a = tape.leaf(Tensor::scalar(-0.5));
    let f = w.mul(a).unwrap().powf(2.0).unwrap();
    let gw = tape.grad_graph(f, &[w]).unwrap()[0];
    assert!((gw.value().item() - 2.0 * 1.5 * 0.25).abs() < 1e-6);
    let g2 = tape.grad(gw, &[a]).unwrap();
    assert!((g2[0].item() - 4.0 * 1.5 * -0.5).abs() < 1e-6);
}

/// Scalar loss exercising every primitive that sits on the virtual-step path.
/// Smooth scalar loss over the primitives on the virtual-step path. Max-pool
/// and leaky-relu are left out: their gradients jump, so differenced
/// gradients are not a valid oracle for them.
fn composite_loss<'t>(tape: &'t Tape, x: Var<'t>, w: Var<'t>) -> crate::Result<Var<'t>> {
    let c = w.shape()[0];
    let y = x.conv2d(w, 1, 1)?;
    let (gamma, beta) = (
        tape.constant(Tensor::ones(&[c])),
        tape.constant(Tensor::zeros(&[c])),
    );
    let (y, _) = y.batch_norm_train(gamma, beta, 1e-5)?;
    let y = y.avg_pool2d(3, 1, 1)?.add(y)?.exp()?;
    let emb = y.global_avg_pool()?;
    let gram = emb
        .matmul(emb.t()?)?
        .add(tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?))?;
    let targets = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?);
    let coef = emb.t()?.matmul(gram.solve(targets)?)?;
    emb.matmul(coef)?.scale(3.0)?.cross_entropy(&[0, 1])
}

#[test]
fn hessian_vector_product_matches_differenced_gradients() {
    let mut r = rng(9);
    let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut r);
    let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
    let v = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);

    let tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.leaf(w.clone()));
    let loss = composite_loss(&tape, xv, wv).unwrap();
    let g = tape.grad_graph(loss, &[wv]).unwrap()[0];
    let hvp = tape
        .grad(g.mul_const(&v).unwrap().sum().unwrap(), &[wv])
        .unwrap()
        .remove(0);

    let grad_at = |eps: f32| {
        let shifted = w.zip_map(&v, |a, b| a + eps * b).unwrap();
        let tape = Tape::new();
        let wv = tape.leaf(shifted);
        let loss = composite_loss(&tape, tape.constant(x.clone()), wv).unwrap();
        tape.grad(loss, &[wv]).unwrap().remove(0)
    };
    let eps = 1e-2;
    let numeric = grad_at(eps)
        .zip_map(&grad_at(-eps), |a, b| (a - b) / (2.0 * eps))
        .unwrap();
    let scale = hvp.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    assert!(scale > 1e-4);
    assert!(
        hvp.max_abs_diff(&numeric) / scale < 1e-2,
        "{} vs scale {}",
        hvp.max_abs_diff(&numeric),
        scale
    );
}

#[test]
fn solve_values() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::new(&[2, 2], vec![3.0, 1.0, 1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let x = a.solve(b).unwrap().value();
    assert!((x.data()[0] - 0.2).abs() < 1e-6 && (x.data()[1] - 0.4).abs() < 1e-6);
    let rep = grad_check(
        |_, v| v[0].solve(v[1]),
        &[
            Tensor::new(&[2, 2], vec![3.0, 1.0, 0.5, 2.0]).unwrap(),
            Tensor::new(&[2, 2], vec![1.0, -1.0, 0.3, 2.0]).unwrap(),
        ],
        1e-2,
        12,
    )
    .unwrap();
    assert!(rep.passed(1e-3), "{rep:?}");
}

#[test]
fn gather_scatter_are_adjoint() {
    let idx = Arc::new(vec![2, 0, 2]);
    let rep = grad_check(
        move |_, v| v[0].gather(Arc::clone(&idx), &[3]),
        &[Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()],
        1e-2,
        7,
    )
    .unwrap();
    assert!(rep.passed(1e-4));
}

#[test]
fn forward_is_deterministic() {
    let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng(10));
    let w = Tensor::randn(&[3, 3, 3, 3], 1.0, &mut rng(11));
    let run = || {
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), 1, 1)
            .unwrap();
        y.max_pool2d(3, 1, 1).unwrap().softmax().unwrap().value()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_results_are_errors() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(z.ln(), Err(crate::Error::Numeric(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        logits in proptest::collection::vec(-20.0f32..20.0, 1..9),
        shift in -50.0f32..50.0,
    ) {
        let k = logits.len();
        let t = Tensor::new(&[1, k], logits).unwrap();
        let p = eval1(&t, |v| v.softmax());
        let total: f32 = p.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        let q = eval1(&t.map(|v| v + shift), |v| v.softmax());
        prop_assert!(p.max_abs_diff(&q) < 1e-6);
    }

    #[test]
    fn leaky_relu_grad_check_at_random_points(seed in 0u64..1000) {
        let x = away_from_zero(&[3, 4], seed);
        let rep = grad_check(|_, v| v[0].leaky_relu(0.1), &[x], 1e-2, seed).unwrap();
        prop_assert!(rep.passed(1e-3));
    }
}
