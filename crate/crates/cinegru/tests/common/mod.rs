//! Shared helpers for the integration test suites: randomized
//! finite-difference trials over every differentiable operation, and the
//! block-matching displacement oracle for generated series.

#![allow(dead_code)]

pub mod blockmatch;

use cinegru::rng::stream;
use cinegru::tensor::gradcheck::{check_gradients, GradCheckReport};
use cinegru::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

/// Uniform values in `(-1, 1)` bounded away from zero, so operations with a
/// kink at the origin (relu) see no sign flips under the probe step.
fn smooth_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Values with pairwise distance ≥ 0.01, so max-pooling argmaxes cannot be
/// toggled by the probe step.
fn separated_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order.into_iter().map(|k| k as f64 * 0.0137 + rng.gen_range(-0.001..0.001)).collect()
}

/// Every gradient-checked operation, by name.
pub const CHECKED_OPS: &[&str] = &[
    "conv2d",
    "conv2d_strided",
    "relu",
    "sigmoid",
    "tanh",
    "add",
    "sub",
    "mul",
    "affine",
    "linear",
    "concat_channels",
    "slice_batch",
    "maxpool2d",
    "global_avg_pool",
    "batchnorm2d_train",
    "batchnorm2d_eval",
    "bce_loss",
    "mean",
];

/// One randomized finite-difference trial for `op`; returns the worst
/// relative error observed.
pub fn gradcheck_trial(op: &str, seed: u64) -> GradCheckReport {
    let mut rng = stream(seed, &format!("gradcheck.{op}"));
    let n = rng.gen_range(1..3usize);
    let c = rng.gen_range(1..4usize);
    let h = rng.gen_range(3..7usize);
    let w = rng.gen_range(3..7usize);
    let image = [n, c, h, w];
    let image_numel = n * c * h * w;

    match op {
        "conv2d" | "conv2d_strided" => {
            let cout = rng.gen_range(1..4usize);
            let k = rng.gen_range(1..4usize).min(h).min(w);
            let (stride, pad) = if op == "conv2d_strided" {
                (rng.gen_range(1..3usize), rng.gen_range(0..2usize))
            } else {
                (1, rng.gen_range(0..2usize))
            };
            let inputs = vec![
                (smooth_values(&mut rng, image_numel), image.to_vec()),
                (smooth_values(&mut rng, cout * c * k * k), vec![cout, c, k, k]),
                (smooth_values(&mut rng, cout), vec![cout]),
            ];
            check_gradients(
                &move |p: &[Tensor<f64>]| p[0].conv2d(&p[1], Some(&p[2]), stride, pad).sum(),
                &inputs,
                FD_EPS,
            )
        }
        "relu" => {
            let inputs = vec![(smooth_values(&mut rng, image_numel), image.to_vec())];
            check_gradients(&|p: &[Tensor<f64>]| p[0].relu().mul(&p[0]).sum(), &inputs, FD_EPS)
        }
        "sigmoid" => {
            let inputs = vec![(smooth_values(&mut rng, image_numel), image.to_vec())];
            check_gradients(&|p: &[Tensor<f64>]| p[0].sigmoid().sum(), &inputs, FD_EPS)
        }
        "tanh" => {
            let inputs = vec![(smooth_values(&mut rng, image_numel), image.to_vec())];
            check_gradients(&|p: &[Tensor<f64>]| p[0].tanh_act().sum(), &inputs, FD_EPS)
        }
        "add" | "sub" | "mul" => {
            let inputs = vec![
                (smooth_values(&mut rng, image_numel), image.to_vec()),
                (smooth_values(&mut rng, image_numel), image.to_vec()),
            ];
            let name = op.to_string();
            check_gradients(
                &move |p: &[Tensor<f64>]| {
                    let y = match name.as_str() {
                        "add" => p[0].add(&p[1]),
                        "sub" => p[0].sub(&p[1]),
                        _ => p[0].mul(&p[1]),
                    };
                    // Compose with tanh so the loss is non-linear in both operands.
                    y.tanh_act().sum()
                },
                &inputs,
                FD_EPS,
            )
        }
        "affine" => {
            let inputs = vec![(smooth_values(&mut rng, image_numel), image.to_vec())];
            check_gradients(
                &|p: &[Tensor<f64>]| p[0].affine(-1.7, 0.3).tanh_act().sum(),
                &inputs,
                FD_EPS,
            )
        }
        "linear" => {
            let cin = rng.gen_range(2..5usize);
            let cout = rng.gen_range(1..4usize);
            let rows = rng.gen_range(1..4usize);
            let inputs = vec![
                (smooth_values(&mut rng, rows * cin), vec![rows, cin]),
                (smooth_values(&mut rng, cout * cin), vec![cout, cin]),
                (smooth_values(&mut rng, cout), vec![cout]),
            ];
            check_gradients(
                &|p: &[Tensor<f64>]| p[0].linear(&p[1], Some(&p[2])).tanh_act().sum(),
                &inputs,
                FD_EPS,
            )
        }
        "concat_channels" => {
            let c2 = rng.gen_range(1..4usize);
            let inputs = vec![
                (smooth_values(&mut rng, image_numel), image.to_vec()),
                (smooth_values(&mut rng, n * c2 * h * w), vec![n, c2, h, w]),
            ];
            check_gradients(
                &|p: &[Tensor<f64>]| p[0].concat_channels(&p[1]).tanh_act().sum(),
                &inputs,
                FD_EPS,
            )
        }
        "slice_batch" => {
            let batch = rng.gen_range(2..5usize);
            let index = rng.gen_range(0..batch);
            let inputs = vec![(smooth_values(&mut rng, batch * c * h * w), vec![batch, c, h, w])];
            check_gradients(
                &move |p: &[Tensor<f64>]| p[0].slice_batch(index).tanh_act().sum(),
                &inputs,
                FD_EPS,
            )
        }
        "maxpool2d" => {
            let inputs = vec![(separated_values(&mut rng, image_numel), image.to_vec())];
            check_gradients(
                &|p: &[Tensor<f64>]| p[0].maxpool2d(2, 2, 1).tanh_act().sum(),
                &inputs,
                FD_EPS,
            )
        }
        "global_avg_pool" => {
            let inputs = vec![(smooth_values(&mut rng, image_numel), image.to_vec())];
            check_gradients(
                &|p: &[Tensor<f64>]| p[0].global_avg_pool().tanh_act().sum(),
                &inputs,
                FD_EPS,
            )
        }
        "batchnorm2d_train" => {
            // Two samples minimum so the batch variance is informative.
            let shape = vec![2, c, h, w];
            let inputs = vec![
                (smooth_values(&mut rng, 2 * c * h * w), shape.clone()),
                (smooth_values(&mut rng, c), vec![c]),
                (smooth_values(&mut rng, c), vec![c]),
            ];
            check_gradients(
                &|p: &[Tensor<f64>]| {
                    let (y, _, _) = p[0].batchnorm2d_train(&p[1], &p[2], 1e-5);
                    y.tanh_act().sum()
                },
                &inputs,
                FD_EPS,
            )
        }
        "batchnorm2d_eval" => {
            let rmean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let rvar: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
            let inputs = vec![
                (smooth_values(&mut rng, image_numel), image.to_vec()),
                (smooth_values(&mut rng, c), vec![c]),
                (smooth_values(&mut rng, c), vec![c]),
            ];
            check_gradients(
                &move |p: &[Tensor<f64>]| {
                    p[0].batchnorm2d_eval(&p[1], &p[2], &rmean, &rvar, 1e-5).tanh_act().sum()
                },
                &inputs,
                FD_EPS,
            )
        }
        "bce_loss" => {
            let count = rng.gen_range(2..8usize);
            let preds: Vec<f64> = (0..count).map(|_| rng.gen_range(0.05..0.95)).collect();
            let targets: Vec<f64> = (0..count).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let inputs = vec![(preds, vec![count])];
            check_gradients(
                &move |p: &[Tensor<f64>]| p[0].bce_loss(&targets),
                &inputs,
                FD_EPS,
            )
        }
        "mean" => {
            let inputs = vec![(smooth_values(&mut rng, image_numel), image.to_vec())];
            check_gradients(&|p: &[Tensor<f64>]| p[0].mul(&p[0]).mean(), &inputs, FD_EPS)
        }
        other => panic!("unknown op {other}"),
    }
}

/// Run `trials` randomized finite-difference trials cycling over every
/// checked operation; returns the worst relative error seen.
pub fn op_gradcheck_suite(base_seed: u64, trials: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let op = CHECKED_OPS[trial % CHECKED_OPS.len()];
        let report = gradcheck_trial(op, base_seed.wrapping_add(trial as u64));
        if report.max_rel_err > worst {
            worst = report.max_rel_err;
        }
        assert!(
            report.max_rel_err < 1e-4,
            "{op} trial {trial}: rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
    worst
}
