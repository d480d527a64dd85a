//! Finite-difference gradient verification.
//!
//! The checker re-evaluates a forward expression at perturbed inputs and
//! compares central differences against the gradients produced by
//! [`Tensor::backward`]. It exercises the forward path only, so it stays an
//! independent oracle for the backward implementation.
//!
//! Checks run at `f64`; central differences with step `1e-5` leave plenty of
//! headroom under the `1e-4` relative-error budget.

use super::Tensor;

/// Result of a gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, coordinate)` of the worst component.
    pub worst: (usize, usize),
}

/// Relative error with a small floor so near-zero gradient pairs compare
/// on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compare analytic gradients of `build` against central finite differences
/// on every coordinate of every input.
///
/// `build` must construct a scalar expression from leaf tensors created from
/// the given `(data, shape)` pairs.
pub fn check_gradients<B>(build: &B, inputs: &[(Vec<f64>, Vec<usize>)], eps: f64) -> GradCheckReport
where
    B: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, (data, _))| (0..data.len()).map(move |j| (i, j)))
        .collect();
    check_gradient_coords(build, inputs, eps, &coords)
}

/// Like [`check_gradients`] but only on the listed coordinates — for models
/// too large to probe exhaustively.
pub fn check_gradient_coords<B>(
    build: &B,
    inputs: &[(Vec<f64>, Vec<usize>)],
    eps: f64,
    coords: &[(usize, usize)],
) -> GradCheckReport
where
    B: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(data, shape)| Tensor::param(data.clone(), shape))
        .collect();
    let loss = build(&params);
    loss.backward();
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();

    let eval = |data: &[(Vec<f64>, Vec<usize>)]| -> f64 {
        let leaves: Vec<Tensor<f64>> =
            data.iter().map(|(d, s)| Tensor::from_vec(d.clone(), s)).collect();
        build(&leaves).item()
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0) };
    let mut perturbed = inputs.to_vec();
    for &(i, j) in coords {
        let original = perturbed[i].0[j];
        perturbed[i].0[j] = original + eps;
        let plus = eval(&perturbed);
        perturbed[i].0[j] = original - eps;
        let minus = eval(&perturbed);
        perturbed[i].0[j] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let err = rel_err(analytic[i][j], numeric);
        if err > report.max_rel_err {
            report = GradCheckReport { max_rel_err: err, worst: (i, j) };
        }
    }
    report
}
