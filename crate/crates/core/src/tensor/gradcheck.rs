//! Central finite-difference gradient checking.

use super::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest `|analytic - numeric| / (atol + rtol * max(|a|, |n|))`.
    /// The check passes when this is at most 1.
    pub worst_ratio: f64,
    /// `(input index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

/// Compares backpropagated gradients of the scalar `loss()` with central
/// differences `(f(x+h) - f(x-h)) / 2h` for every element of every input.
///
/// `loss` must rebuild its graph on each call and must be deterministic.
pub fn check_gradients<F: Scalar>(
    inputs: &[Tensor<F>],
    loss: impl Fn() -> Tensor<F>,
    step: f64,
    rtol: f64,
    atol: f64,
) -> GradCheckReport {
    for t in inputs {
        t.zero_grad();
    }
    loss().backward().expect("scalar loss");
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| match t.grad() {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        worst_ratio: 0.0,
        worst: None,
    };
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.data_mut()[i] = F::from_f64(orig.as_f64() + step);
            let up = loss().item().as_f64();
            t.data_mut()[i] = F::from_f64(orig.as_f64() - step);
            let down = loss().item().as_f64();
            t.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti][i];
            let ratio = (a - numeric).abs() / (atol + rtol * a.abs().max(numeric.abs()));
            report.checked += 1;
            if ratio > report.worst_ratio || report.worst.is_none() {
                report.worst_ratio = ratio;
                report.worst = Some((ti, i, a, numeric));
            }
        }
    }
    for t in inputs {
        t.zero_grad();
    }
    report
}
