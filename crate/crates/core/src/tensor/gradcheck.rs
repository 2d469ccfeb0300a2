//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward closure, so it stays
//! independent of the tape's backward rules.

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(tensor, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference estimate of `d loss / d params[t][i]`.
pub fn numeric_partial(params: &[Vec<f64>], t: usize, i: usize, step: f64, loss: &impl Fn(&[Vec<f64>]) -> f64) -> f64 {
    let mut p = params.to_vec();
    let orig = p[t][i];
    p[t][i] = orig + step;
    let up = loss(&p);
    p[t][i] = orig - step;
    let down = loss(&p);
    (up - down) / (2.0 * step)
}

/// Compares `analytic(params)` with central differences of `loss` on every
/// element of every tensor.
pub fn check_gradients(
    params: &[Vec<f64>],
    loss: impl Fn(&[Vec<f64>]) -> f64,
    analytic: impl Fn(&[Vec<f64>]) -> Vec<Vec<f64>>,
    step: f64,
) -> GradCheck {
    check_gradients_sampled(params, loss, analytic, step, usize::MAX)
}

/// Like [`check_gradients`] but checks at most `per_tensor` evenly spaced
/// elements of each tensor.
pub fn check_gradients_sampled(
    params: &[Vec<f64>],
    loss: impl Fn(&[Vec<f64>]) -> f64,
    analytic: impl Fn(&[Vec<f64>]) -> Vec<Vec<f64>>,
    step: f64,
    per_tensor: usize,
) -> GradCheck {
    let grads = analytic(params);
    assert_eq!(grads.len(), params.len(), "one gradient per parameter tensor");
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (t, p) in params.iter().enumerate() {
        assert_eq!(grads[t].len(), p.len(), "gradient shape for tensor {t}");
        let stride = p.len().div_ceil(per_tensor.max(1)).max(1);
        for i in (0..p.len()).step_by(stride) {
            let num = numeric_partial(params, t, i, step, &loss);
            let err = relative_error(grads[t][i], num);
            report.checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (t, i);
                report.analytic = grads[t][i];
                report.numeric = num;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let params = vec![vec![1.0, -2.0, 0.5]];
        let r = check_gradients(
            &params,
            |p| p[0].iter().map(|x| x * x).sum(),
            |p| vec![p[0].iter().map(|x| 2.0 * x).collect()],
            1e-5,
        );
        assert!(r.max_rel_err < 1e-9);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let params = vec![vec![1.0, 2.0]];
        let r = check_gradients(&params, |p| p[0][0] * p[0][1], |_| vec![vec![2.0, 2.0]], 1e-5);
        assert!(r.max_rel_err > 0.1);
        assert_eq!(r.worst, (0, 1));
    }
}
