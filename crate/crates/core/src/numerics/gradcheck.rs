use super::{NumericsError, Parameter};

/// At most this many coordinates are probed per tensor.
pub const MAX_COORDS_PER_TENSOR: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, flat index)` where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compare the analytic gradients stored in `params[..].grad` against
/// central differences of `loss_fn`.
///
/// Tensors with at most [`MAX_COORDS_PER_TENSOR`] entries are checked
/// exhaustively; larger ones at the evenly spaced flat indices
/// `floor(i * n / 200)` for `i in 0..200`. Frozen tensors are skipped. The
/// relative error per coordinate is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(
    params: &mut [Parameter<f64>],
    mut loss_fn: F,
    eps: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&[Parameter<f64>]) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NumericsError::InvalidArgument(format!(
            "grad_check eps must be in [1e-7, 1e-3], got {eps}"
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for pi in 0..params.len() {
        if params[pi].frozen {
            continue;
        }
        let n = params[pi].value.len();
        let coords: Vec<usize> = if n <= MAX_COORDS_PER_TENSOR {
            (0..n).collect()
        } else {
            (0..MAX_COORDS_PER_TENSOR)
                .map(|i| i * n / MAX_COORDS_PER_TENSOR)
                .collect()
        };
        for idx in coords {
            let original = params[pi].value.as_slice()[idx];
            params[pi].value.as_mut_slice()[idx] = original + eps;
            let plus = loss_fn(params);
            params[pi].value.as_mut_slice()[idx] = original - eps;
            let minus = loss_fn(params);
            params[pi].value.as_mut_slice()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericsError::NonFiniteLoss);
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = params[pi].grad.as_slice()[idx];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params[pi].name.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn quadratic(ps: &[Parameter<f64>]) -> f64 {
        ps.iter()
            .flat_map(|p| p.value.as_slice())
            .map(|x| 0.5 * x * x)
            .sum()
    }

    fn setup(scale: f64) -> Vec<Parameter<f64>> {
        let vals: Vec<f64> = (0..300).map(|i| ((i as f64) * 0.37).sin() * 2.0).collect();
        let mut p = Parameter::new("theta", Matrix::from_vec(15, 20, vals.clone()).unwrap());
        p.grad = Matrix::from_vec(15, 20, vals.iter().map(|v| v * scale).collect()).unwrap();
        let mut small = Parameter::new("small", Matrix::from_rows(&[&[0.5, -1.5]]));
        small.grad = Matrix::from_rows(&[&[0.5 * scale, -1.5 * scale]]);
        vec![p, small]
    }

    #[test]
    fn quadratic_gradient_passes() {
        let mut ps = setup(1.0);
        let r = grad_check(&mut ps, quadratic, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coords_checked, 200 + 2);
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let mut ps = setup(2.0);
        let r = grad_check(&mut ps, quadratic, 1e-5).unwrap();
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn rejects_bad_eps_and_nonfinite_loss() {
        let mut ps = setup(1.0);
        assert!(grad_check(&mut ps, quadratic, 1e-2).is_err());
        assert_eq!(
            grad_check(&mut ps, |_| f64::NAN, 1e-5),
            Err(NumericsError::NonFiniteLoss)
        );
    }
}
