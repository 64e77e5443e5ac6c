use super::{Graph, Scalar, Tensor, Var};
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale; central
/// differences cannot resolve relative error below roundoff.
pub const REL_ERROR_FLOOR: Scalar = 1e-6;

/// Outcome of comparing backward() against central differences for one tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: Scalar,
    /// Coordinate with the largest error, with its analytic and numeric gradient.
    pub worst: Option<(usize, Scalar, Scalar)>,
}

pub fn relative_error(analytic: Scalar, numeric: Scalar) -> Scalar {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the reverse-mode gradient of a scalar function of one tensor
/// with central differences `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h`.
pub fn finite_diff_check<F>(f: F, theta: &Tensor, h: Scalar) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut checks = finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(theta), h)?;
    Ok(checks.remove(0))
}

/// Multi-tensor form of [`finite_diff_check`]; one result per input tensor.
pub fn finite_diff_check_many<F>(f: F, thetas: &[Tensor], h: Scalar) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = thetas.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let eval = |point: &[Tensor]| -> Result<Scalar> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut point: Vec<Tensor> = thetas.to_vec();
    let mut out = Vec::with_capacity(thetas.len());
    for (ti, grad) in analytic.iter().enumerate() {
        let mut check = GradCheck {
            max_rel_error: 0.0,
            worst: None,
        };
        for i in 0..grad.numel() {
            let orig = point[ti].data()[i];
            point[ti].data_mut()[i] = orig + h;
            let plus = eval(&point)?;
            point[ti].data_mut()[i] = orig - h;
            let minus = eval(&point)?;
            point[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad.data()[i], numeric);
            if check.worst.is_none() || err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst = Some((i, grad.data()[i], numeric));
            }
        }
        out.push(check);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::from_fn(&[5], |i| i as Scalar * 0.7 - 1.3);
        let check = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                let s = g.scale(sq, 3.0);
                Ok(g.sum(s))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-7, "{check:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let theta = Tensor::ones(&[3]);
        let check = finite_diff_check(
            |g, _x| {
                let c = g.constant(Tensor::scalar(4.0));
                Ok(g.sum(c))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert_eq!(check.max_rel_error, 0.0);
        let (_, analytic, numeric) = check.worst.unwrap();
        assert_eq!((analytic, numeric), (0.0, 0.0));
    }
}
