//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore, Params};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&eps) {
        Ok(())
    } else {
        Err(Error::Config(format!("finite-difference step {eps} outside [1e-7, 1e-3]")))
    }
}

/// Compares `analytic` with central differences of `f` around `theta` and
/// returns the largest relative error over all coordinates.
pub fn finite_diff_check<F>(component: &str, mut f: F, theta: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    check_eps(eps)?;
    if theta.len() != analytic.len() {
        return Err(Error::Dimension {
            context: "analytic gradient length",
            expected: theta.len(),
            actual: analytic.len(),
        });
    }
    let mut x = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        worst = worst.max(coordinate_error(component, i, plus, minus, eps, analytic[i])?);
    }
    Ok(worst)
}

fn coordinate_error(component: &str, i: usize, plus: f64, minus: f64, eps: f64, analytic: f64) -> Result<f64> {
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::GradCheck {
            component: component.to_string(),
            coordinate: i,
            reason: format!("non-finite objective ({plus}, {minus})"),
        });
    }
    let numeric = (plus - minus) / (2.0 * eps);
    Ok(relative_error(analytic, numeric))
}

/// Runs the same check over every scalar in a parameter store.
///
/// `loss` must be deterministic; when handed `Some(grads)` it also
/// accumulates its analytic gradient there.
pub fn check_param_store<F>(component: &str, store: &mut ParamStore, eps: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&Params, Option<&mut Gradients>) -> f64,
{
    check_eps(eps)?;
    store.zero_grads();
    {
        let (params, grads) = store.split_mut();
        let value = loss(params, Some(grads));
        if !value.is_finite() {
            return Err(Error::GradCheck {
                component: component.to_string(),
                coordinate: 0,
                reason: format!("non-finite objective {value}"),
            });
        }
    }
    let analytic = store.grads().clone();
    check_against_gradients(component, store, &analytic, eps, |p| loss(p, None))
}

/// Perturbs every scalar of `store` in turn and compares the central
/// difference of `loss` against the matching entry of `analytic`.
pub fn check_against_gradients<F>(
    component: &str,
    store: &mut ParamStore,
    analytic: &Gradients,
    eps: f64,
    mut loss: F,
) -> Result<f64>
where
    F: FnMut(&Params) -> f64,
{
    check_eps(eps)?;
    let mut worst = 0.0f64;
    let mut flat = 0;
    let ids: Vec<_> = store.params().ids().collect();
    for id in ids {
        for j in 0..store.params().get(id).len() {
            let orig = store.params().get(id).data()[j];
            store.params_mut().get_mut(id).data_mut()[j] = orig + eps;
            let plus = loss(store.params());
            store.params_mut().get_mut(id).data_mut()[j] = orig - eps;
            let minus = loss(store.params());
            store.params_mut().get_mut(id).data_mut()[j] = orig;
            let err = coordinate_error(component, flat, plus, minus, eps, analytic.get(id).data()[j])?;
            worst = worst.max(err);
            flat += 1;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::linear::Linear;
    use crate::nn::math::{log_softmax, log_softmax_backward};

    #[test]
    fn square_function() {
        let err = finite_diff_check("square", |x| x[0] * x[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn eps_range_is_enforced() {
        assert!(finite_diff_check("sq", |x| x[0], &[1.0], &[1.0], 1e-2).is_err());
        assert!(finite_diff_check("sq", |x| x[0], &[1.0], &[1.0], 1e-9).is_err());
    }

    #[test]
    fn non_finite_objective_names_coordinate() {
        let err = finite_diff_check("log", |x| x[0] + (x[1] - 2.0).sqrt(), &[1.0, 2.0], &[1.0, 0.0], 1e-5).unwrap_err();
        match err {
            Error::GradCheck { component, coordinate, .. } => {
                assert_eq!(component, "log");
                assert_eq!(coordinate, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = finite_diff_check("sq", |x| x[0] * x[0], &[3.0], &[5.0], 1e-5).unwrap();
        assert!(err > 1e-2);
    }

    #[test]
    fn linear_layer_nll() {
        let mut store = ParamStore::new(4);
        let lin = Linear::new(&mut store, "lin", 3, 4);
        let x = [0.5, -1.0, 2.0];
        let target = 2;
        let err = check_param_store("linear", &mut store, 1e-5, |p, g| {
            let logits = lin.forward(p, &x);
            let logp = log_softmax(&logits);
            if let Some(g) = g {
                let mut d = vec![0.0; 4];
                d[target] = -1.0;
                let dz = log_softmax_backward(&logp, &d);
                lin.backward(p, g, &x, &dz);
            }
            -logp[target]
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
