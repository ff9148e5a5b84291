//! Central finite-difference verification of analytic gradients (64-bit).
//!
//! An element is skipped when the `+step` and `-step` evaluations take
//! different branches through a piecewise op (relu, clamp, max): the
//! difference quotient then spans a kink and is not a derivative.

mod suite;

pub use suite::{run_suite, suite_cases, SuiteCase, SuiteResult, SUITE_TOLERANCE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BranchSignature, Graph, ParamStore, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `max (|analytic - cd| - r) / max(|analytic|, |cd|, 1e-8)` over checked
    /// elements, where `r` is the central difference's rounding bound.
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            excluded: self.excluded + other.excluded,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Bound on the rounding error of a central difference of values near
/// `f_plus` and `f_minus`.
pub fn rounding_bound(f_plus: f64, f_minus: f64, step: f64) -> f64 {
    4.0 * f64::EPSILON * f_plus.abs().max(f_minus.abs()) / step
}

/// [`relative_error`] after discounting the central difference's rounding
/// error, so gradients below what the step can resolve do not count as
/// mismatches.
pub fn resolved_error(analytic: f64, numeric: f64, noise: f64) -> f64 {
    let diff = ((analytic - numeric).abs() - noise).max(0.0);
    diff / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_value(g: &Graph<f64>, loss: Var) -> Result<f64> {
    let v = g.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: g.tag(loss) });
    }
    Ok(v)
}

/// Compares the analytic gradient of `f` at `x` against central differences
/// for every element of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |xv: Tensor<f64>| -> Result<(f64, BranchSignature)> {
        let mut g = Graph::with_branch_tracking();
        let v = g.input(xv);
        let loss = f(&mut g, v)?;
        Ok((
            scalar_value(&g, loss)?,
            g.branch_signature().unwrap_or_default(),
        ))
    };

    let mut g = Graph::new();
    let v = g.input(x.clone());
    let loss = f(&mut g, v)?;
    scalar_value(&g, loss)?;
    g.backward(loss)?;
    let analytic = g
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut report = GradCheckReport::default();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp.hash != sm.hash {
            report.excluded += 1;
            continue;
        }
        let cd = (fp - fm) / (2.0 * step);
        report.max_rel_error = report.max_rel_error.max(resolved_error(
            analytic.data()[i],
            cd,
            rounding_bound(fp, fm, step),
        ));
        report.checked += 1;
    }
    Ok(report)
}

/// Like [`finite_diff_check`] but with respect to the parameters in `store`.
/// With `sample = Some((count, seed))` only `count` randomly chosen
/// coordinates are checked.
pub fn finite_diff_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    step: f64,
    sample: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<(f64, BranchSignature)> {
        let mut g = Graph::with_branch_tracking();
        let loss = f(&mut g, s)?;
        Ok((
            scalar_value(&g, loss)?,
            g.branch_signature().unwrap_or_default(),
        ))
    };

    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    scalar_value(&g, loss)?;
    let grads = g.backward_params(loss, store)?;

    let all: Vec<(String, usize)> = store
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| (0..p.value.numel()).map(move |i| (p.name.clone(), i)))
        .collect();
    let coords: Vec<(String, usize)> = match sample {
        Some((count, seed)) if count < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| all[rng.random_range(0..all.len())].clone())
                .collect()
        }
        _ => all,
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (name, i) in coords {
        let orig = work.get(&name)?.value.data()[i];
        work.get_mut(&name)?.value.data_mut()[i] = orig + step;
        let (fp, sp) = eval(&work)?;
        work.get_mut(&name)?.value.data_mut()[i] = orig - step;
        let (fm, sm) = eval(&work)?;
        work.get_mut(&name)?.value.data_mut()[i] = orig;
        if sp.hash != sm.hash {
            report.excluded += 1;
            continue;
        }
        let cd = (fp - fm) / (2.0 * step);
        let a = grads.get(&name).map(|t| t.data()[i]).unwrap_or(0.0);
        report.max_rel_error =
            report
                .max_rel_error
                .max(resolved_error(a, cd, rounding_bound(fp, fm, step)));
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn([10], |_| rng.random_range(-2.0..2.0));
        let r = finite_diff_check(
            |g, v| {
                let s = g.mul(v, v)?;
                g.sum(s)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 10);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::from_f64([3], &[0.0, 0.7, -0.4]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let s = g.relu(v)?;
                g.sum(s)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::from_f64([4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let z = g.mul_scalar(v, 0.0)?;
                let s = g.sum(z)?;
                g.add_scalar(s, 5.0)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        // ln(x) at x <= 0 is non-finite: must surface as an error, not a pass.
        let x = Tensor::from_f64([1], &[1e-6]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let l = g.ln(v)?;
                g.sum(l)
            },
            &x,
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn rounding_allowance_is_tiny() {
        let noise = rounding_bound(0.7, 0.7, 1e-4);
        assert!(noise < 1e-11);
        assert_eq!(resolved_error(1.8e-8, 1.8e-8 + noise / 2.0, noise), 0.0);
        assert!(resolved_error(1.0, 1.001, noise) > 9e-4);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::from_fn([4], |i| 0.5 + i as f64);
        let r = finite_diff_check(
            |g, v| {
                // d/dx of x*x is reported as x, half the true value.
                let copy = g.value(v).clone();
                let held = g.constant(copy);
                let s = g.mul(v, held)?;
                g.sum(s)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4, "{r:?}");
    }
}
