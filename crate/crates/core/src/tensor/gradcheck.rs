//! Central finite-difference verification of analytic adjoints.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Default finite-difference step.
pub const EPSILON: f64 = 1e-5;

/// Denominator floor of the relative error, so entries whose true gradient is
/// near zero are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat indices whose error exceeded the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }
}

/// Compares the adjoints of `f` at `params` with central differences
/// `(f(p+ε) − f(p−ε)) / 2ε`, one coordinate at a time.
///
/// `f` receives a fresh graph and one leaf per parameter and must return a
/// scalar node. It has to be a deterministic function of the parameters.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic = {
        let g = Graph::new();
        let leaves: Vec<_> = params.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        let root = f(&g, &leaves)?;
        g.backward(root)?;
        leaves.iter().map(|l| l.grad()).collect::<Vec<_>>()
    };
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let leaves: Vec<_> = values.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &leaves)?.item())
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        tolerance,
        params: Vec::new(),
    };
    for (p, (name, _)) in params.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            flagged: Vec::new(),
        };
        for i in 0..values[p].len() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + epsilon;
            let plus = eval(&values)?;
            values[p].data_mut()[i] = orig - epsilon;
            let minus = eval(&values)?;
            values[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[p].data()[i], numeric);
            check.max_rel_error = check.max_rel_error.max(err);
            if err > tolerance || !err.is_finite() {
                check.flagged.push(i);
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
