//! Central finite-difference checks of graph gradients.
//!
//! A central difference is not a valid reference when its stencil straddles
//! a ReLU kink or a resampling breakpoint. Such coordinates are detected by
//! comparing the two one-sided differences, left out of the comparison and
//! counted in [`GradReport::kinks`] so callers can bound how many were dropped.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Norm-wise comparison of analytic and numeric gradients for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)` over
    /// the coordinates that are smooth within the stencil.
    pub relative_error: f64,
    /// Coordinates excluded because the stencil crossed a kink.
    pub kinks: usize,
    pub len: usize,
}

/// One-sided differences disagreeing by more than this share of the largest
/// central difference mark a kink inside the stencil.
pub const KINK_FRACTION: f64 = 1e-3;

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Checks `d f / d inputs[i]` for every input, where `f` builds a scalar on a
/// fresh graph from leaf variables holding the inputs.
pub fn check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::dim("gradient check needs a scalar function"));
    }
    g.backward(out)?;

    let centre = eval(inputs)?;
    let mut reports = Vec::with_capacity(inputs.len());
    let mut values: Vec<Tensor> = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g.grad(var).map_or_else(|| vec![0.0; inputs[i].numel()], <[f64]>::to_vec);
        let n = inputs[i].numel();
        let (mut numeric, mut gap) = (vec![0.0; n], vec![0.0; n]);
        for k in 0..n {
            let original = values[i].data()[k];
            values[i].data_mut()[k] = original + eps;
            let plus = eval(&values)?;
            values[i].data_mut()[k] = original - eps;
            let minus = eval(&values)?;
            values[i].data_mut()[k] = original;
            numeric[k] = (plus - minus) / (2.0 * eps);
            gap[k] = ((plus - centre) - (centre - minus)).abs() / eps;
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let smooth: Vec<bool> = gap.iter().map(|&g| g <= KINK_FRACTION * scale).collect();
        let kept = |v: &[f64]| -> Vec<f64> { v.iter().zip(&smooth).filter(|(_, &s)| s).map(|(x, _)| *x).collect() };
        let (a, nu) = (kept(&analytic), kept(&numeric));
        let diff = l2(a.iter().zip(&nu).map(|(x, y)| x - y));
        let (an, nn) = (l2(a.iter().copied()), l2(nu.iter().copied()));
        reports.push(GradReport {
            analytic_norm: an,
            numeric_norm: nn,
            relative_error: diff / an.max(nn).max(1e-8),
            kinks: n - a.len(),
            len: n,
        });
    }
    Ok(reports)
}
