//! Central-difference validation of reverse-mode gradients.

use crate::error::Result;
use crate::rng;
use crate::tensor::ParamSet;
use rand::seq::SliceRandom;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Checks `analytic` (one gradient vector per parameter, in parameter order)
/// against central differences of `loss` at the current parameter values:
/// `|analytic - (f(x+e) - f(x-e)) / 2e| / (|central| + 1e-8)`, maximised over
/// every coordinate. Parameters are restored bit-exactly afterwards.
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    analytic: &[Vec<f64>],
    eps: f64,
    loss: F,
) -> Result<FdReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    check_inner(params, analytic, eps, None, loss)
}

/// Same check restricted to at most `cap` randomly chosen coordinates per
/// tensor, for parameters too large to sweep exhaustively.
pub fn finite_diff_check_sampled<F>(
    params: &mut ParamSet,
    analytic: &[Vec<f64>],
    eps: f64,
    cap: usize,
    seed: u64,
    loss: F,
) -> Result<FdReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    check_inner(params, analytic, eps, Some((cap, seed)), loss)
}

fn check_inner<F>(
    params: &mut ParamSet,
    analytic: &[Vec<f64>],
    eps: f64,
    sample: Option<(usize, u64)>,
    mut loss: F,
) -> Result<FdReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    assert_eq!(analytic.len(), params.len(), "one gradient vector per parameter");
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for (pi, &id) in ids.iter().enumerate() {
        let len = params.tensor(id).len();
        assert_eq!(analytic[pi].len(), len, "gradient length mismatch");
        let coords: Vec<usize> = match sample {
            Some((cap, seed)) if len > cap => {
                let mut all: Vec<usize> = (0..len).collect();
                let mut rng = rng::stream(seed, "fd/coords", pi as u64);
                all.shuffle(&mut rng);
                all.truncate(cap);
                all.sort_unstable();
                all
            }
            _ => (0..len).collect(),
        };
        for &ci in &coords {
            let orig = params.tensor(id).values()[ci];
            params.tensor_mut(id).values_mut()[ci] = orig + eps;
            let up = loss(params)?;
            params.tensor_mut(id).values_mut()[ci] = orig - eps;
            let down = loss(params)?;
            params.tensor_mut(id).values_mut()[ci] = orig;
            let central = (up - down) / (2.0 * eps);
            let rel = (analytic[pi][ci] - central).abs() / (central.abs() + 1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.name(id).to_owned();
                report.worst_index = ci;
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
