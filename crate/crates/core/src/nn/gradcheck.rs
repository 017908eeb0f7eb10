use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Params, Var};
use super::params::ParamTree;
use crate::error::Result;

/// Worst disagreement found by [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates left out because the perturbation moved some relu, min,
    /// max or clamp input across its kink.
    pub kinks_skipped: usize,
}

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per tensor, drawn with a fixed seed.
    PerTensor(usize),
}

/// Relative error used throughout the checks, floored so that gradients
/// that vanish analytically do not amplify round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of `loss` with central finite differences of
/// step `h`. `loss` must be deterministic in the parameters. Coordinates
/// whose ±h evaluations take a different branch of a piecewise op than the
/// unperturbed pass are skipped and counted.
pub fn grad_check<F>(params: &mut ParamTree, h: f64, coverage: Coverage, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, Params<'_>) -> Result<Var>,
{
    params.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, Params::new(params))?;
    g.backward(l)?;
    g.accumulate(0, params);
    let base_pattern = g.branch_pattern();
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.clone()).collect();
    params.zero_grad();

    let mut eval = |tree: &ParamTree| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let l = loss(&mut g, Params::new(tree))?;
        g.check_finite()?;
        Ok((g.scalar(l), g.branch_pattern() == base_pattern))
    };

    let mut pick_rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kinks_skipped: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = params.value(id).len();
        let coords: Vec<usize> = match coverage {
            Coverage::PerTensor(m) if m < n => sample(&mut pick_rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = params.value(id).data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + h;
            let (up, up_same) = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig - h;
            let (down, down_same) = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig;
            if !(up_same && down_same) {
                report.kinks_skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k][i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
