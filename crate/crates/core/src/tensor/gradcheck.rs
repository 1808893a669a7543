use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tensor};

/// Output of one loss evaluation used by [`grad_check`].
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    /// Analytic gradients, one per parameter, when requested.
    pub grads: Option<Vec<Tensor>>,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Caps the number of coordinates probed per parameter; `None` probes all.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
    /// Largest relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

/// Compares analytic gradients against central finite differences.
///
/// Relative error per coordinate is `|a-n| / max(1, |a|, |n|)`.
pub fn grad_check<E, F>(
    params: &ParamStore,
    opts: GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore, bool) -> Result<LossAndGrad, E>,
{
    let analytic = loss_fn(params, true)?
        .grads
        .expect("loss_fn must return gradients when asked");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
        per_param: Vec::with_capacity(params.len()),
    };
    for (pi, (name, value)) in params.iter().enumerate() {
        let n = value.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < n => {
                let mut c = sample(&mut rng, n, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst_here: f64 = 0.0;
        for idx in coords {
            let original = value.data()[idx];
            probe.values_mut()[pi].data_mut()[idx] = original + opts.eps;
            let plus = loss_fn(&probe, false)?.loss;
            probe.values_mut()[pi].data_mut()[idx] = original - opts.eps;
            let minus = loss_fn(&probe, false)?.loss;
            probe.values_mut()[pi].data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[pi].data()[idx];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            worst_here = worst_here.max(rel);
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.to_string();
                report.worst_index = idx;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        report.per_param.push((name.to_string(), worst_here));
    }
    Ok(report)
}
