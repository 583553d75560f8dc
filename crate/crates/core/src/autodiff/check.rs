use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{AutodiffError, Graph, Tensor, Var};

/// Relative error used by the checker: `|a − n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Per-input cap on checked coordinates; `None` checks all of them.
    pub max_coords: Option<usize>,
    /// Drives coordinate sampling when `max_coords` applies.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// Coordinates whose ±h probes changed a ReLU sign pattern.
    pub skipped_kinks: usize,
    /// `(input, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

/// Central-difference check of a single-input scalar function.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError> + Sync,
{
    let opts = GradCheckOptions {
        h,
        tol,
        ..Default::default()
    };
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), &opts)
}

/// Central-difference check of `f` with respect to every tensor in `inputs`.
///
/// A coordinate whose `x ± h` evaluations change the sign pattern of any ReLU
/// input is excluded: the function is not differentiable across the probe.
/// This also covers a rectifier input sitting exactly at 0.
pub fn grad_check_many<F, E>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E> + Sync,
    E: From<AutodiffError> + Send,
{
    let eval = |xs: &[Tensor]| -> Result<(f64, Vec<bool>), E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item(), g.activation_pattern()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base_pattern = g.activation_pattern();
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        match opts.max_coords {
            Some(m) if m < t.len() => {
                let mut picked = sample(&mut rng, t.len(), m).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|c| (k, c)));
            }
            _ => coords.extend((0..t.len()).map(|c| (k, c))),
        }
    }

    let results: Vec<Option<f64>> = coords
        .par_iter()
        .map(|&(k, c)| -> Result<Option<f64>, E> {
            let mut xs = inputs.to_vec();
            let x0 = xs[k].data()[c];
            xs[k].data_mut()[c] = x0 + opts.h;
            let (fp, pp) = eval(&xs)?;
            xs[k].data_mut()[c] = x0 - opts.h;
            let (fm, pm) = eval(&xs)?;
            if pp != base_pattern || pm != base_pattern {
                return Ok(None);
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            Ok(Some(rel_err(analytic[k].data()[c], numeric)))
        })
        .collect::<Result<_, E>>()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for (&(k, c), r) in coords.iter().zip(results) {
        match r {
            None => report.skipped_kinks += 1,
            Some(e) => {
                report.checked += 1;
                if e > report.max_rel_err || e.is_nan() {
                    report.max_rel_err = e;
                    report.worst = Some((k, c));
                }
            }
        }
    }
    report.pass = report.max_rel_err.is_finite() && report.max_rel_err <= opts.tol;
    Ok(report)
}
