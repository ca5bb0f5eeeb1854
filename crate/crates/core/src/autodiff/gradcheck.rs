use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Parameters with more coordinates than this are subsampled.
    pub max_coords: usize,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tolerance: 1e-5,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink.
    pub excluded: Vec<usize>,
    /// Worst coordinate with its analytic and numeric gradients.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub passed: bool,
    pub h: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded.len()).sum()
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Bound on the rounding error of a central difference: two ulps of
/// each objective value, divided by the step.
pub fn difference_resolution(plus: f64, minus: f64, h: f64) -> f64 {
    2.0 * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * h)
}

/// Like [`relative_error`], but disagreement up to `resolution` counts as
/// none, since the central difference cannot resolve it.
pub fn resolved_relative_error(analytic: f64, numeric: f64, resolution: f64) -> f64 {
    ((analytic - numeric).abs() - resolution).max(0.0) / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(f64, u64, Tape, Var, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape
        .value(root)
        .item()
        .ok_or_else(|| Error::NonScalarRoot(tape.value(root).shape().to_vec()))?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let sig = tape.branch_signature();
    Ok((value, sig, tape, root, vars))
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar on a fresh tape from leaves holding `params`. A
/// coordinate is excluded, not failed, when either perturbed evaluation
/// takes a different branch at some kink than the unperturbed one.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", opts.h)));
    }
    let (_, base_sig, tape, root, vars) = evaluate(&f, params)?;
    let grads = tape.backward(root)?;
    drop(tape);

    let mut reports = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]);
        let coords: Vec<usize> = if param.len() <= opts.max_coords {
            (0..param.len()).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, param.len(), opts.max_coords).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut report = ParamReport {
            max_rel_error: 0.0,
            checked: 0,
            excluded: Vec::new(),
            worst: None,
        };
        for &i in &coords {
            let original = param.data()[i];
            work[pi].data_mut()[i] = original + opts.h;
            let (plus, sig_plus, ..) = evaluate(&f, &work)?;
            work[pi].data_mut()[i] = original - opts.h;
            let (minus, sig_minus, ..) = evaluate(&f, &work)?;
            work[pi].data_mut()[i] = original;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.excluded.push(i);
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic.data()[i];
            let err = resolved_relative_error(a, numeric, difference_resolution(plus, minus, opts.h));
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, a, numeric));
            }
        }
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.max_rel_error <= opts.tolerance);
    Ok(GradCheckReport {
        params: reports,
        passed,
        h: opts.h,
        tolerance: opts.tolerance,
    })
}
