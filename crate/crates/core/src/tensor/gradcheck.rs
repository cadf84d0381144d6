use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tol: f64,
    /// Error is `|tape − numeric| / max(|tape|, |numeric|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn primitive() -> Self {
        Self { step: 1e-5, tol: 1e-6, floor: 1e-2, max_coords: None, seed: 0 }
    }

    pub fn module(tol: f64) -> Self {
        Self { tol, ..Self::primitive() }
    }

    pub fn sampled(mut self, per_input: usize, seed: u64) -> Self {
        self.max_coords = Some(per_input);
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares tape gradients of scalar `f` against central finite differences.
///
/// `f` must be deterministic; it is re-run on a fresh tape for every perturbation.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let shared: Vec<Arc<Tensor>> = inputs.iter().cloned().map(Arc::new).collect();
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = shared.iter().map(|t| tape.leaf_shared(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if !out.value().item().is_finite() {
            return Err(Error::GradCheckAborted { input: usize::MAX, index: 0 });
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.get(*v).expect("leaf gradient")).collect()
    };

    let eval = |values: &[Arc<Tensor>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.leaf_shared(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, tol: opts.tol, passed: true };
    let mut values = shared.clone();
    for (input, tensor) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(n) if n < tensor.len() => {
                let mut c = sample(&mut rng, tensor.len(), n).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..tensor.len()).collect(),
        };
        for index in coords {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut t = tensor.clone();
                t.data_mut()[index] += delta;
                values[input] = Arc::new(t);
                let v = eval(&values);
                values[input] = shared[input].clone();
                let v = v?;
                if !v.is_finite() {
                    return Err(Error::GradCheckAborted { input, index });
                }
                Ok(v)
            };
            let numeric = (probe(opts.step)? - probe(-opts.step)?) / (2.0 * opts.step);
            let tape_grad = analytic[input].data()[index];
            if !tape_grad.is_finite() {
                return Err(Error::GradCheckAborted { input, index });
            }
            let err = (tape_grad - numeric).abs() / tape_grad.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((input, index));
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}
