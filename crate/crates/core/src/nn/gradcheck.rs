//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Denominator floor for the relative error, so entries whose analytic
    /// and numeric values are both below it are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-7,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `tensor[index]` of the worst coordinate.
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose ±step perturbation crossed a ReLU or pooling branch.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

fn coords(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

fn record<F>(f: &mut F, store: &ParamStore<f64>, inputs: &[Tensor4<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, store, &vars)?;
    Ok((tape, vars, out))
}

fn evaluate<F>(f: &mut F, store: &ParamStore<f64>, inputs: &[Tensor4<f64>]) -> Result<(f64, u64)>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = record(f, store, inputs)?;
    Ok((tape.value(out).as_slice()[0], tape.branch_signature()))
}

struct Tally {
    opts: GradCheckOptions,
    signature: u64,
    report: GradCheckReport,
}

impl Tally {
    fn observe(&mut self, name: &str, idx: usize, analytic: f64, plus: (f64, u64), minus: (f64, u64)) {
        if plus.1 != self.signature || minus.1 != self.signature {
            self.report.skipped_kinks += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * self.opts.step);
        let denom = analytic.abs().max(numeric.abs()).max(self.opts.floor);
        let rel = (analytic - numeric).abs() / denom;
        self.report.checked += 1;
        if rel > self.report.max_rel_error {
            self.report.max_rel_error = rel;
            self.report.worst = format!("{name}[{idx}]");
        }
    }
}

/// Compares every analytic gradient of `f` (a scalar-valued graph built from
/// `inputs` and `store`) with central finite differences, for parameters
/// and inputs alike.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor4<f64>],
    mut f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    store.zero_grads();
    let (tape, vars, out) = record(&mut f, store, inputs)?;
    let signature = tape.branch_signature();
    let grads = tape.backward(out, store)?;
    let input_grads: Vec<Tensor4<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.of(v).cloned().unwrap_or_else(|| Tensor4::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut tally = Tally {
        opts,
        signature,
        report: GradCheckReport {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
            skipped_kinks: 0,
        },
    };
    let h = opts.step;

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let analytic = store.get(id).grad.clone();
        for i in coords(analytic.len(), opts.max_coords_per_tensor) {
            let orig = store.get(id).value.as_slice()[i];
            store.get_mut(id).value.as_mut_slice()[i] = orig + h;
            let plus = evaluate(&mut f, store, inputs)?;
            store.get_mut(id).value.as_mut_slice()[i] = orig - h;
            let minus = evaluate(&mut f, store, inputs)?;
            store.get_mut(id).value.as_mut_slice()[i] = orig;
            tally.observe(&name, i, analytic.as_slice()[i], plus, minus);
        }
    }

    let mut perturbed = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        let name = format!("input{k}");
        for i in coords(analytic.len(), opts.max_coords_per_tensor) {
            let orig = perturbed[k].as_slice()[i];
            perturbed[k].as_mut_slice()[i] = orig + h;
            let plus = evaluate(&mut f, store, &perturbed)?;
            perturbed[k].as_mut_slice()[i] = orig - h;
            let minus = evaluate(&mut f, store, &perturbed)?;
            perturbed[k].as_mut_slice()[i] = orig;
            tally.observe(&name, i, analytic.as_slice()[i], plus, minus);
        }
    }
    Ok(tally.report)
}
