//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward closure, so it stays
//! independent of every backward implementation it is used to verify.

use ndarray::ArrayD;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Checks at most this many entries per input (all when `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the scalar `f(inputs)` against central differences.
///
/// The per-entry error is `|a - n| / max(|a|, |n|, floor)` where `floor` is
/// 1e-3 of the largest numeric gradient magnitude of that input, so entries
/// negligible relative to the tensor's scale are judged absolutely.
pub fn check<F>(inputs: &[ArrayD<f64>], f: F, config: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let analytic: Vec<ArrayD<f64>> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    compare(inputs, &analytic, eval, config)
}

/// Like [`check`], but differentiates with respect to every tensor of a
/// parameter store. Report entries follow the store's id order.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, config: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let inputs: Vec<ArrayD<f64>> = ids.iter().map(|&id| store.value(id).clone()).collect();
    let mut scratch = store.clone();
    let eval = |values: &[ArrayD<f64>]| -> f64 {
        for (&id, v) in ids.iter().zip(values) {
            scratch.value_mut(id).assign(v);
        }
        let mut tape = Tape::new();
        let out = f(&mut tape, &scratch);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let grads = tape.backward(out);
    let analytic: Vec<ArrayD<f64>> = ids
        .iter()
        .map(|&id| grads.param(id).cloned().unwrap_or_else(|| ArrayD::zeros(store.value(id).raw_dim())))
        .collect();
    compare(&inputs, &analytic, eval, config)
}

fn compare(
    inputs: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    mut eval: impl FnMut(&[ArrayD<f64>]) -> f64,
    config: &GradCheckConfig,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (k, analytic) in analytic.iter().enumerate() {
        let n = inputs[k].len();
        let indices: Vec<usize> = match config.max_entries {
            Some(m) if m < n => {
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(indices.len());
        for &i in &indices {
            let orig = inputs[k].as_slice_memory_order().unwrap()[i];
            work[k].as_slice_memory_order_mut().unwrap()[i] = orig + config.step;
            let plus = eval(&work);
            work[k].as_slice_memory_order_mut().unwrap()[i] = orig - config.step;
            let minus = eval(&work);
            work[k].as_slice_memory_order_mut().unwrap()[i] = orig;
            numeric.push((plus - minus) / (2.0 * config.step));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-12);
        let a_slice = analytic.as_slice_memory_order().unwrap();
        let mut report = InputReport {
            checked: indices.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (&i, &num) in indices.iter().zip(&numeric) {
            let a = a_slice[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = num;
            }
        }
        reports.push(report);
    }
    GradCheckReport { inputs: reports }
}
