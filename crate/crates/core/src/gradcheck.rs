//! Central finite-difference verification of reverse-mode gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Magnitude below which errors are measured absolutely rather than
    /// relatively.
    pub floor: f64,
    /// Check at most this many entries per tensor, spread evenly; `None` checks all.
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-4,
            max_entries_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let scale = libm::fabs(analytic).max(libm::fabs(numeric)).max(floor);
        let rel = libm::fabs(analytic - numeric) / scale;
        self.checked += 1;
        if self.worst.is_none() || rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = Some((name.to_string(), index));
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

fn entries(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

fn scalar_loss(tape: &Tape<'_>, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::contract("gradient check needs a scalar loss"));
    }
    Ok(v.item())
}

/// Checks gradients of `f` with respect to free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], config: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let empty = ParamStore::new();
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(&empty);
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        scalar_loss(&tape, loss)
    };

    let mut tape = Tape::new(&empty);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.input(*var).unwrap_or(&zero).clone();
        for e in entries(inputs[i].numel(), config.max_entries_per_tensor) {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + config.step;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - config.step;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * config.step);
            let name = alloc::format!("input{i}");
            report.record(&name, e, analytic.data()[e], numeric, config.floor);
        }
    }
    Ok(report)
}

/// Checks gradients of `f` with respect to every trainable parameter selected
/// by `select`.
pub fn check_params<F, S>(
    params: &ParamStore,
    config: GradCheckConfig,
    select: S,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
    S: Fn(&str) -> bool,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = params
        .iter()
        .filter(|(_, e)| e.trainable && select(&e.name))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let zero = Tensor::zeros(params.get(id).shape());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        for e in entries(params.get(id).numel(), config.max_entries_per_tensor) {
            let orig = params.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + config.step;
            let up = {
                let mut t = Tape::new(&work);
                let l = f(&mut t)?;
                scalar_loss(&t, l)?
            };
            work.get_mut(id).data_mut()[e] = orig - config.step;
            let down = {
                let mut t = Tape::new(&work);
                let l = f(&mut t)?;
                scalar_loss(&t, l)?
            };
            work.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * config.step);
            report.record(params.name(id), e, analytic.data()[e], numeric, config.floor);
        }
    }
    Ok(report)
}
