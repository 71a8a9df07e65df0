//! Central finite-difference verification of analytic gradients.
//!
//! The relative error of a parameter tensor is
//! `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, floor)` where `a` is
//! the analytic gradient and `n` the central difference. The floor keeps
//! parameters with vanishing gradients from amplifying rounding noise: it is
//! the larger of the configured value and the gradient magnitude at which the
//! central difference's roundoff, `ε·max(|L|, 1)/h`, reaches a tenth of `tol`.
//!
//! Every constant the reference forward pass creates (detached values,
//! matching targets, encodings of detached boxes) is recorded and replayed
//! during the perturbed evaluations, so the numeric derivative sees the same
//! stop-gradients as backward.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
    /// Flip the sign of this op's local gradient, for harness self-tests.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub analytic_max_abs: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub loss: f64,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn entry(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// A deterministic loss builder: records a scalar loss on the graph using
/// parameters from the bound store.
pub trait LossFn: Fn(&mut Graph<f64>, &mut Bound<'_, f64>) -> Result<Var> {}
impl<F> LossFn for F where F: Fn(&mut Graph<f64>, &mut Bound<'_, f64>) -> Result<Var> {}

fn eval_loss(f: &impl LossFn, params: &ParamStore<f64>, frozen: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    g.replay_constants(frozen.to_vec());
    let mut b = Bound::new(params);
    let loss = f(&mut g, &mut b)?;
    g.check_replay()?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "loss must be scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

pub fn grad_check(
    label: &str,
    f: impl LossFn,
    params: &ParamStore<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    if let Some(kind) = opts.fault {
        g.inject_fault(kind);
    }
    g.record_constants();
    let mut bound = Bound::new(params);
    let loss = f(&mut g, &mut bound)?;
    let frozen = g.take_recorded_constants();
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("{label} loss")));
    }
    let again = eval_loss(&f, params, &frozen)?;
    if again.to_bits() != loss_value.to_bits() {
        return Err(Error::Contract(format!(
            "{label}: loss is not deterministic ({loss_value} vs {again})"
        )));
    }
    g.backward(loss)?;
    let analytic = bound.grads(&g);

    let roundoff = f64::EPSILON * loss_value.abs().max(1.0) / opts.h;
    let floor = opts.floor.max(10.0 * roundoff / opts.tol);
    let mut work = params.clone();
    let mut entries = Vec::with_capacity(params.len());
    for (id, name, tensor) in params.iter() {
        let a = analytic[id.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        let mut numeric = Vec::with_capacity(tensor.numel());
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.h;
            let plus = eval_loss(&f, &work, &frozen)?;
            work.get_mut(id).data_mut()[i] = orig - opts.h;
            let minus = eval_loss(&f, &work, &frozen)?;
            work.get_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * opts.h));
        }
        let (mut max_abs, mut worst) = (0.0f64, 0usize);
        for (i, (&x, &y)) in a.data().iter().zip(&numeric).enumerate() {
            let d = (x - y).abs();
            if d > max_abs {
                max_abs = d;
                worst = i;
            }
        }
        let a_max = a.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let n_max = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let rel = max_abs / a_max.max(n_max).max(floor);
        entries.push(GradCheckEntry {
            name: name.to_string(),
            numel: tensor.numel(),
            max_rel_error: rel,
            max_abs_error: max_abs,
            worst_index: worst,
            analytic_max_abs: a_max,
            passed: rel < opts.tol,
        });
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradCheckReport {
        label: label.to_string(),
        loss: loss_value,
        tol: opts.tol,
        entries,
        passed,
    })
}
