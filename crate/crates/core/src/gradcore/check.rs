//! Central finite-difference gradient checking.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::layers::Sequential;
use super::loss::softmax_cross_entropy;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Gradient magnitudes below this are compared in absolute terms.
const RELATIVE_FLOOR: f64 = 1e-6;

/// A scalar loss over a set of named, flattened tensors.
pub trait Objective {
    /// Tensor names and current values, in a fixed order.
    fn tensors(&self) -> Vec<(String, Vec<f64>)>;
    fn set_entry(&mut self, tensor: usize, index: usize, value: f64);
    fn loss(&self) -> Result<f64>;
    /// Analytic gradients in the same order and shape as [`Objective::tensors`].
    fn gradients(&mut self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(f, "  {:<20} n={:<6} max_rel={:.3e} max_abs={:.3e}", t.name, t.entries, t.max_rel_error, t.max_abs_error)?;
        }
        write!(
            f,
            "  overall max_rel={:.3e} tol={:.0e} {}",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic gradients against `(L(θ+h) − L(θ−h)) / 2h` for every
/// entry of every tensor. Parameters are restored afterwards.
pub fn finite_difference_check(objective: &mut dyn Objective, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = objective.gradients()?;
    let tensors = objective.tensors();
    let mut checks = Vec::with_capacity(tensors.len());
    for (t, (name, values)) in tensors.iter().enumerate() {
        let mut check = TensorCheck {
            name: name.clone(),
            entries: values.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for (i, &orig) in values.iter().enumerate() {
            objective.set_entry(t, i, orig + step);
            let plus = objective.loss()?;
            objective.set_entry(t, i, orig - step);
            let minus = objective.loss()?;
            objective.set_entry(t, i, orig);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[t][i];
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
            }
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
        }
        checks.push(check);
    }
    Ok(GradCheckReport {
        tensors: checks,
        step,
        tolerance,
    })
}

/// Softmax cross-entropy of a [`Sequential`] on one input vector; checks
/// both the parameters and the input gradient.
pub struct SequentialObjective {
    pub net: Sequential,
    pub input: Vec<f64>,
    pub target: usize,
}

impl Objective for SequentialObjective {
    fn tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, p) in self.net.linear_layers().enumerate() {
            out.push((format!("linear{i}.weight"), p.weight.data().to_vec()));
            out.push((format!("linear{i}.bias"), p.bias.clone()));
        }
        out.push(("input".into(), self.input.clone()));
        out
    }

    fn set_entry(&mut self, tensor: usize, index: usize, value: f64) {
        let n_param = 2 * self.net.linear_layers().count();
        if tensor == n_param {
            self.input[index] = value;
            return;
        }
        let p = self.net.linear_layers_mut().nth(tensor / 2).expect("tensor index");
        if tensor.is_multiple_of(2) {
            p.weight.data_mut()[index] = value;
        } else {
            p.bias[index] = value;
        }
    }

    fn loss(&self) -> Result<f64> {
        let logits = self.net.forward(&self.input)?;
        Ok(softmax_cross_entropy(&logits, self.target)?.0)
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        self.net.zero_grad();
        let logits = self.net.forward_record(&self.input)?;
        let (_, upstream) = softmax_cross_entropy(&logits, self.target)?;
        let grad_input = self.net.backward(&upstream)?;
        let mut out = Vec::new();
        for p in self.net.linear_layers() {
            out.push(p.grad_weight.data().to_vec());
            out.push(p.grad_bias.clone());
        }
        out.push(grad_input);
        Ok(out)
    }
}
