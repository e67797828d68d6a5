use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Weight, bias and their gradient buffers for one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub grad_weight: Matrix,
    pub grad_bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            grad_weight: Matrix::zeros(out_dim, in_dim),
            grad_bias: vec![0.0; out_dim],
        }
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(
                "LayerParams::from_parts",
                format!("bias of length {}", weight.rows()),
                format!("length {}", bias.len()),
            ));
        }
        let (r, c) = weight.shape();
        Ok(Self {
            weight,
            grad_weight: Matrix::zeros(r, c),
            grad_bias: vec![0.0; bias.len()],
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Accumulates gradients for `y = Wx + b` and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() || grad_out.len() != self.out_dim() {
            return Err(Error::shape(
                "linear backward",
                format!("input {} / upstream {}", self.in_dim(), self.out_dim()),
                format!("input {} / upstream {}", x.len(), grad_out.len()),
            ));
        }
        self.grad_weight.add_outer(grad_out, x);
        for (gb, g) in self.grad_bias.iter_mut().zip(grad_out) {
            *gb += g;
        }
        self.weight.matvec_transposed(grad_out)
    }
}

/// `Wx + b`.
pub fn linear_forward(params: &LayerParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.in_dim() {
        return Err(Error::shape(
            "linear_forward",
            format!("input of length {} for weight {}", params.in_dim(), params.weight.shape_string()),
            format!("length {}", x.len()),
        ));
    }
    Ok(params
        .weight
        .iter_rows()
        .zip(&params.bias)
        .map(|(row, b)| dot(row, x) + b)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivationKind {
    Relu,
    Gelu,
    /// `value ⊙ SiLU(gate)` over the two halves of its input.
    Swiglu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 3] = [ActivationKind::Relu, ActivationKind::Gelu, ActivationKind::Swiglu];

    /// Width the preceding linear layer must emit to produce `hidden` outputs.
    pub fn input_width(self, hidden: usize) -> usize {
        match self {
            ActivationKind::Swiglu => 2 * hidden,
            _ => hidden,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Swiglu => "swiglu",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "gelu" => Ok(ActivationKind::Gelu),
            "swiglu" => Ok(ActivationKind::Swiglu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn check_activation_input(kind: ActivationKind, len: usize) -> Result<()> {
    if kind == ActivationKind::Swiglu && !len.is_multiple_of(2) {
        return Err(Error::shape("swiglu", "even-length input (value half, gate half)", format!("length {len}")));
    }
    Ok(())
}

/// Elementwise ReLU, exact (erf-based) GeLU, or SwiGLU over split halves.
pub fn activation_forward(kind: ActivationKind, x: &[f64]) -> Result<Vec<f64>> {
    check_activation_input(kind, x.len())?;
    Ok(match kind {
        ActivationKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        ActivationKind::Gelu => x.iter().map(|&v| v * normal_cdf(v)).collect(),
        ActivationKind::Swiglu => {
            let (value, gate) = x.split_at(x.len() / 2);
            value.iter().zip(gate).map(|(&v, &g)| v * silu(g)).collect()
        }
    })
}

/// Gradient w.r.t. the activation input, given the input it saw.
pub fn activation_backward(kind: ActivationKind, x: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
    check_activation_input(kind, x.len())?;
    let out_len = match kind {
        ActivationKind::Swiglu => x.len() / 2,
        _ => x.len(),
    };
    if grad_out.len() != out_len {
        return Err(Error::shape("activation backward", format!("upstream of length {out_len}"), format!("length {}", grad_out.len())));
    }
    Ok(match kind {
        ActivationKind::Relu => x
            .iter()
            .zip(grad_out)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        ActivationKind::Gelu => x
            .iter()
            .zip(grad_out)
            .map(|(&v, &g)| {
                let pdf = FRAC_1_SQRT_2PI * (-0.5 * v * v).exp();
                g * (normal_cdf(v) + v * pdf)
            })
            .collect(),
        ActivationKind::Swiglu => {
            let (value, gate) = x.split_at(out_len);
            let mut grad_in = vec![0.0; x.len()];
            for i in 0..out_len {
                let s = sigmoid(gate[i]);
                grad_in[i] = grad_out[i] * gate[i] * s;
                // d/dg [g·σ(g)] = σ(g)·(1 + g·(1 − σ(g)))
                grad_in[out_len + i] = grad_out[i] * value[i] * s * (1.0 + gate[i] * (1.0 - s));
            }
            grad_in
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(LayerParams),
    Activation(ActivationKind),
}

impl Layer {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Layer::Linear(p) => linear_forward(p, x),
            Layer::Activation(kind) => activation_forward(*kind, x),
        }
    }
}

/// A chain of layers with a recorded-activation backward pass.
///
/// `forward` is read-only. `forward_record` stores each layer's input so
/// that exactly one `backward` call can follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    recorded: Option<Vec<Vec<f64>>>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers, recorded: None }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.layers.iter().try_fold(x.to_vec(), |h, layer| layer.forward(&h))
    }

    pub fn forward_record(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let next = layer.forward(&h)?;
            inputs.push(std::mem::replace(&mut h, next));
        }
        self.recorded = Some(inputs);
        Ok(h)
    }

    /// Accumulates parameter gradients and returns `dL/dx` for the input of
    /// the last recorded forward pass.
    pub fn backward(&mut self, upstream: &[f64]) -> Result<Vec<f64>> {
        let inputs = self
            .recorded
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let mut grad = upstream.to_vec();
        for (layer, input) in self.layers.iter_mut().zip(&inputs).rev() {
            grad = match layer {
                Layer::Linear(p) => p.backward(input, &grad)?,
                Layer::Activation(kind) => activation_backward(*kind, input, &grad)?,
            };
        }
        Ok(grad)
    }

    pub fn has_recording(&self) -> bool {
        self.recorded.is_some()
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Linear(p) = layer {
                p.zero_grad();
            }
        }
    }

    pub fn linear_layers(&self) -> impl Iterator<Item = &LayerParams> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Linear(p) => Some(p),
            Layer::Activation(_) => None,
        })
    }

    pub fn linear_layers_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Linear(p) => Some(p),
            Layer::Activation(_) => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.linear_layers().map(LayerParams::param_count).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linear_identity_and_forced_arithmetic() {
        let p = LayerParams::from_parts(Matrix::identity(2), vec![0.0; 2]).unwrap();
        assert_eq!(linear_forward(&p, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);

        let p = LayerParams::from_parts(Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), vec![0.5]).unwrap();
        assert_eq!(linear_forward(&p, &[2.0, 3.0]).unwrap(), vec![5.5]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let p = LayerParams::zeros(3, 4);
        let err = linear_forward(&p, &[1.0, 2.0]).unwrap_err().to_string();
        assert!(err.contains("3x4"), "{err}");
        assert!(err.contains("length 2"), "{err}");
    }

    #[test]
    fn activation_definitions() {
        assert_eq!(activation_forward(ActivationKind::Relu, &[-1.0, 0.0, 2.0]).unwrap(), vec![0.0, 0.0, 2.0]);
        assert_eq!(activation_forward(ActivationKind::Gelu, &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(activation_forward(ActivationKind::Swiglu, &[1.0, 0.0]).unwrap(), vec![0.0]);
        assert!(activation_forward(ActivationKind::Swiglu, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn gelu_and_swiglu_match_frozen_reference_values() {
        // 40-digit reference evaluations of x·Φ(x) and v·g·σ(g).
        let got = activation_forward(ActivationKind::Gelu, &[1.0, -0.5, 2.5]).unwrap();
        let want = [0.841_344_746_068_542_9, -0.154_268_769_362_993_45, 2.484_475_836_685_559_7];
        for (g, w) in got.iter().zip(want) {
            assert!(close(*g, w, 1e-15), "{g} vs {w}");
        }
        let got = activation_forward(ActivationKind::Swiglu, &[2.0, 1.5]).unwrap();
        assert!(close(got[0], 2.452_723_428_580_931, 1e-15));
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let mut seq = Sequential::new(vec![Layer::Linear(LayerParams::zeros(1, 2))]);
        assert!(matches!(seq.backward(&[1.0]), Err(Error::State(_))));
        seq.forward_record(&[1.0, 2.0]).unwrap();
        seq.backward(&[1.0]).unwrap();
        // the recording is consumed
        assert!(matches!(seq.backward(&[1.0]), Err(Error::State(_))));
    }

    #[test]
    fn single_linear_output_zero_gradient_is_input() {
        let w = Matrix::from_rows(&[vec![0.3, -0.2, 0.1], vec![1.0, 2.0, 3.0]]).unwrap();
        let mut seq = Sequential::new(vec![Layer::Linear(LayerParams::from_parts(w, vec![0.0, 0.0]).unwrap())]);
        let x = [1.5, -2.0, 0.25];
        seq.forward_record(&x).unwrap();
        seq.backward(&[1.0, 0.0]).unwrap();
        let Layer::Linear(p) = &seq.layers[0] else { unreachable!() };
        assert_eq!(p.grad_weight.row(0), &x);
        assert_eq!(p.grad_weight.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(p.grad_bias, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let w1 = Matrix::from_rows(&[vec![0.3, -0.2], vec![0.5, 0.9], vec![-1.0, 0.4], vec![0.2, 0.2]]).unwrap();
        let w2 = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let mut seq = Sequential::new(vec![
            Layer::Linear(LayerParams::from_parts(w1, vec![0.1; 4]).unwrap()),
            Layer::Activation(ActivationKind::Swiglu),
            Layer::Linear(LayerParams::from_parts(w2, vec![0.0]).unwrap()),
        ]);
        seq.forward_record(&[0.7, -0.3]).unwrap();
        let gx = seq.backward(&[0.0]).unwrap();
        assert!(gx.iter().all(|&g| g == 0.0));
        for p in seq.linear_layers() {
            assert!(p.grad_weight.data().iter().chain(&p.grad_bias).all(|&g| g == 0.0));
        }
    }
}
