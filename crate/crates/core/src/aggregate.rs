//! Bag-to-slide aggregation: parameter-free mean and max pooling, and the
//! gated-attention pooling used by attention-based MIL.
//!
//! All aggregators treat the per-patch transform as the identity and emit a
//! vector of the patch feature width.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{dot, sigmoid, Matrix};
use crate::rng::StreamRng;

pub const DEFAULT_ATTENTION_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregatorKind {
    Mean,
    Max,
    GatedAttention { hidden: usize },
}

impl AggregatorKind {
    pub fn has_parameters(self) -> bool {
        matches!(self, AggregatorKind::GatedAttention { .. })
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregatorKind::Mean => f.write_str("mean"),
            AggregatorKind::Max => f.write_str("max"),
            AggregatorKind::GatedAttention { hidden } => write!(f, "attention:{hidden}"),
        }
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(AggregatorKind::Mean),
            "max" => Ok(AggregatorKind::Max),
            "attention" => Ok(AggregatorKind::GatedAttention {
                hidden: DEFAULT_ATTENTION_HIDDEN,
            }),
            other => match other.strip_prefix("attention:") {
                Some(h) => h
                    .parse()
                    .map(|hidden| AggregatorKind::GatedAttention { hidden })
                    .map_err(|_| Error::Config(format!("bad attention width in `{other}`"))),
                None => Err(Error::Config(format!("unknown aggregator `{other}`"))),
            },
        }
    }
}

/// Width of the pooled vector for `d`-dimensional patches. Every aggregator
/// here is a (weighted) average or extremum over patches, so it is `d`.
pub fn aggregator_output_dim(kind: AggregatorKind, input_dim: usize) -> usize {
    match kind {
        AggregatorKind::Mean | AggregatorKind::Max | AggregatorKind::GatedAttention { .. } => input_dim,
    }
}

/// One slide's patch embeddings, `n` patches by `d` features.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub features: Matrix,
}

impl SlideBag {
    pub fn new(slide_id: impl Into<String>, features: Matrix) -> Result<Self> {
        let slide_id = slide_id.into();
        if features.rows() == 0 {
            return Err(Error::EmptyBag(slide_id));
        }
        Ok(Self { slide_id, features })
    }

    pub fn num_patches(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.features.rows() == 0 {
            Err(Error::EmptyBag(self.slide_id.clone()))
        } else {
            Ok(())
        }
    }
}

/// Pooled slide vector (`s`).
#[derive(Debug, Clone, PartialEq)]
pub struct SlideRepresentation(pub Vec<f64>);

impl SlideRepresentation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Row indices ordered by row content, so summing in this order gives the
/// same bits for any permutation of the rows.
fn canonical_row_order(features: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..features.rows()).collect();
    order.sort_by(|&a, &b| {
        features
            .row(a)
            .iter()
            .zip(features.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Column-wise arithmetic mean.
pub fn mean_pool(bag: &SlideBag) -> Result<SlideRepresentation> {
    bag.ensure_nonempty()?;
    let f = &bag.features;
    let mut sum = vec![0.0; f.cols()];
    for i in canonical_row_order(f) {
        for (s, &v) in sum.iter_mut().zip(f.row(i)) {
            *s += v;
        }
    }
    let n = f.rows() as f64;
    Ok(SlideRepresentation(sum.into_iter().map(|s| s / n).collect()))
}

/// Column-wise maximum.
pub fn max_pool(bag: &SlideBag) -> Result<SlideRepresentation> {
    bag.ensure_nonempty()?;
    let mut out = bag.features.row(0).to_vec();
    for row in bag.features.iter_rows().skip(1) {
        for (o, &v) in out.iter_mut().zip(row) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(SlideRepresentation(out))
}

/// `dL/dP` for mean pooling: every patch receives `grad / n`.
pub fn mean_pool_backward(bag: &SlideBag, grad: &[f64]) -> Result<Matrix> {
    bag.ensure_nonempty()?;
    if grad.len() != bag.dim() {
        return Err(Error::shape("mean_pool backward", format!("gradient of length {}", bag.dim()), format!("length {}", grad.len())));
    }
    let n = bag.num_patches();
    let row: Vec<f64> = grad.iter().map(|g| g / n as f64).collect();
    let mut out = Matrix::zeros(n, bag.dim());
    for i in 0..n {
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

/// `dL/dP` for max pooling: each column's gradient goes to its first
/// maximal patch.
pub fn max_pool_backward(bag: &SlideBag, grad: &[f64]) -> Result<Matrix> {
    bag.ensure_nonempty()?;
    if grad.len() != bag.dim() {
        return Err(Error::shape("max_pool backward", format!("gradient of length {}", bag.dim()), format!("length {}", grad.len())));
    }
    let f = &bag.features;
    let mut out = Matrix::zeros(f.rows(), f.cols());
    for (j, &g) in grad.iter().enumerate() {
        let mut best = 0;
        for i in 1..f.rows() {
            if f.get(i, j) > f.get(best, j) {
                best = i;
            }
        }
        out.set(best, j, g);
    }
    Ok(out)
}

/// Gated attention pooling parameters: `V`, `U` (h × d) and `w` (h).
#[derive(Debug, Clone, PartialEq)]
pub struct GatedAttentionParams {
    pub v: Matrix,
    pub u: Matrix,
    pub w: Vec<f64>,
    pub grad_v: Matrix,
    pub grad_u: Matrix,
    pub grad_w: Vec<f64>,
    recorded: Option<AttentionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
struct AttentionRecord {
    features: Matrix,
    tanh_v: Matrix,
    sig_u: Matrix,
    attention: Vec<f64>,
}

struct AttentionForward {
    pooled: Vec<f64>,
    attention: Vec<f64>,
    tanh_v: Matrix,
    sig_u: Matrix,
}

impl GatedAttentionParams {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self {
            v: Matrix::zeros(hidden, dim),
            u: Matrix::zeros(hidden, dim),
            w: vec![0.0; hidden],
            grad_v: Matrix::zeros(hidden, dim),
            grad_u: Matrix::zeros(hidden, dim),
            grad_w: vec![0.0; hidden],
            recorded: None,
        }
    }

    pub fn from_parts(v: Matrix, u: Matrix, w: Vec<f64>) -> Result<Self> {
        if v.shape() != u.shape() || w.len() != v.rows() || v.rows() == 0 {
            return Err(Error::shape(
                "GatedAttentionParams::from_parts",
                "V and U both h x d with h >= 1 and w of length h",
                format!("V {}, U {}, w {}", v.shape_string(), u.shape_string(), w.len()),
            ));
        }
        let (h, d) = v.shape();
        let mut p = Self::zeros(h, d);
        p.v = v;
        p.u = u;
        p.w = w;
        Ok(p)
    }

    /// Uniform `±1/sqrt(fan_in)` initialization (`d` for V/U, `h` for w).
    pub fn init_uniform(hidden: usize, dim: usize, rng: &mut StreamRng) -> Self {
        let mut p = Self::zeros(hidden, dim);
        let a = 1.0 / (dim as f64).sqrt();
        p.v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        p.u.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        let b = 1.0 / (hidden as f64).sqrt();
        p.w.iter_mut().for_each(|x| *x = rng.random_range(-b..b));
        p
    }

    pub fn hidden(&self) -> usize {
        self.v.rows()
    }

    pub fn dim(&self) -> usize {
        self.v.cols()
    }

    pub fn param_count(&self) -> usize {
        self.v.len() + self.u.len() + self.w.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_v.fill(0.0);
        self.grad_u.fill(0.0);
        self.grad_w.iter_mut().for_each(|g| *g = 0.0);
    }

    fn compute(&self, bag: &SlideBag) -> Result<AttentionForward> {
        bag.ensure_nonempty()?;
        if bag.dim() != self.dim() {
            return Err(Error::shape(
                "gated_attention_pool",
                format!("patches of dim {} (V is {})", self.dim(), self.v.shape_string()),
                format!("dim {}", bag.dim()),
            ));
        }
        let n = bag.num_patches();
        let h = self.hidden();
        let mut tanh_v = Matrix::zeros(n, h);
        let mut sig_u = Matrix::zeros(n, h);
        let mut scores = Vec::with_capacity(n);
        for (i, p) in bag.features.iter_rows().enumerate() {
            let mut score = 0.0;
            for k in 0..h {
                let t = dot(self.v.row(k), p).tanh();
                let g = sigmoid(dot(self.u.row(k), p));
                tanh_v.set(i, k, t);
                sig_u.set(i, k, g);
                score += self.w[k] * t * g;
            }
            scores.push(score);
        }
        let attention = crate::gradcore::softmax(&scores);
        let mut pooled = vec![0.0; bag.dim()];
        for (p, &a) in bag.features.iter_rows().zip(&attention) {
            for (s, &x) in pooled.iter_mut().zip(p) {
                *s += a * x;
            }
        }
        Ok(AttentionForward {
            pooled,
            attention,
            tanh_v,
            sig_u,
        })
    }

    pub fn forward_record(&mut self, bag: &SlideBag) -> Result<(SlideRepresentation, Vec<f64>)> {
        let fwd = self.compute(bag)?;
        self.recorded = Some(AttentionRecord {
            features: bag.features.clone(),
            tanh_v: fwd.tanh_v,
            sig_u: fwd.sig_u,
            attention: fwd.attention.clone(),
        });
        Ok((SlideRepresentation(fwd.pooled), fwd.attention))
    }

    /// Accumulates `dL/dV`, `dL/dU`, `dL/dw` and returns `dL/dP` for the
    /// recorded bag.
    pub fn backward(&mut self, grad_pooled: &[f64]) -> Result<Matrix> {
        Ok(self.backward_inner(grad_pooled, true)?.expect("input gradient requested"))
    }

    /// Like [`GatedAttentionParams::backward`] but skips `dL/dP`.
    pub fn backward_params(&mut self, grad_pooled: &[f64]) -> Result<()> {
        self.backward_inner(grad_pooled, false).map(|_| ())
    }

    fn backward_inner(&mut self, grad_pooled: &[f64], want_input: bool) -> Result<Option<Matrix>> {
        let rec = self
            .recorded
            .take()
            .ok_or_else(|| Error::State("attention backward called without a recorded forward pass".into()))?;
        let (n, d) = rec.features.shape();
        if grad_pooled.len() != d {
            return Err(Error::shape("attention backward", format!("gradient of length {d}"), format!("length {}", grad_pooled.len())));
        }
        let h = self.hidden();
        // dL/da_i = g·p_i, then through the softmax.
        let grad_a: Vec<f64> = rec.features.iter_rows().map(|p| dot(grad_pooled, p)).collect();
        let mean_grad = dot(&rec.attention, &grad_a);
        let mut grad_p = if want_input { Matrix::zeros(n, d) } else { Matrix::zeros(0, d) };
        let mut d_vp = vec![0.0; h];
        let mut d_up = vec![0.0; h];
        for i in 0..n {
            let a = rec.attention[i];
            let delta = a * (grad_a[i] - mean_grad);
            let p = rec.features.row(i);
            for k in 0..h {
                let t = rec.tanh_v.get(i, k);
                let g = rec.sig_u.get(i, k);
                self.grad_w[k] += delta * t * g;
                d_vp[k] = delta * self.w[k] * g * (1.0 - t * t);
                d_up[k] = delta * self.w[k] * t * g * (1.0 - g);
            }
            self.grad_v.add_outer(&d_vp, p);
            self.grad_u.add_outer(&d_up, p);
            if !want_input {
                continue;
            }
            let from_v = self.v.matvec_transposed(&d_vp)?;
            let from_u = self.u.matvec_transposed(&d_up)?;
            for (j, gp) in grad_p.row_mut(i).iter_mut().enumerate() {
                *gp = a * grad_pooled[j] + from_v[j] + from_u[j];
            }
        }
        Ok(want_input.then_some(grad_p))
    }
}

/// Attention-weighted patch average and the attention weights.
pub fn gated_attention_pool(params: &GatedAttentionParams, bag: &SlideBag) -> Result<(SlideRepresentation, Vec<f64>)> {
    let fwd = params.compute(bag)?;
    Ok((SlideRepresentation(fwd.pooled), fwd.attention))
}
