//! Slide-level models: an aggregator followed by a classification head.
//!
//! `mean + linear` is the linear probe, `mean + mlp` is SiMLP, and
//! `attention + linear` is the gated-attention MIL baseline.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    aggregator_output_dim, max_pool, max_pool_backward, mean_pool, mean_pool_backward, AggregatorKind, GatedAttentionParams,
    SlideBag, DEFAULT_ATTENTION_HIDDEN,
};
use crate::error::{Error, Result};
use crate::gradcore::check::{finite_difference_check, GradCheckReport, Objective};
use crate::gradcore::{argmax, linear_forward, softmax, softmax_cross_entropy, ActivationKind, Layer, LayerParams, Matrix, Sequential};
use crate::rng;

pub const DEFAULT_MLP_HIDDEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    Linear,
    Mlp { hidden: usize, activation: ActivationKind },
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::Linear => f.write_str("linear"),
            HeadKind::Mlp { hidden, activation } => write!(f, "mlp:{hidden}:{activation}"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "linear" {
            return Ok(HeadKind::Linear);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["mlp", hidden, act] => Ok(HeadKind::Mlp {
                hidden: hidden.parse().map_err(|_| Error::Config(format!("bad hidden width in `{s}`")))?,
                activation: act.parse()?,
            }),
            _ => Err(Error::Config(format!("unknown head `{s}`"))),
        }
    }
}

/// Declarative model description. Parameter shapes are a pure function of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub aggregator: AggregatorKind,
    pub head: HeadKind,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn linear_probe(input_dim: usize, num_classes: usize) -> Self {
        Self {
            aggregator: AggregatorKind::Mean,
            head: HeadKind::Linear,
            input_dim,
            num_classes,
        }
    }

    pub fn simlp(input_dim: usize, num_classes: usize) -> Self {
        Self {
            aggregator: AggregatorKind::Mean,
            head: HeadKind::Mlp {
                hidden: DEFAULT_MLP_HIDDEN,
                activation: ActivationKind::Relu,
            },
            input_dim,
            num_classes,
        }
    }

    pub fn abmil(input_dim: usize, num_classes: usize) -> Self {
        Self {
            aggregator: AggregatorKind::GatedAttention {
                hidden: DEFAULT_ATTENTION_HIDDEN,
            },
            head: HeadKind::Linear,
            input_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input dim must be >= 1".into()));
        }
        if let HeadKind::Mlp { hidden: 0, .. } = self.head {
            return Err(Error::Config("mlp hidden width must be >= 1".into()));
        }
        if let AggregatorKind::GatedAttention { hidden: 0 } = self.aggregator {
            return Err(Error::Config("attention hidden width must be >= 1".into()));
        }
        Ok(())
    }

    /// `(rows, cols)` of every parameter tensor in declaration order.
    pub fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut shapes = Vec::new();
        if let AggregatorKind::GatedAttention { hidden } = self.aggregator {
            shapes.push(("attention.V".to_string(), hidden, self.input_dim));
            shapes.push(("attention.U".to_string(), hidden, self.input_dim));
            shapes.push(("attention.w".to_string(), 1, hidden));
        }
        let pooled = aggregator_output_dim(self.aggregator, self.input_dim);
        let layers: Vec<(usize, usize)> = match self.head {
            HeadKind::Linear => vec![(self.num_classes, pooled)],
            HeadKind::Mlp { hidden, activation } => vec![(activation.input_width(hidden), pooled), (self.num_classes, hidden)],
        };
        for (i, (out, inp)) in layers.into_iter().enumerate() {
            shapes.push((format!("head.{i}.weight"), out, inp));
            shapes.push((format!("head.{i}.bias"), 1, out));
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, r, c)| r * c).sum()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agg={} head={} dim={} classes={}", self.aggregator, self.head, self.input_dim, self.num_classes)
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut agg, mut head, mut dim, mut classes) = (None, None, None, None);
        for field in s.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("model spec field `{field}` is not key=value")))?;
            let bad_int = |_| Error::Config(format!("bad integer in `{field}`"));
            match key {
                "agg" => agg = Some(value.parse()?),
                "head" => head = Some(value.parse()?),
                "dim" => dim = Some(value.parse().map_err(bad_int)?),
                "classes" => classes = Some(value.parse().map_err(bad_int)?),
                other => return Err(Error::Config(format!("unknown model spec key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("model spec is missing `{k}`"));
        let spec = ModelSpec {
            aggregator: agg.ok_or_else(|| missing("agg"))?,
            head: head.ok_or_else(|| missing("head"))?,
            input_dim: dim.ok_or_else(|| missing("dim"))?,
            num_classes: classes.ok_or_else(|| missing("classes"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum PoolRecord {
    Mean(SlideBag),
    Max(SlideBag),
    Attention,
}

/// A slide classifier with its parameters and gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideModel {
    spec: ModelSpec,
    attention: Option<GatedAttentionParams>,
    head: Sequential,
    pool_record: Option<PoolRecord>,
}

/// Builds a model with weights uniform in `±1/sqrt(fan_in)` and zero biases,
/// drawn from the `seed`-keyed initialization stream.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<SlideModel> {
    spec.validate()?;
    let mut r = rng::stream(seed, "init", &[]);
    let attention = match spec.aggregator {
        AggregatorKind::GatedAttention { hidden } => Some(GatedAttentionParams::init_uniform(hidden, spec.input_dim, &mut r)),
        _ => None,
    };
    let pooled = aggregator_output_dim(spec.aggregator, spec.input_dim);
    let mut uniform_layer = |out: usize, inp: usize| {
        let a = 1.0 / (inp as f64).sqrt();
        let w: Vec<f64> = (0..out * inp).map(|_| r.random_range(-a..a)).collect();
        LayerParams::from_parts(Matrix::new(out, inp, w).expect("finite init"), vec![0.0; out]).expect("bias shape")
    };
    let layers = match spec.head {
        HeadKind::Linear => vec![Layer::Linear(uniform_layer(spec.num_classes, pooled))],
        HeadKind::Mlp { hidden, activation } => vec![
            Layer::Linear(uniform_layer(activation.input_width(hidden), pooled)),
            Layer::Activation(activation),
            Layer::Linear(uniform_layer(spec.num_classes, hidden)),
        ],
    };
    Ok(SlideModel {
        spec,
        attention,
        head: Sequential::new(layers),
        pool_record: None,
    })
}

impl SlideModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.attention.as_ref().map_or(0, GatedAttentionParams::param_count) + self.head.param_count()
    }

    pub fn attention(&self) -> Option<&GatedAttentionParams> {
        self.attention.as_ref()
    }

    pub fn head(&self) -> &Sequential {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Sequential {
        &mut self.head
    }

    fn check_bag(&self, bag: &SlideBag) -> Result<()> {
        if bag.dim() != self.spec.input_dim {
            return Err(Error::shape(
                "SlideModel::forward",
                format!("patches of dim {}", self.spec.input_dim),
                format!("slide `{}` with dim {}", bag.slide_id, bag.dim()),
            ));
        }
        Ok(())
    }

    /// Slide representation `s`.
    pub fn pool(&self, bag: &SlideBag) -> Result<Vec<f64>> {
        self.check_bag(bag)?;
        Ok(match self.spec.aggregator {
            AggregatorKind::Mean => mean_pool(bag)?.0,
            AggregatorKind::Max => max_pool(bag)?.0,
            AggregatorKind::GatedAttention { .. } => {
                crate::aggregate::gated_attention_pool(self.attention.as_ref().expect("attention params"), bag)?.0 .0
            }
        })
    }

    /// Class logits for one slide. Read-only.
    pub fn forward(&self, bag: &SlideBag) -> Result<Vec<f64>> {
        let pooled = self.pool(bag)?;
        let logits = self.head.forward(&pooled)?;
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("logits for slide `{}`", bag.slide_id)));
        }
        Ok(logits)
    }

    /// Predicted class (lowest index on ties) and softmax probabilities.
    pub fn predict(&self, bag: &SlideBag) -> Result<(usize, Vec<f64>)> {
        let logits = self.forward(bag)?;
        Ok((argmax(&logits), softmax(&logits)))
    }

    /// Forward pass that records what [`SlideModel::backward`] needs.
    pub fn forward_record(&mut self, bag: &SlideBag) -> Result<Vec<f64>> {
        self.check_bag(bag)?;
        let (pooled, record) = match self.spec.aggregator {
            AggregatorKind::Mean => (mean_pool(bag)?.0, PoolRecord::Mean(bag.clone())),
            AggregatorKind::Max => (max_pool(bag)?.0, PoolRecord::Max(bag.clone())),
            AggregatorKind::GatedAttention { .. } => {
                let att = self.attention.as_mut().expect("attention params");
                (att.forward_record(bag)?.0 .0, PoolRecord::Attention)
            }
        };
        self.pool_record = Some(record);
        self.head.forward_record(&pooled)
    }

    /// Accumulates parameter gradients for the recorded forward pass and
    /// returns `dL/dP` with respect to the bag.
    pub fn backward(&mut self, grad_logits: &[f64]) -> Result<Matrix> {
        let record = self
            .pool_record
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let grad_pooled = self.head.backward(grad_logits)?;
        match record {
            PoolRecord::Mean(bag) => mean_pool_backward(&bag, &grad_pooled),
            PoolRecord::Max(bag) => max_pool_backward(&bag, &grad_pooled),
            PoolRecord::Attention => self.attention.as_mut().expect("attention params").backward(&grad_pooled),
        }
    }

    /// Accumulates parameter gradients only; the bag gradient is not formed.
    pub fn backward_params(&mut self, grad_logits: &[f64]) -> Result<()> {
        let record = self
            .pool_record
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let grad_pooled = self.head.backward(grad_logits)?;
        if let PoolRecord::Attention = record {
            self.attention.as_mut().expect("attention params").backward_params(&grad_pooled)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(a) = &mut self.attention {
            a.zero_grad();
        }
        self.head.zero_grad();
    }

    /// Visits `(name, values, grads)` for every tensor in declaration order.
    pub fn for_each_param(&mut self, mut f: impl FnMut(&str, &mut [f64], &[f64])) {
        if let Some(a) = &mut self.attention {
            f("attention.V", a.v.data_mut(), a.grad_v.data());
            f("attention.U", a.u.data_mut(), a.grad_u.data());
            f("attention.w", &mut a.w, &a.grad_w);
        }
        for (i, p) in self.head.linear_layers_mut().enumerate() {
            f(&format!("head.{i}.weight"), p.weight.data_mut(), p.grad_weight.data());
            f(&format!("head.{i}.bias"), &mut p.bias, &p.grad_bias);
        }
    }

    /// Parameter tensors in declaration order, flattened.
    pub fn tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            out.push(("attention.V".into(), a.v.data().to_vec()));
            out.push(("attention.U".into(), a.u.data().to_vec()));
            out.push(("attention.w".into(), a.w.clone()));
        }
        for (i, p) in self.head.linear_layers().enumerate() {
            out.push((format!("head.{i}.weight"), p.weight.data().to_vec()));
            out.push((format!("head.{i}.bias"), p.bias.clone()));
        }
        out
    }

    pub fn gradients(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            out.push(a.grad_v.data().to_vec());
            out.push(a.grad_u.data().to_vec());
            out.push(a.grad_w.clone());
        }
        for p in self.head.linear_layers() {
            out.push(p.grad_weight.data().to_vec());
            out.push(p.grad_bias.clone());
        }
        out
    }

    fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(a) = &mut self.attention {
            out.push(a.v.data_mut());
            out.push(a.u.data_mut());
            out.push(&mut a.w);
        }
        for p in self.head.linear_layers_mut() {
            out.push(p.weight.data_mut());
            out.push(&mut p.bias);
        }
        out
    }

    fn set_param_entry(&mut self, tensor: usize, index: usize, value: f64) {
        self.tensor_slices_mut()[tensor][index] = value;
    }

    /// Writes the checkpoint container to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Checkpoint layout (all integers little-endian):
    ///
    /// ```text
    /// magic      8 bytes  "SLDTCKPT"
    /// version    u8       1
    /// spec_len   u32      length of the canonical ModelSpec text
    /// spec       spec_len bytes, UTF-8
    /// n_tensors  u32
    /// per tensor: rows u32, cols u32, rows*cols f64
    /// ```
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let spec = self.spec.to_string();
        let mut out = Vec::with_capacity(32 + spec.len() + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.as_bytes());
        let shapes = self.spec.tensor_shapes();
        out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        for ((_, rows, cols), (_, values)) in shapes.iter().zip(self.tensors()) {
            out.extend_from_slice(&(*rows as u32).to_le_bytes());
            out.extend_from_slice(&(*cols as u32).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        let magic = cur.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad checkpoint magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let version = cur.take(1, "version")?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 8,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let spec_len = cur.u32("spec length")? as usize;
        let spec_offset = cur.pos;
        let spec_text = std::str::from_utf8(cur.take(spec_len, "model spec")?).map_err(|_| Error::Format {
            offset: spec_offset as u64,
            message: "model spec is not UTF-8".into(),
        })?;
        let spec: ModelSpec = spec_text.parse()?;
        let mut model = build_model(spec, 0)?;
        let shapes = spec.tensor_shapes();
        let mut slices = model.tensor_slices_mut();
        let count_offset = cur.pos;
        let n = cur.u32("tensor count")? as usize;
        if n != shapes.len() {
            return Err(Error::Format {
                offset: count_offset as u64,
                message: format!("expected {} tensors for `{spec}`, found {n}", shapes.len()),
            });
        }
        for (t, (name, rows, cols)) in shapes.iter().enumerate() {
            let shape_offset = cur.pos;
            let (r, c) = (cur.u32("tensor rows")? as usize, cur.u32("tensor cols")? as usize);
            if (r, c) != (*rows, *cols) {
                return Err(Error::Format {
                    offset: shape_offset as u64,
                    message: format!("tensor {name} is {r}x{c}, spec requires {rows}x{cols}"),
                });
            }
            for i in 0..r * c {
                let v_offset = cur.pos;
                let v = f64::from_le_bytes(cur.take(8, name)?.try_into().expect("8 bytes"));
                if !v.is_finite() {
                    return Err(Error::Format {
                        offset: v_offset as u64,
                        message: format!("non-finite value in {name}"),
                    });
                }
                slices[t][i] = v;
            }
        }
        drop(slices);
        if cur.pos != bytes.len() {
            return Err(Error::Format {
                offset: cur.pos as u64,
                message: format!("{} trailing bytes after last tensor", bytes.len() - cur.pos),
            });
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SLDTCKPT";
const CHECKPOINT_VERSION: u8 = 1;

pub(crate) struct ByteCursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!(
                "truncated while reading {what}: expected {} bytes, found {}",
                n,
                self.bytes.len().saturating_sub(self.pos)
            ),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Softmax cross-entropy of a model on one labeled bag. The bag entries are
/// exposed as a final `bag` tensor so input gradients get checked too.
pub struct ModelObjective {
    pub model: SlideModel,
    pub bag: SlideBag,
    pub target: usize,
}

impl Objective for ModelObjective {
    fn tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut t = self.model.tensors();
        t.push(("bag".into(), self.bag.features.data().to_vec()));
        t
    }

    fn set_entry(&mut self, tensor: usize, index: usize, value: f64) {
        if tensor == self.model.spec.tensor_shapes().len() {
            self.bag.features.data_mut()[index] = value;
        } else {
            self.model.set_param_entry(tensor, index, value);
        }
    }

    fn loss(&self) -> Result<f64> {
        Ok(softmax_cross_entropy(&self.model.forward(&self.bag)?, self.target)?.0)
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        self.model.zero_grad();
        let logits = self.model.forward_record(&self.bag)?;
        let (_, upstream) = softmax_cross_entropy(&logits, self.target)?;
        let grad_bag = self.model.backward(&upstream)?;
        let mut out = self.model.gradients();
        out.push(grad_bag.into_data());
        Ok(out)
    }
}

/// Margin kept between any ReLU pre-activation or max-pool runner-up and
/// its kink during gradient checks.
const KINK_MARGIN: f64 = 1e-3;

/// Moves the objective off non-differentiable points: hidden ReLU
/// pre-activations near zero get their bias nudged, and near-ties in a
/// max-pooled column get the winner raised.
pub fn nudge_off_kinks(obj: &mut ModelObjective) -> Result<()> {
    if obj.model.spec.aggregator == AggregatorKind::Max {
        let f = &mut obj.bag.features;
        for j in 0..f.cols() {
            let mut order: Vec<usize> = (0..f.rows()).collect();
            order.sort_by(|&a, &b| f.get(b, j).total_cmp(&f.get(a, j)));
            if order.len() > 1 {
                let (top, second) = (f.get(order[0], j), f.get(order[1], j));
                if top - second < KINK_MARGIN {
                    f.set(order[0], j, second + KINK_MARGIN);
                }
            }
        }
    }
    if let HeadKind::Mlp {
        activation: ActivationKind::Relu,
        ..
    } = obj.model.spec.head
    {
        let pooled = obj.model.pool(&obj.bag)?;
        let Some(Layer::Linear(first)) = obj.model.head.layers.first_mut() else {
            return Ok(());
        };
        let pre = linear_forward(first, &pooled)?;
        for (j, z) in pre.into_iter().enumerate() {
            if z.abs() < KINK_MARGIN {
                let target = if z >= 0.0 { KINK_MARGIN } else { -KINK_MARGIN };
                first.bias[j] += target - z;
            }
        }
    }
    Ok(())
}

/// Builds `spec` at `seed`, draws a random bag of `patches` rows and a
/// target, and runs the finite-difference check over every tensor.
pub fn gradcheck_spec(spec: ModelSpec, seed: u64, patches: usize, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut model = build_model(spec, seed)?;
    let mut r = rng::stream(seed, "gradcheck", &[]);
    // Zero biases leave the head at a special point; randomize them.
    for p in model.head.linear_layers_mut() {
        p.bias.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
    }
    let data = (0..patches * spec.input_dim).map(|_| r.random_range(-2.0..2.0)).collect();
    let bag = SlideBag::new("gradcheck", Matrix::new(patches, spec.input_dim, data)?)?;
    let target = r.random_range(0..spec.num_classes);
    let mut obj = ModelObjective { model, bag, target };
    nudge_off_kinks(&mut obj)?;
    finite_difference_check(&mut obj, step, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::check::{DEFAULT_STEP, DEFAULT_TOLERANCE};

    fn mlp_spec(act: ActivationKind, hidden: usize) -> ModelSpec {
        ModelSpec {
            aggregator: AggregatorKind::Mean,
            head: HeadKind::Mlp { hidden, activation: act },
            input_dim: 4,
            num_classes: 3,
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(build_model(ModelSpec::linear_probe(4, 3), 0).unwrap().param_count(), 15);
        assert_eq!(build_model(mlp_spec(ActivationKind::Relu, 8), 0).unwrap().param_count(), 67);
        assert_eq!(mlp_spec(ActivationKind::Relu, 8).param_count(), 67);
        // SwiGLU doubles the first layer's output width.
        assert_eq!(mlp_spec(ActivationKind::Swiglu, 8).param_count(), 4 * 16 + 16 + 8 * 3 + 3);
        let abmil = ModelSpec {
            aggregator: AggregatorKind::GatedAttention { hidden: 5 },
            ..ModelSpec::linear_probe(4, 3)
        };
        assert_eq!(build_model(abmil, 0).unwrap().param_count(), 2 * 5 * 4 + 5 + 15);
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        assert!(matches!(build_model(ModelSpec::linear_probe(4, 1), 0), Err(Error::Config(_))));
        assert!(matches!(build_model(ModelSpec::linear_probe(0, 3), 0), Err(Error::Config(_))));
        assert!(matches!(build_model(mlp_spec(ActivationKind::Gelu, 0), 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::simlp(16, 4);
        let a = build_model(spec, 9).unwrap();
        let b = build_model(spec, 9).unwrap();
        assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
        assert_ne!(a.to_checkpoint_bytes(), build_model(spec, 10).unwrap().to_checkpoint_bytes());
        for p in a.head().linear_layers() {
            let bound = 1.0 / (p.in_dim() as f64).sqrt();
            assert!(p.weight.data().iter().all(|w| w.abs() <= bound));
            assert!(p.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn spec_text_roundtrip() {
        for spec in [
            ModelSpec::simlp(64, 10),
            ModelSpec::abmil(1024, 2),
            ModelSpec::linear_probe(7, 3),
            mlp_spec(ActivationKind::Swiglu, 33),
        ] {
            assert_eq!(spec.to_string().parse::<ModelSpec>().unwrap(), spec);
        }
        assert!("agg=mean head=linear dim=4".parse::<ModelSpec>().is_err());
        assert!("agg=mean head=linear dim=4 classes=1".parse::<ModelSpec>().is_err());
    }

    #[test]
    fn zero_linear_head_predicts_class_zero() {
        let mut model = build_model(ModelSpec::linear_probe(3, 4), 0).unwrap();
        model.head_mut().linear_layers_mut().for_each(|p| p.weight.fill(0.0));
        let bag = SlideBag::new("z", Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(model.forward(&bag).unwrap(), vec![0.0; 4]);
        assert_eq!(model.predict(&bag).unwrap().0, 0);
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let model = build_model(ModelSpec::linear_probe(3, 2), 0).unwrap();
        let bag = SlideBag::new("z", Matrix::zeros(2, 4)).unwrap();
        assert!(matches!(model.forward(&bag), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_requires_forward() {
        let mut model = build_model(ModelSpec::simlp(3, 2), 0).unwrap();
        assert!(matches!(model.backward(&[0.0, 0.0]), Err(Error::State(_))));
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let model = build_model(ModelSpec::abmil(6, 3), 4).unwrap();
        let bytes = model.to_checkpoint_bytes();
        let back = SlideModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert_eq!(back.tensors(), model.tensors());

        let err = SlideModel::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SlideModel::from_checkpoint_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(SlideModel::from_checkpoint_bytes(&bad), Err(Error::Format { offset: 8, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(SlideModel::from_checkpoint_bytes(&extra).is_err());
    }

    #[test]
    fn small_models_pass_gradcheck() {
        let specs = [
            ModelSpec::linear_probe(5, 3),
            mlp_spec(ActivationKind::Relu, 7),
            mlp_spec(ActivationKind::Gelu, 7),
            mlp_spec(ActivationKind::Swiglu, 7),
            ModelSpec {
                aggregator: AggregatorKind::Max,
                ..mlp_spec(ActivationKind::Gelu, 6)
            },
            ModelSpec {
                aggregator: AggregatorKind::GatedAttention { hidden: 6 },
                ..ModelSpec::linear_probe(5, 3)
            },
        ];
        for spec in specs {
            for seed in 0..3 {
                let report = gradcheck_spec(spec, seed, 5, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
                assert!(report.passed(), "{spec} seed {seed}\n{report}");
            }
        }
    }
}
