//! AdamW and the per-slide training loop.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregate::SlideBag;
use crate::error::{Error, Result};
use crate::gradcore::softmax_cross_entropy;
use crate::heads::SlideModel;
use crate::metrics::balanced_accuracy;
use crate::rng;

/// Optimizer and schedule settings. Defaults: AdamW, lr 1e-4, betas
/// (0.9, 0.98), weight decay 1e-4, batch size 1, 20 epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Re-evaluates balanced accuracy on the training split after each epoch.
    #[serde(default)]
    pub track_train_accuracy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 1e-4,
            epsilon: 1e-8,
            epochs: 20,
            batch_size: 1,
            seed: 0,
            track_train_accuracy: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "only per-slide updates (batch size 1) are supported, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// First/second moment buffers per parameter tensor plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

/// One AdamW update of a single tensor at (already incremented) step `t`:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
pub fn adamw_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, config: &TrainConfig) {
    let c1 = 1.0 - config.beta1.powi(t as i32);
    let c2 = 1.0 - config.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= config.learning_rate * (m_hat / (v_hat.sqrt() + config.epsilon) + config.weight_decay * params[i]);
    }
}

/// Applies one AdamW step to every parameter of `model` from its gradient
/// buffers. Non-finite gradients abort before anything is modified.
pub fn adamw_step(model: &mut SlideModel, state: &mut OptimizerState, config: &TrainConfig) -> Result<()> {
    let mut bad = None;
    let mut sizes = Vec::new();
    model.for_each_param(|name, values, grads| {
        if bad.is_none() {
            if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
                bad = Some(format!("gradient of {name}[{i}]"));
            }
        }
        sizes.push(values.len());
    });
    if let Some(what) = bad {
        return Err(Error::NonFinite(what));
    }
    if state.first_moment.is_empty() {
        state.first_moment = sizes.iter().map(|&n| vec![0.0; n]).collect();
        state.second_moment = sizes.iter().map(|&n| vec![0.0; n]).collect();
    } else if state.first_moment.iter().map(Vec::len).ne(sizes.iter().copied()) {
        return Err(Error::State("optimizer state does not match model parameters".into()));
    }
    state.step += 1;
    let t = state.step;
    let mut k = 0;
    model.for_each_param(|_, values, grads| {
        adamw_update(values, grads, &mut state.first_moment[k], &mut state.second_moment[k], t, config);
        k += 1;
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBag {
    pub bag: SlideBag,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_bal_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    /// `epoch,mean_loss,train_bal_acc` with one row per epoch.
    pub fn loss_trace_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,train_bal_acc\n");
        for e in &self.epochs {
            let acc = e.train_bal_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
            writeln!(out, "{},{:.10},{}", e.epoch, e.mean_loss, acc).expect("write to string");
        }
        out
    }
}

/// Slide visiting order for `epoch`: a shuffle keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut order, &mut rng::stream(seed, "epoch-order", &[epoch as u64]));
    order
}

/// Trains with one AdamW step per slide, reshuffling every epoch, at a
/// constant learning rate. The final-epoch parameters are kept.
pub fn train(model: &mut SlideModel, data: &[LabeledBag], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let k = model.spec().num_classes;
    for item in data {
        if item.label >= k {
            return Err(Error::Config(format!(
                "slide `{}` has label {} but the model has {k} classes",
                item.bag.slide_id, item.label
            )));
        }
        if item.bag.dim() != model.spec().input_dim {
            return Err(Error::shape(
                "train",
                format!("patches of dim {}", model.spec().input_dim),
                format!("slide `{}` with dim {}", item.bag.slide_id, item.bag.dim()),
            ));
        }
    }
    let mut state = OptimizerState::default();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for idx in epoch_order(data.len(), config.seed, epoch) {
            let item = &data[idx];
            model.zero_grad();
            let logits = model.forward_record(&item.bag)?;
            let (loss, grad) = softmax_cross_entropy(&logits, item.label)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    slide: item.bag.slide_id.clone(),
                    loss,
                });
            }
            model.backward_params(&grad)?;
            adamw_step(model, &mut state, config).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, slide `{}`)", item.bag.slide_id)),
                other => other,
            })?;
            total += loss;
        }
        let train_bal_acc = if config.track_train_accuracy {
            let preds = data.iter().map(|d| model.predict(&d.bag).map(|p| p.0)).collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
            Some(balanced_accuracy(&labels, &preds, k)?.value)
        } else {
            None
        };
        epochs.push(EpochStats {
            epoch,
            mean_loss: total / data.len() as f64,
            train_bal_acc,
        });
    }
    Ok(TrainOutcome {
        epochs,
        steps: state.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Matrix;
    use crate::heads::{build_model, ModelSpec};

    #[test]
    fn defaults_match_the_reference_configuration() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.beta1, c.beta2, c.weight_decay), (1e-4, 0.9, 0.98, 1e-4));
        assert_eq!((c.epochs, c.batch_size, c.epsilon), (20, 1, 1e-8));
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { beta2: -0.1, ..Default::default() },
            TrainConfig { batch_size: 4, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn first_step_from_zero() {
        // m̂ = v̂ = 1 after bias correction, so the step is lr / (1 + ε).
        let c = TrainConfig::default();
        let (mut p, mut m, mut v) = (vec![0.0], vec![0.0], vec![0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, &c);
        assert!((p[0] - (-9.999_999_900_000_001e-5)).abs() < 1e-18, "{}", p[0]);
    }

    #[test]
    fn zero_gradient_fixed_points() {
        let c = TrainConfig::default();
        let (mut p, mut m, mut v) = (vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]);
        adamw_update(&mut p, &[0.0; 3], &mut m, &mut v, 1, &c);
        assert_eq!(p, vec![0.0; 3]);

        let c = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![1.5, -2.0, 0.25];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        for t in 1..=5 {
            adamw_update(&mut p, &[0.0; 3], &mut m, &mut v, t, &c);
        }
        assert_eq!(p, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut model = build_model(ModelSpec::linear_probe(2, 2), 0).unwrap();
        let before = model.tensors();
        model.head_mut().linear_layers_mut().next().unwrap().grad_bias[1] = f64::NAN;
        let err = adamw_step(&mut model, &mut OptimizerState::default(), &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("head.0.bias[1]"), "{err}");
        assert_eq!(model.tensors(), before);
    }

    fn toy_data() -> Vec<LabeledBag> {
        (0..6)
            .map(|i| LabeledBag {
                bag: SlideBag::new(format!("s{i}"), Matrix::from_rows(&[vec![i as f64 - 2.5, 1.0], vec![0.5, -(i as f64)]]).unwrap()).unwrap(),
                label: i % 2,
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leaves_parameters_untouched() {
        let mut model = build_model(ModelSpec::simlp(2, 2), 3).unwrap();
        let before = model.to_checkpoint_bytes();
        let out = train(&mut model, &toy_data(), &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(model.to_checkpoint_bytes(), before);
        assert_eq!(out.steps, 0);
        assert!(out.epochs.is_empty());
    }

    #[test]
    fn step_count_is_epochs_times_slides() {
        let mut model = build_model(ModelSpec::linear_probe(2, 2), 0).unwrap();
        let out = train(&mut model, &toy_data(), &TrainConfig { epochs: 3, ..Default::default() }).unwrap();
        assert_eq!(out.steps, 18);
        assert_eq!(out.epochs.len(), 3);
    }

    #[test]
    fn empty_split_and_bad_labels_are_rejected() {
        let mut model = build_model(ModelSpec::linear_probe(2, 2), 0).unwrap();
        assert!(matches!(train(&mut model, &[], &TrainConfig::default()), Err(Error::Config(_))));
        let mut data = toy_data();
        data[0].label = 5;
        assert!(matches!(train(&mut model, &data, &TrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_orders_are_seeded_permutations() {
        let a = epoch_order(10, 1, 0);
        assert_eq!(a, epoch_order(10, 1, 0));
        assert_ne!(a, epoch_order(10, 1, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn loss_trace_csv_layout() {
        let out = TrainOutcome {
            epochs: vec![
                EpochStats { epoch: 0, mean_loss: 0.5, train_bal_acc: None },
                EpochStats { epoch: 1, mean_loss: 0.25, train_bal_acc: Some(1.0) },
            ],
            steps: 2,
        };
        assert_eq!(out.loss_trace_csv(), "epoch,mean_loss,train_bal_acc\n0,0.5000000000,\n1,0.2500000000,1.000000\n");
    }
}
