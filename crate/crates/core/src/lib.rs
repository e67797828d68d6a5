//! Slide-level classification over precomputed patch-embedding bags.
//!
//! A slide is a bag of patch embeddings. Models pool the bag into one vector
//! (mean, max or gated attention) and classify it with a linear or two-layer
//! MLP head. Everything runs in `f64` with hand-written backward passes.

pub mod aggregate;
pub mod data;
pub mod error;
pub mod gradcore;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod optim;
pub mod rng;

pub use aggregate::{AggregatorKind, SlideBag};
pub use error::{Error, ManifestError, Result};
pub use heads::{build_model, HeadKind, ModelSpec, SlideModel};
pub use optim::{train, LabeledBag, TrainConfig};
