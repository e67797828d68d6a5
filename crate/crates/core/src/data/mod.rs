//! Embedding files, manifests, splits and the synthetic corpus.

pub mod embedding;
pub mod manifest;
pub mod sampling;
pub mod synth;

pub use embedding::{decode_embedding, encode_embedding, read_embedding, read_embedding_header, write_embedding, Dtype, EmbeddingHeader};
pub use manifest::{DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use sampling::{few_shot_sample, split_by_cohort, split_hash, FewShotSample, TestSet, TransferSplits};
pub use synth::{generate_corpus, generate_synthetic_corpus, nearest_centroid_predict, write_corpus, SynthConfig, SyntheticCorpus, SyntheticSlide};
