//! Sentence-pair embeddings from partially labeled data.
//!
//! A weight-shared dual encoder is trained with a supervised cross-entropy
//! objective on the labeled pairs plus a class-prior-corrected risk estimate
//! over the unlabeled pool, ramped in by a polynomial annealing schedule.
//! Everything runs on a small define-by-run reverse-mode autodiff engine in
//! 64-bit floats, so training is deterministic given a seed.

pub mod data;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod tensor;
pub mod trainer;

pub use data::{Batch, DatasetMode, PUDataset, SentencePair, SynthKind, SynthSpec, SyntheticPopulation};
pub use encoder::{DualEncoderModel, ModelConfig, SentenceEmbedding, Tokenizer};
pub use graph::{Graph, GraphError, NodeId};
pub use losses::{AnnealSchedule, ClassPriors, RiskBreakdown, Sign};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainRun, TrainState};
