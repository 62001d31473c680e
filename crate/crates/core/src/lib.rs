//! Neural topic model trained with knowledge distillation from a document
//! reconstruction teacher, plus topic-quality metrics and cross-model topic
//! alignment.

pub mod align;
pub mod checkpoint;
pub mod corpus;
pub mod distill;
pub mod evalmetrics;
pub mod ntm;
pub mod numerics;
pub mod synthetic;
pub mod trainer;

pub use corpus::{load_corpus, load_corpus_dir, BowCorpus, BowDocument, Vocabulary};
pub use distill::{KdConfig, TeacherLogits};
pub use ntm::{ModelHyper, ModelParams};
pub use trainer::{train, TrainConfig};
