//! Synthetic crops with ground truth, labeled datasets and fold splits.

pub mod corpus;
pub mod dataset;
pub mod folds;
pub mod labels;
pub mod synth;

pub use corpus::{generate_corpus, plan_corpus, read_manifest, CorpusConfig, CorpusEntry};
pub use dataset::{load_dataset, Dataset, LabeledCrop};
pub use folds::{make_folds, FoldSplit};
pub use labels::derive_soft_label;
