//! Few-shot causal relation identification with prompt-based classifiers
//! and ensembles.

pub mod classifier;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod gateway;
pub mod prompting;
pub mod rng;
pub mod search;

pub use corpus::{ClassCounts, FewShotSplit, Label, LabeledCorpus, LabeledInstance};
pub use error::{Error, Result};
pub use evaluation::{ConfusionCounts, MetricsReport};
pub use prompting::{Template, Verbalizer};
