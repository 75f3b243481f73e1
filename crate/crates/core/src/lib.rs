//! Form structure extraction as typed parent prediction.
//!
//! Every basic unit of a form (text line, text widget, choice widget) gets a
//! parent unit and a relation type from one shared label space. Decoding the
//! parent scores with a maximum spanning arborescence yields a forest whose
//! trees are key-value pairs, choice groups, and entities, possibly nested.

pub mod arbor;
pub mod corpus;
pub mod doc_model;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod proposer;
pub mod rel_decoder;
pub mod trainer;

pub use error::{Error, Result};

pub use arbor::{decode, Decoded, ScoreMode};
pub use corpus::{Corpus, GenConfig, LabeledDoc, RawCorpus};
pub use doc_model::{Document, Forest, RelationLabelSet, UnifiedLabels};
pub use metrics::CorpusReport;
pub use model::{Model, ModelConfig, Prediction};
pub use trainer::TrainConfig;
