//! Hierarchical vulnerability-to-weakness classification by link prediction.
//!
//! A shared (Siamese) transformer encoder embeds CVE descriptions and CWE
//! definitions; a link head scores every (CVE, CWE) pair, a masked-LM
//! reconstruction decoder keeps the encoder's language context during link
//! training, and prediction descends the CWE hierarchy level by level with
//! per-level top-k budgets.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hierarchy;
pub mod link;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod tfidf;
pub mod tokenizer;
pub mod trainer;

pub use corpus::CveRecord;
pub use encoder::{EncoderConfig, Pooling};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use hierarchy::{CweDefinition, CweHierarchy, CweId, CweNode, KTriple, PredictionPath};
pub use link::{CombinationKind, LinkScore};
pub use model::{ModelConfig, V2wModel};
pub use trainer::TrainConfig;
