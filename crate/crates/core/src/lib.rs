//! Preference-optimization laboratory on exactly computable softmax
//! policies.
//!
//! DPO-style losses are built as classification problems over implicit
//! rewards ([`losses`]), optionally with winner/loser mass-conservation
//! penalties ([`constraints`]), and trained by plain gradient descent
//! ([`trainer`]). [`oracle`] brute-forces the optimum sets of the pairwise
//! losses, and [`collapse`] reproduces probability collapse on a small
//! linear-feature instance.

pub mod collapse;
pub mod constraints;
pub mod data;
pub mod error;
pub mod losses;
pub mod math;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use constraints::{ConstraintSpec, Norm, Phi};
pub use data::{PreferenceRecord, RecordVariant};
pub use error::{Error, Result};
pub use losses::{LabelSpec, LossKind, Preset};
pub use model::{ModelPair, PolicyModel, PromptSpace};
pub use trainer::{train, Objective, PenaltyReduction, TrainConfig, TrainReport};
