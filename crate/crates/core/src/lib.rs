//! Contrastive two-tower pretraining with reference-model batch curation,
//! knowledge distillation, an equivalence oracle between the two, and
//! variance-based evaluation-subset selection.

pub mod curation;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod oracle;
pub mod stableeval;
pub mod trainer;

pub use error::{Error, Result};
