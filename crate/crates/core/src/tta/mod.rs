//! Adaptation objectives, pseudo-label refinement and the per-batch step.

pub mod config;
pub mod losses;
pub mod pseudo;
pub mod step;

pub use config::{AdaptationConfig, Method};
pub use losses::LossTerm;
pub use pseudo::PseudoLabelSet;
pub use step::{adapt_step, intra_pg, IntraPg, StepReport};
