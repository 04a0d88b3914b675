//! Two-branch segmentation model: per-modality networks, their source, fast
//! and slow roles, prediction fusion and checkpoints.

pub mod branch;
pub mod checkpoint;
pub mod multimodal;

pub use branch::{Architecture, BranchNet, Linear, Role};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use multimodal::{
    ensemble_eval, fuse_slow_fast, momentum_update, parameter_budget, BranchSet, BudgetReport,
    Modality, MultiModalModel,
};
