//! Backward passes, the operation tape, and the finite-difference checker.

pub mod check;
pub mod loss;
pub mod ops;
pub mod suite;
pub mod tape;

pub use check::{finite_diff_check, finite_diff_check_groups, GradCheckOptions, GradCheckReport, GroupCheck, GRADCHECK_SEED};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use suite::{check_backbone, BackboneCheck, GradScope, LAYER_SCOPES};
pub use tape::{GradTape, OpId};
