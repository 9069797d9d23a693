//! Test-time fitting of a dense affine field from features to metric height.
//!
//! A small head maps each stride cell's feature to a `(scale, shift)` pair;
//! the field is upsampled bilinearly and applied to the relative depth.

mod field;
mod head;
mod optimize;

pub use field::{compose_metric, predict_affine_field, AffineField};
pub use head::{HeadCache, ScaleShiftHead};
pub use optimize::{
    prepare_backbone, tta_optimize, AnchorObjective, AnchorPolicy, LossKind, StepRecord, TtaConfig, TtaMode, TtaOutcome,
};

pub use crate::features::{inject_lora, LoraAdapter};

#[cfg(test)]
mod tests;
