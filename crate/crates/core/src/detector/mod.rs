//! Miniature three-head anchor-based detector and its losses.

pub mod blocks;
pub mod checkpoint;
pub mod cost;
pub mod decode;
pub mod loss;
pub mod model;
pub mod params;

pub use decode::{decode, decode_and_nms, nms};
pub use loss::{
    assign_targets, detection_loss, total_loss, Assignment, LossBreakdown, LossConfig, LossGains,
    MflMode,
};
pub use model::{AnchorGrid, Detector, ModelConfig, NeckVariant, ANCHORS_PER_LEVEL, STRIDES};
pub use params::{BnState, ForwardCtx, ParamKind, ParamSet};
