//! Motion features, camera compensation and frame matching.

mod features;
mod flow;
mod similarity;

pub use features::{
    frame_difference, make_feature, FeatureKind, FeatureStack, MotionFeatureConfig,
};
pub use flow::{
    estimate_flow, estimate_flow_traced, estimate_flow_with, flow_magnitude, flow_objective,
    FlowField, FlowParams,
};
pub use similarity::{
    apply_compensation, compensate_camera, estimate_similarity, estimate_similarity_with,
    frame_distance, match_frame, RegistrationParams, MIN_MATCH_OVERLAP,
};
