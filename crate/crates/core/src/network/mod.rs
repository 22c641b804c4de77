//! Config-driven construction and evaluation of the detector network.

mod config;
mod forward;
mod graph;
mod weights;

pub use config::{
    parse_config, scaled_yolov3_anchors, Anchor, BlockKind, NetworkConfig, StageSpec, ANCHORS_PER_SCALE,
    DARKNET53_STAGES, NUM_ANCHORS, NUM_STAGES, YOLOV3_ANCHORS,
};
pub use graph::{build_network, DetectSpec, HeadLayout, LayerGraph, Node, NodeKind, Section};
pub use weights::{init_weights, Weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};
