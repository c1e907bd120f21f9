//! Scenario-criticality classifier.

pub mod graph;
pub mod model;
pub mod train;

pub use graph::{
    build_adjacency, node_features, rel_motion, sequence_from_log, time_to_collision, GraphSequence, SceneGraph,
    NUM_FEATURES, NUM_NODES,
};
pub use model::{loss_bce, CriticalityModel, ModelDims, Tensor};
pub use train::{classification_stats, label_criticality, train, ClassStats, LabeledSample, TrainConfig, TrainOutcome};
