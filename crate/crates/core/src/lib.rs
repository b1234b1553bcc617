//! Context-aware detection, substrate classification, tracking and counting
//! of benthic animals in survey video.

pub mod annotations;
pub mod bbox;
pub mod dataset;
pub mod detector;
pub mod evaluate;
pub mod nn;
pub mod substrate;
pub mod synthgen;
pub mod tracker;

pub use annotations::{
    AnnotationError, CabofLabel, FrameGroundTruth, KeyframeBox, LabeledBox, SpeciesClass, Split,
    SubstrateClass, SubstrateInterval, SubstrateSet, VideoAnnotations,
};
pub use bbox::BBox;
pub use detector::{Detection, DetectionSample, Detector, DetectorConfig, LossBreakdown};
pub use evaluate::EvalReport;
pub use substrate::{SubstrateHyper, SubstratePrediction};
pub use synthgen::{generate_sequence, SceneConfig, SyntheticSequence};
pub use tracker::{count_cabof, run_pipeline, KalmanState, PipelineParams, Track, TrackStatus};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the canonical (key-sorted) JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("serializable config").to_string();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}
