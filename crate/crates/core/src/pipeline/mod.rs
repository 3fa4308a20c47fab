//! Toy detection pipeline: synthetic scenes, grid proposals, cheap rejection,
//! per-box network scoring, context fusion, box regression, greedy model
//! averaging and mAP evaluation.

pub mod boxes;
pub mod context;
pub mod data;
pub mod detect;
pub mod ensemble;
pub mod eval;
pub mod experiment;
pub mod proposals;
pub mod regress;
pub mod reject;
pub mod svm;

pub use boxes::{nms, BoundingBox};
pub use context::{context_refine, ContextModel, SceneClassifier};
pub use data::{
    crop_resize, generate_dataset, load_dataset, save_dataset, Annotation, Dataset, DatasetSpec, SyntheticScene,
};
pub use detect::{class_detections, ClassDetection, Detection, ScoreTable};
pub use ensemble::{greedy_ensemble, EnsembleSelection};
pub use eval::{evaluate_map, MapReport};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport, Variant};
pub use proposals::{grid_proposal_count, propose_boxes, propose_grid};
pub use regress::BoxRegressor;
pub use reject::{reject_boxes, rejection_recall, Rejector};
pub use svm::{LinearSvm, SvmConfig};
