//! Oriented Gaussian heatmap label assignment for oriented object detection.
//!
//! The crate turns oriented-box annotations into multi-scale training
//! targets, scores predictions against them with a jointly weighted loss and
//! its analytic gradient, and decodes, suppresses and evaluates detections.

pub mod assign;
pub mod codec;
pub mod decode;
pub mod eval;
pub mod gaussian;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod report;
pub mod synth;

pub use assign::{generate_heatmaps, route_scale, AssignConfig, LabelTensorSet};
pub use codec::{decode_at, encode_at, ObbCode};
pub use decode::{decode_predictions, rotated_nms, Detection};
pub use eval::{average_precision, EvalReport};
pub use geometry::{canonicalize_obb, polygon_iou, Hbb, Obb, Point2};
pub use io::dota::ObbAnnotation;
pub use loss::{total_loss, LossBreakdown, LossConfig, PredictionTensorSet};
