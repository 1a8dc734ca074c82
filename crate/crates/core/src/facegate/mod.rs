//! Face gating: Haar-cascade face detection over integral images, invalid-frame
//! rejection, and 64×64 normalized crops for the classifier.

mod cascade;
mod detect;
mod integral;

pub use cascade::{parse_cascade, Cascade, CascadeError, CascadeStage, HaarFeature, WeakClassifier, WeightedRect};
pub use detect::{
    detect_faces, detect_faces_with, detect_raw, evaluate_window, extract_and_normalize, gate_frame, group_boxes,
    scan_scales, sort_boxes, window_size, DetectParams, DetectionBox, Gate, PreprocessedFace, FACE_SIDE,
};
pub use integral::{compute_integral, IntegralImage};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FaceGateError {
    #[error("degenerate or out-of-bounds region {0:?}")]
    InvalidRegion(DetectionBox),
    #[error("invalid face tensor: {0}")]
    InvalidFace(String),
}

/// Loads a cascade from an XML file on disk.
pub fn load_cascade(path: impl AsRef<std::path::Path>) -> Result<Cascade, CascadeError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| CascadeError::Invalid(format!("{}: {e}", path.as_ref().display())))?;
    parse_cascade(&text)
}
