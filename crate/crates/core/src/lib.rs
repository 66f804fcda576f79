//! Image-sequence fingerprint liveness pipeline.
//!
//! The crate covers everything between a raw Bayer capture on disk and a
//! presentation-level detection metric: ingest and validation of frame
//! sequences and dataset manifests, bilinear debayering, classical minutiae
//! detection, minutiae-centered patch-sequence extraction, evaluation
//! protocols (known-material folds, leave-one-material-out splits,
//! TDR @ FDR), and a deterministic synthetic presentation generator used for
//! desk-scale verification.

pub mod demosaic;
pub mod evalproto;
pub mod ingest;
pub mod minutiae;
pub mod patchseq;
pub mod pnm;
pub mod synthgen;
pub(crate) mod util;

pub use demosaic::RgbFrame;
pub use ingest::{
    CoordSpace, FrameSequence, Label, Manifest, Minutia, MinutiaSet, PresentationRecord, RawFrame,
};
pub use minutiae::{DetectorParams, GrayImage, ReferenceSelection};
pub use patchseq::{ModelInput, PatchSequence};
