//! On-disk formats: PGM images, JSON-lines annotations, `FOCI` weight files.

pub mod annotations;
pub mod pgm;
pub mod weights;

pub use annotations::{AnnotationBox, AnnotationRecord, Dataset};
pub use pgm::GrayImage;
pub use weights::WeightFile;
