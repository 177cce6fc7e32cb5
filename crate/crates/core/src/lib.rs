//! Post-processing for document layout detectors: text-cell box refinement,
//! weighted box fusion, COCO-style evaluation with per-document-category
//! means, ensemble hyperparameter search and synthetic layout generation.

pub mod error;
pub mod eval;
pub mod fuse;
pub mod geom;
pub mod ingest;
pub mod refine;
pub mod synthgen;
pub mod tune;

pub use error::{Error, Result};
pub use geom::{BBox, CategoryMap, Detection, LayoutCategory, PageId, TextCell};
pub use ingest::{CellSet, GroundTruthSet, PredictionSet, ScaleTable};
