//! Box-supervised domain adaptation for binary image segmentation.
//!
//! A network with a shared encoder and two heads is trained with full masks
//! in a source domain and bounding boxes in a target domain (positive-unlabeled
//! loss), then refined on the target domain with mixed pseudo-labels.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod grid;
pub mod losses;
pub mod segnet;
pub mod train;

pub use autodiff::{Graph, NodeId};
pub use error::{Error, Result};
pub use grid::{Grid, Real};
