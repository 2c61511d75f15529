//! Training under label noise with random grouping and attention pooling.
//!
//! Training images that share a given label are stacked into groups; an
//! attention detector weights every spatial cell of each image's feature
//! map before pooling the group into one representation for a linear
//! classifier. A hinge regulariser on the detector's peak response pushes
//! it up on class groups and down on groups drawn from a negative pool. At
//! test time the network sees one image at a time.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod grouping;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
