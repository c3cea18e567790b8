//! Instance-aware projective warping, self-supervised photometric and
//! geometric losses, direct ego/object motion fitting, and video instance
//! annotation with tracking metrics.

// `!(x > 0.0)` is how NaN gets rejected together with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotate;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod instance;
pub mod losses;
pub mod optimizer;
pub mod raster;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, PointCloud, PoseSE3, RigidTransform};
pub use raster::{BinaryMask, DepthMap, Image, InconsistencyMap, Raster, ScalarMap};
