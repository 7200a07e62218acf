//! Flow-supervised depth and pose recovery for indoor scenes.

pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod matching;
pub mod optim;
pub mod pnp;
pub mod propagation;
pub mod raster;
pub mod recon;
pub mod rotfilter;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{Homography, Intrinsics, PoseSE3};
pub use raster::{DepthMap, FlowField, Image, ValidityMask};
