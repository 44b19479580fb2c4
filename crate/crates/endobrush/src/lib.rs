//! Per-vertex neural texturing for tubular anatomy meshes.

pub mod camera;
pub mod checkpoint;
pub mod cli;
pub mod color;
pub mod config;
pub mod eval;
pub mod features;
pub mod fixture;
pub mod heatmap;
pub mod img;
pub mod mesh;
pub mod mock;
pub mod optim;
pub mod raster;
pub mod skeleton;
pub mod texture;
pub mod trainer;
pub mod workspace;

pub use camera::{CameraPose, Intrinsics};
pub use img::{ColorSpace, Image};
pub use mesh::TriMesh;
pub use skeleton::SkeletonGraph;
