//! Differentiable fitting of a deformable template mesh to segmentation
//! volumes and sparse slice stacks.
//!
//! The pipeline: a canonical closed surface is deformed by a low-dimensional
//! spectral basis (eigenvectors of a mixed graph Laplacian), scored against
//! labeled voxel data through a smooth winding-number occupancy field, and
//! optimized with Adam under shape-regularity and wall-thickness penalties.

pub mod dvs;
pub mod error;
pub mod fit;
pub mod losses;
pub mod mesh;
pub mod obj;
pub mod oracle;
pub mod spectral;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use mesh::{good_angle_ratio, quality_report, MeshQualityReport, TriMesh};
