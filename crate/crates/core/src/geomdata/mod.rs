//! Geometry-aware data handling: point clouds, neighborhood patches,
//! voxelization, resolution pyramids, synthetic flow generation, and
//! dataset manifests.
//!
//! The pipeline turns an unstructured velocity point cloud into cubic
//! velocity tensors suitable for the volumetric networks in
//! [`crate::netzoo`]:
//!
//! 1. partition the geometry into overlapping epsilon-ball patches,
//! 2. voxelize each patch onto a centroid grid whose resolution adapts
//!    to the local point density,
//! 3. resize every patch to a common resolution and build the
//!    coarse-to-fine training pairs,
//! 4. persist everything under a manifest so later stages can reload
//!    exactly the same data.

mod cloud;
mod manifest;
mod partition;
mod pyramid;
mod synth;
mod voxel;

pub use cloud::VelocityPointCloud;
pub use manifest::{
    build_dataset, DatasetBuildConfig, DatasetManifest, PatchRecord, PatchSidecar, Split,
};
pub use partition::partition_geometry;
pub use pyramid::{downsample_pyramid, PatchPair};
pub use synth::{degrade_to_4df, synth_flow, BiasField, FlowGeometry};
pub use voxel::{
    assign_velocities, epsilon_ball, make_grid, resize_nearest, Aabb, CentroidGrid,
    NeighborhoodPatch, VelocityTensor,
};
