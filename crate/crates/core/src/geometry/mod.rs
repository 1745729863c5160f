//! Camera projection, BEV discretization, frustum construction and the
//! splat-pooling kernel shared by both sensor streams.

mod camera;
mod grid;
mod splat;

pub use camera::{project_to_image, CameraModel, Projection, EGO_TO_CAMERA_AXES};
pub use grid::{BevGridSpec, DepthBinSpec, DepthSpacing};
pub use splat::{build_frustum, feature_pixel_center, splat_to_bev, Frustum, SplatMode, SplatPlan};
