//! Camera stream with radar-augmented depth lifting.

pub mod depth_map;
pub mod image;
pub mod stream;

pub use depth_map::{build_radar_depth_map, RadarDepthMap};
pub use image::{ImageEncoder, ImageEncoderSpec};
pub use stream::{expected_bev_mass, DepthContext, DepthContextHead, RadarDepthTransform, RdlConfig, RdlOutput, RdlStream, RADAR_DEPTH_FEATURES};
