//! Radar point clouds, pillarization and the radar BEV stream.

pub mod cloud;
pub mod encoder;
pub mod pillars;

pub use cloud::{RadarChannel, RadarPointCloud, RadarSchema};
pub use encoder::{RadarBevEncoder, RadarStream, RadarStreamConfig, RADAR_BEV_STRIDE};
pub use pillars::{decoration_width, pillarize, scatter_rows, PillarBatch, PillarConfig, PillarFeatureNet};
