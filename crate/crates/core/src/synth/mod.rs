//! Deterministic synthetic scenes with paired radar and camera data, plus
//! dataset persistence.

mod dataset;
mod image;
mod render;
mod scene;

pub use dataset::{
    dataset_checksum, decode_boxes, decode_image, decode_radar, encode_boxes, encode_image, encode_radar, read_dataset, read_manifest,
    write_dataset, Dataset, DiskDataset, FrameEntry, FrameSource, Manifest, FORMAT_VERSION,
};
pub use image::Image;
pub use render::render_scene;
pub use scene::{frame_id, generate_frame, generate_frames, ClassProfile, Frame, FrameMeta, SceneConfig};
