//! Anchors, box coding, head, target assignment, losses and NMS.

mod anchors;
mod boxes;
mod head;
mod losses;
mod nms;
mod targets;

pub use anchors::{apply_direction, decode, dir_target, encode, AnchorSpec, Anchors, ClassSpec, BOX_CODE_SIZE};
pub use boxes::{bev_intersection, bev_iou, iou_3d, limit_period, wrap_angle, Box3D};
pub use head::{BevEncoder, BevEncoderConfig, DetectionHead, HeadOutput, HeadTensors};
pub use losses::{compute_losses, DetectionLosses, LossConfig};
pub use nms::{decode_and_nms, rotated_nms, DecodeConfig};
pub use targets::{assign_targets, Label, Targets};
