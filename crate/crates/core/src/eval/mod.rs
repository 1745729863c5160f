//! Rotated-IoU average precision, the corridor RoI, image-noise failure test
//! and the resolution sweep.

mod ap;
mod ft;
mod noise;
mod records;
mod roi;
mod sweep;

pub use ap::{ap_from_ranked, average_precision, evaluate, ApMode, EvalConfig, EvalFrame, IouKind, Metrics};
pub use ft::{detect_frames, evaluate_detector, evaluate_with_images, failure_test, ft_csv, mean_std, Detector, FtConfig, FtReport, FtRow};
pub use noise::{inject_noise, noise_field, NoiseSpec, DEFAULT_SIGMA};
pub use records::{format_detections, parse_detections};
pub use roi::{roi_filter, Roi};
pub use sweep::{delta_pct, scaled_size, sweep_csv, sweep_resolution, SweepRow, DEFAULT_SCALES};
