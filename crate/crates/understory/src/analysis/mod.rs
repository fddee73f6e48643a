//! Image metrics, lighting diagnostics, HSV segmentation and the
//! stem-counting pipeline over exported point clouds.

pub mod hdbscan;
pub mod hsv;
pub mod lighting;
pub mod metrics;
pub mod stems;

pub use hdbscan::{hdbscan_cluster, HdbscanParams};
pub use hsv::{crop_points, hsv_box_segment, remove_foliage_points, rgb_to_hsv, HsvBox};
pub use lighting::{exposure_histogram, ExposureReport};
pub use metrics::{max_scales, msssim, msssim_scales, psnr, MSSSIM_WEIGHTS};
pub use stems::{stem_filter_and_merge, StemFilterConfig, StemRecord, StemReport};
