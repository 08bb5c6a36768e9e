//! Image-quality metrics and per-horizon evaluation reports.

mod image;
mod report;

pub use image::{psnr, ssim, ssim_plane, PSNR_CAP, SSIM_WINDOW};
pub use report::{evaluate, evaluate_model, CopyLast, MetricsReport, Predictor};
