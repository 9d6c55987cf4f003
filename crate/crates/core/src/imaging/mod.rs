//! Degradation, color conversion and image-quality metrics.

mod color;
mod metrics;
mod resize;

#[cfg(test)]
mod tests;

pub use color::{rgb_to_y, rgb_to_ycbcr, ycbcr_to_rgb};
pub use metrics::{
    epi_metrics, evaluate, mean_finite, per_sai_psnr, psnr, psnr_from_mse, ssim, ssim_window, ssim_with_window,
    MetricReport,
};
pub use resize::{bicubic_resize, bicubic_weights, cubic_kernel, resize_to, ResampleDirection, ResampleSpec};
