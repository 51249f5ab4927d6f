use crate::error::{invalid, Result};
use crate::image::Image;

/// Reported in place of an infinite PSNR so CSV columns stay numeric.
pub const PSNR_CAP_DB: f64 = 120.0;

/// Peak signal-to-noise ratio in dB, `10 log10(peak^2 / mse)`, capped at
/// [`PSNR_CAP_DB`] when the images are identical.
pub fn psnr(reference: &Image, estimate: &Image, peak: f64) -> Result<f64> {
    psnr_with_cap(reference, estimate, peak, PSNR_CAP_DB)
}

pub fn psnr_with_cap(reference: &Image, estimate: &Image, peak: f64, cap: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(invalid(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = reference.mean_squared_distance(estimate)?;
    Ok(psnr_from_mse(mse, peak).min(cap))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
