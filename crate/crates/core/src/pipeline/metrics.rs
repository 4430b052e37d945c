use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Reported in place of +∞ for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Default display ceiling of [`error_map`].
pub const ERROR_MAP_CEILING: f64 = 0.25;

fn mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let n = a.as_slice().len() as f64;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::domain(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// `|a − b|` scaled so [`ERROR_MAP_CEILING`] maps to 1.
pub fn error_map<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<Image<T>> {
    error_map_with_ceiling(a, b, ERROR_MAP_CEILING)
}

pub fn error_map_with_ceiling<T: Scalar>(a: &Image<T>, b: &Image<T>, ceiling: f64) -> Result<Image<T>> {
    a.check_same_shape(b, "error map")?;
    if !(ceiling > 0.0) {
        return Err(Error::domain("error map ceiling must be positive"));
    }
    let c = T::lit(ceiling);
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| ((x - y).abs() / c).min(T::one()))
        .collect();
    Image::from_vec(a.width(), a.height(), data)
}
