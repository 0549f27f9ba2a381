//! Green-channel illumination and contrast normalization.
//!
//! The background is estimated with a large median filter and subtracted;
//! the residual is then standardized and mapped onto fixed target
//! statistics. Red and blue are left untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{median_filter, median_window_for_height, Plane, RgbImage};

/// Residual standard deviations below this are treated as a constant image.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub mu_ref: f64,
    pub sigma_ref: f64,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        Self {
            mu_ref: 0.5,
            sigma_ref: 0.1,
        }
    }
}

impl NormalizationParams {
    pub fn new(mu_ref: f64, sigma_ref: f64) -> Result<Self> {
        if !(sigma_ref > 0.0) || !mu_ref.is_finite() || !sigma_ref.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "normalization needs finite mu and sigma > 0, got ({mu_ref}, {sigma_ref})"
            )));
        }
        Ok(Self { mu_ref, sigma_ref })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedPlane {
    pub plane: Plane,
    /// The background-subtracted image had (numerically) zero spread.
    pub degenerate: bool,
}

/// Normalizes one plane: subtract the median background, standardize, then
/// rescale to `params`. The output is not clipped.
pub fn normalize_plane(input: &Plane, params: NormalizationParams) -> Result<NormalizedPlane> {
    let k = median_window_for_height(input.height());
    let background = median_filter(input, k)?;
    let residual = Plane::new(
        input.width(),
        input.height(),
        input
            .data()
            .iter()
            .zip(background.data())
            .map(|(v, b)| v - b)
            .collect(),
    )?;
    let mu = residual.mean();
    let sigma = residual.std_dev();
    if sigma < DEGENERATE_STD {
        return Ok(NormalizedPlane {
            plane: Plane::filled(input.width(), input.height(), params.mu_ref),
            degenerate: true,
        });
    }
    let plane = residual.map(|v| (v - mu) / sigma * params.sigma_ref + params.mu_ref);
    Ok(NormalizedPlane {
        plane,
        degenerate: false,
    })
}

pub fn normalize_green(img: &RgbImage, params: NormalizationParams) -> Result<NormalizedPlane> {
    normalize_plane(&img.green, params)
}

/// Replaces the green plane with its normalized version.
pub fn prepare_channels(img: &RgbImage, params: NormalizationParams) -> Result<RgbImage> {
    let green = normalize_green(img, params)?.plane;
    RgbImage::new(img.red.clone(), green, img.blue.clone())
}
