//! Rule-based exposure fusion in the style of Mertens et al.: each input is
//! weighted per pixel by contrast, saturation and well-exposedness, and the
//! inputs are blended band by band in a Laplacian pyramid.
//!
//! This is the non-trainable lower level of the training loop. It produces
//! pseudo-labels either from the captured sequence alone or from the union of
//! the captured sequence and the model's current corrections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{
    gaussian_pyramid, laplacian_pyramid, luminance, reconstruct, Image, LumaMap, Pyramid, Raster,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionParams {
    pub exp_contrast: f64,
    pub exp_saturation: f64,
    pub exp_wellexposed: f64,
    pub sigma_well: f64,
    pub eps_weight: f64,
    /// Pyramid depth; `None` selects floor(log2(min dimension)).
    pub levels: Option<usize>,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            exp_contrast: 1.0,
            exp_saturation: 1.0,
            exp_wellexposed: 1.0,
            sigma_well: 0.2,
            eps_weight: 1e-12,
            levels: None,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("fusion: {what}")));
        if !(self.exp_contrast >= 0.0 && self.exp_saturation >= 0.0 && self.exp_wellexposed >= 0.0)
        {
            return bad("exponents must be >= 0");
        }
        if !(self.sigma_well > 0.0) {
            return bad("sigma_well must be > 0");
        }
        if !(self.eps_weight > 0.0) {
            return bad("eps_weight must be > 0");
        }
        if self.levels == Some(0) {
            return bad("levels must be >= 1");
        }
        Ok(())
    }

    /// Pyramid depth used for a `width x height` input.
    pub fn levels_for(&self, width: usize, height: usize) -> usize {
        self.levels
            .unwrap_or_else(|| (width.min(height).max(1).ilog2() as usize).max(1))
    }
}

/// Per-input weight maps that sum to one at every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStack {
    pub maps: Vec<LumaMap<f64>>,
}

/// Unnormalized Mertens weight of every pixel.
pub fn quality_measures(img: &Image, p: &FusionParams) -> LumaMap<f64> {
    let img = img.convert::<f64>();
    let lum = luminance(&img);
    let (w, h) = img.dims();
    let two_sigma2 = 2.0 * p.sigma_well * p.sigma_well;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let centre = lum.pixel(x, y)[0];
            let lap = lum.pixel_clamped(xi - 1, yi)[0]
                + lum.pixel_clamped(xi + 1, yi)[0]
                + lum.pixel_clamped(xi, yi - 1)[0]
                + lum.pixel_clamped(xi, yi + 1)[0]
                - 4.0 * centre;
            let contrast = lap.abs();

            let [r, g, b] = img.pixel(x, y);
            let mu = (r + g + b) / 3.0;
            let saturation =
                (((r - mu).powi(2) + (g - mu).powi(2) + (b - mu).powi(2)) / 3.0).sqrt();

            let well: f64 = [r, g, b]
                .iter()
                .map(|v| (-(v - 0.5).powi(2) / two_sigma2).exp())
                .product();

            let weight = (contrast + p.eps_weight).powf(p.exp_contrast)
                * saturation.powf(p.exp_saturation)
                * well.powf(p.exp_wellexposed)
                + p.eps_weight;
            out.push(weight);
        }
    }
    Raster::from_parts(w, h, out)
}

pub fn normalize(weights: &[LumaMap<f64>]) -> Result<WeightStack> {
    let first = weights.first().ok_or(Error::EmptyInput)?;
    for m in &weights[1..] {
        first.check_same_dims(m)?;
    }
    let (w, h) = first.dims();
    let mut maps: Vec<Vec<f64>> = vec![Vec::with_capacity(w * h); weights.len()];
    for i in 0..w * h {
        let total: f64 = weights.iter().map(|m| m.data()[i]).sum();
        for (dst, m) in maps.iter_mut().zip(weights) {
            dst.push(m.data()[i] / total);
        }
    }
    Ok(WeightStack {
        maps: maps
            .into_iter()
            .map(|d| Raster::from_parts(w, h, d))
            .collect(),
    })
}

/// Pyramid-blended fusion before the final clamp. Exposed so callers can
/// inspect ringing overshoot.
pub fn fuse_unclamped(seq: &[Image], p: &FusionParams) -> Result<Image<f64>> {
    p.validate()?;
    let first = seq.first().ok_or(Error::EmptyInput)?;
    for img in &seq[1..] {
        first.check_same_dims(img)?;
    }
    let (w, h) = first.dims();
    let levels = p.levels_for(w, h);
    crate::raster::pyramid::check_levels(levels, w, h)?;

    let raw: Vec<LumaMap<f64>> = seq.iter().map(|img| quality_measures(img, p)).collect();
    let stack = normalize(&raw)?;

    let mut blended: Option<Vec<Vec<f64>>> = None;
    let mut dims: Vec<(usize, usize)> = Vec::new();
    for (img, weight) in seq.iter().zip(&stack.maps) {
        let lap = laplacian_pyramid(&img.convert::<f64>(), levels)?;
        let gw = gaussian_pyramid(weight, levels)?;
        let acc = blended.get_or_insert_with(|| {
            dims = lap.levels.iter().map(|l| l.dims()).collect();
            lap.levels.iter().map(|l| vec![0.0; l.data().len()]).collect()
        });
        for (k, (band, wl)) in lap.levels.iter().zip(&gw.levels).enumerate() {
            let dst = &mut acc[k];
            for (px, (rgb, wv)) in band.data().chunks_exact(3).zip(wl.data()).enumerate() {
                for c in 0..3 {
                    dst[px * 3 + c] += wv * rgb[c];
                }
            }
        }
    }
    let bands = blended
        .expect("at least one input")
        .into_iter()
        .zip(dims)
        .map(|(data, (bw, bh))| Raster::from_parts(bw, bh, data))
        .collect();
    reconstruct(&Pyramid { levels: bands })
}

pub fn fuse(seq: &[Image], p: &FusionParams) -> Result<Image> {
    Ok(fuse_unclamped(seq, p)?.clamp(0.0, 1.0).convert())
}

/// Lower-level pseudo-label. Without corrections this is plain fusion of the
/// captured sequence; with corrections it fuses the 2N-image union.
pub fn make_pseudo_label(
    inputs: &[Image],
    corrected: Option<&[Image]>,
    p: &FusionParams,
) -> Result<Image> {
    let first = inputs.first().ok_or(Error::EmptyInput)?;
    match corrected {
        None => fuse(inputs, p),
        Some(corr) => {
            if corr.len() != inputs.len() {
                return Err(Error::DimensionMismatch(
                    (inputs.len(), 1),
                    (corr.len(), 1),
                ));
            }
            for img in corr {
                first.check_same_dims(img)?;
            }
            let union: Vec<Image> = inputs.iter().chain(corr).cloned().collect();
            fuse(&union, p)
        }
    }
}
