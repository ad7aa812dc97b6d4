//! PNG codec. Encoded values map linearly to [0,1]; no color management.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb};

use super::Image;
use crate::error::{Error, Result};

fn codec_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Codec {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads an 8- or 16-bit PNG. Gray inputs are replicated to RGB; alpha is dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    let reader = image::ImageReader::open(path)?.with_guessed_format()?;
    let decoded = reader.decode().map_err(codec_err(path))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<f32> = match decoded {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => decoded
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        other => other
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect(),
    };
    Image::new(w, h, data)
}

fn quantize(img: &Image, max: f32) -> impl Iterator<Item = f32> + '_ {
    img.data().iter().map(move |v| (v.clamp(0.0, 1.0) * max).round())
}

pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    let raw: Vec<u16> = quantize(img, 65535.0).map(|v| v as u16).collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(codec_err(path))
}

pub fn write_png8(path: &Path, img: &Image) -> Result<()> {
    let raw: Vec<u8> = quantize(img, 255.0).map(|v| v as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(codec_err(path))
}
