//! Planar float rasters and the primitives the rest of the crate builds on:
//! luminance, global statistics, and binomial Gaussian/Laplacian pyramids.
//!
//! Storage is row-major with `C` interleaved channels. [`Image`] is the
//! three-channel RGB carrier, [`LumaMap`] the single-channel one. Both default
//! to `f32` samples; the training path instantiates them with `f64`.

mod png;
pub(crate) mod pyramid;

pub use self::png::{read_png, write_png16, write_png8};
pub use self::pyramid::{
    blur, decimate, gaussian_pyramid, laplacian_pyramid, reconstruct, upsample, Pyramid,
};

use crate::error::{Error, Result};

/// Rec.709 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Scalar sample type a raster can hold.
pub trait Sample: Copy + Default + PartialEq + PartialOrd + Send + Sync + std::fmt::Debug + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Sample for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Sample for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Row-major raster with `C` interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T, const C: usize> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Three-channel RGB raster, nominal range [0,1].
pub type Image<T = f32> = Raster<T, 3>;
/// Single-channel raster.
pub type LumaMap<T = f32> = Raster<T, 1>;

impl<T: Sample, const C: usize> Raster<T, C> {
    /// Wraps a buffer after checking its length and that every value is finite.
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyRaster { width, height });
        }
        if data.len() != width * height * C {
            return Err(Error::BufferSize {
                width,
                height,
                channels: C,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.to_f64().is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Internal constructor for buffers produced by finite arithmetic.
    pub(crate) fn from_parts(width: usize, height: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), width * height * C);
        debug_assert!(width > 0 && height > 0);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: [T; C]) -> Self {
        assert!(width > 0 && height > 0, "raster must be at least 1x1");
        let mut data = Vec::with_capacity(width * height * C);
        for _ in 0..width * height {
            data.extend_from_slice(&value);
        }
        Self::from_parts(width, height, data)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [T::default(); C])
    }

    /// Builds a raster by evaluating `f(x, y)` for every pixel.
    ///
    /// Panics if `f` produces a non-finite value.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [T; C]) -> Self {
        assert!(width > 0 && height > 0, "raster must be at least 1x1");
        let mut data = Vec::with_capacity(width * height * C);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        assert!(
            data.iter().all(|v| v.to_f64().is_finite()),
            "from_fn produced a non-finite sample"
        );
        Self::from_parts(width, height, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [T; C] {
        let i = (y * self.width + x) * C;
        let mut out = [T::default(); C];
        out.copy_from_slice(&self.data[i..i + C]);
        out
    }

    /// Pixel lookup with coordinates clamped to the raster (edge replicate).
    #[inline]
    pub fn pixel_clamped(&self, x: isize, y: isize) -> [T; C] {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.pixel(cx, cy)
    }

    pub fn pixels(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(C)
    }

    /// Converts each sample to another sample type.
    pub fn convert<U: Sample>(&self) -> Raster<U, C> {
        Raster::from_parts(
            self.width,
            self.height,
            self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        )
    }

    /// Applies `f` to every sample.
    ///
    /// Panics if `f` produces a non-finite value.
    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        let data: Vec<T> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.to_f64().is_finite()));
        Self::from_parts(self.width, self.height, data)
    }

    /// Clamps every sample to [lo, hi].
    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| T::from_f64(v.to_f64().clamp(lo, hi)))
    }

    /// Mean over every sample.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum::<f64>() / self.data.len() as f64
    }

    /// Largest absolute sample difference.
    pub fn max_abs_diff<U: Sample>(&self, other: &Raster<U, C>) -> Result<f64> {
        self.check_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Mean absolute sample difference.
    pub fn mean_abs_diff<U: Sample>(&self, other: &Raster<U, C>) -> Result<f64> {
        self.check_same_dims(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn check_same_dims<U: Sample, const D: usize>(&self, other: &Raster<U, D>) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(self.dims(), other.dims()));
        }
        Ok(())
    }
}

impl<T: Sample> Image<T> {
    /// Linear combination `a*self + b*other`.
    pub fn lin_comb(&self, a: f64, other: &Image<T>, b: f64) -> Result<Image<T>> {
        self.check_same_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| T::from_f64(a * x.to_f64() + b * y.to_f64()))
            .collect();
        Raster::new(self.width, self.height, data)
    }
}

#[inline]
pub fn luma_of(rgb: [f64; 3]) -> f64 {
    LUMA_WEIGHTS[0] * rgb[0] + LUMA_WEIGHTS[1] * rgb[1] + LUMA_WEIGHTS[2] * rgb[2]
}

/// Per-pixel Rec.709 luma.
pub fn luminance<T: Sample>(img: &Image<T>) -> LumaMap<T> {
    let data = img
        .pixels()
        .map(|p| T::from_f64(luma_of([p[0].to_f64(), p[1].to_f64(), p[2].to_f64()])))
        .collect();
    Raster::from_parts(img.width(), img.height(), data)
}

/// Ten global descriptors of an image, in this order: mean luminance,
/// luminance std, luminance p5/p25/p50/p75/p95, mean R, mean G, mean B.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatsVector(pub [f64; StatsVector::LEN]);

impl StatsVector {
    pub const LEN: usize = 10;

    pub fn mean_luminance(&self) -> f64 {
        self.0[0]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 * n)`, with rank clamped to [1, n].
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn global_stats<T: Sample>(img: &Image<T>) -> StatsVector {
    let n = img.pixel_count() as f64;
    let mut lum: Vec<f64> = Vec::with_capacity(img.pixel_count());
    let mut channel_sum = [0.0f64; 3];
    for p in img.pixels() {
        let rgb = [p[0].to_f64(), p[1].to_f64(), p[2].to_f64()];
        for c in 0..3 {
            channel_sum[c] += rgb[c];
        }
        lum.push(luma_of(rgb));
    }
    let mean = lum.iter().sum::<f64>() / n;
    let var = lum.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    lum.sort_by(f64::total_cmp);
    StatsVector([
        mean,
        var.sqrt(),
        nearest_rank(&lum, 5.0),
        nearest_rank(&lum, 25.0),
        nearest_rank(&lum, 50.0),
        nearest_rank(&lum, 75.0),
        nearest_rank(&lum, 95.0),
        channel_sum[0] / n,
        channel_sum[1] / n,
        channel_sum[2] / n,
    ])
}
