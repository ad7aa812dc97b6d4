//! The trainable exposure-correction model.
//!
//! A monotone global tone curve corrects luminance, then a content-adaptive
//! blend of basis 3D LUTs corrects color. Both the blend weights and the
//! per-image luminance descriptor are linear heads over [`global_stats`].
//!
//! All arithmetic runs in `f64` and [`backward`] returns exact reverse-mode
//! gradients of the forward pass.

mod checkpoint;

pub use self::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{global_stats, luma_of, Image, LumaMap, Raster, Sample, StatsVector, LUMA_WEIGHTS};

/// Width of a linear head: one weight per stat plus a bias.
pub const HEAD_WIDTH: usize = StatsVector::LEN + 1;

/// Luminance below which the tone-curve gain is read from the first
/// segment's slope instead of dividing by the luminance.
pub const LUMA_GUARD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Number of tone-curve segments.
    pub curve_knots: usize,
    /// Number of basis LUTs.
    pub luts: usize,
    /// Lattice points per LUT axis.
    pub lut_size: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            curve_knots: 16,
            luts: 4,
            lut_size: 9,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        // The guard relies on LUMA_GUARD lying inside the first curve segment.
        if self.curve_knots == 0 || (self.curve_knots as f64) * LUMA_GUARD >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "curve_knots must be in 1..{}",
                (1.0 / LUMA_GUARD) as usize
            )));
        }
        if self.luts == 0 {
            return Err(Error::InvalidParameter("luts must be >= 1".into()));
        }
        if self.lut_size < 2 {
            return Err(Error::InvalidParameter("lut_size must be >= 2".into()));
        }
        Ok(())
    }

    /// Floats in one LUT.
    pub fn lut_len(&self) -> usize {
        self.lut_size.pow(3) * 3
    }

    pub fn param_count(&self) -> usize {
        self.curve_knots + self.luts * self.lut_len() + HEAD_WIDTH + HEAD_WIDTH * self.luts
    }

    fn lut_offset(&self) -> usize {
        self.curve_knots
    }

    fn fl_offset(&self) -> usize {
        self.lut_offset() + self.luts * self.lut_len()
    }

    fn blend_offset(&self) -> usize {
        self.fl_offset() + HEAD_WIDTH
    }
}

/// Every learnable value, stored flat in this order: curve logits, LUT bank,
/// descriptor head, blend head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            values: vec![0.0; dims.param_count()],
        })
    }

    pub fn from_values(dims: ModelDims, values: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.param_count() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameters, got {}",
                dims.param_count(),
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dims, values })
    }

    /// Identity tone curve, identity LUTs, uniform blend, and a descriptor
    /// head that selects mean luminance.
    pub fn init_identity(dims: ModelDims) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let d = dims.lut_size;
        let step = 1.0 / (d - 1) as f64;
        for b in 0..dims.luts {
            let lut = p.lut_mut(b);
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        let n = lut_node(d, i, j, k);
                        lut[n] = i as f64 * step;
                        lut[n + 1] = j as f64 * step;
                        lut[n + 2] = k as f64 * step;
                    }
                }
            }
        }
        p.fl_head_mut()[0] = 1.0;
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn curve_logits(&self) -> &[f64] {
        &self.values[..self.dims.curve_knots]
    }

    pub fn curve_logits_mut(&mut self) -> &mut [f64] {
        &mut self.values[..self.dims.curve_knots]
    }

    pub fn lut_bank(&self) -> &[f64] {
        &self.values[self.dims.lut_offset()..self.dims.fl_offset()]
    }

    pub fn lut(&self, b: usize) -> &[f64] {
        let len = self.dims.lut_len();
        &self.lut_bank()[b * len..(b + 1) * len]
    }

    pub fn lut_mut(&mut self, b: usize) -> &mut [f64] {
        let len = self.dims.lut_len();
        let start = self.dims.lut_offset() + b * len;
        &mut self.values[start..start + len]
    }

    pub fn fl_head(&self) -> &[f64] {
        &self.values[self.dims.fl_offset()..self.dims.blend_offset()]
    }

    pub fn fl_head_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.dims.fl_offset(), self.dims.blend_offset());
        &mut self.values[a..b]
    }

    /// Blend head, row-major `luts x HEAD_WIDTH`.
    pub fn blend_head(&self) -> &[f64] {
        &self.values[self.dims.blend_offset()..]
    }

    pub fn blend_head_mut(&mut self) -> &mut [f64] {
        let a = self.dims.blend_offset();
        &mut self.values[a..]
    }
}

/// Gradient of a scalar objective with respect to every [`ModelParams`] value.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(ModelParams);

impl ParamGrads {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        Ok(Self(ModelParams::zeros(dims)?))
    }

    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        if self.0.dims != other.0.dims {
            return Err(Error::InvalidParameter("gradient shapes differ".into()));
        }
        for (a, b) in self.0.values.iter_mut().zip(&other.0.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.values.iter().position(|v| !v.is_finite())
    }
}

impl Deref for ParamGrads {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for ParamGrads {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

#[inline]
fn lut_node(d: usize, i: usize, j: usize, k: usize) -> usize {
    ((i * d + j) * d + k) * 3
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Piecewise-linear monotone curve on [0,1] with uniformly spaced knots.
#[derive(Clone, Debug, PartialEq)]
pub struct ToneCurve {
    /// `knots[0] = 0`, `knots[K] = 1`.
    pub knots: Vec<f64>,
    /// Sum of the softplus increments before normalization.
    pub total: f64,
}

impl ToneCurve {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut knots = Vec::with_capacity(logits.len() + 1);
        let mut acc = 0.0;
        knots.push(0.0);
        for &l in logits {
            acc += softplus(l);
            knots.push(acc);
        }
        for k in knots.iter_mut() {
            *k /= acc;
        }
        Self { knots, total: acc }
    }

    pub fn segments(&self) -> usize {
        self.knots.len() - 1
    }

    /// Returns (value, segment index, fraction within segment).
    pub fn eval(&self, y: f64) -> (f64, usize, f64) {
        let k = self.segments();
        let t = y.clamp(0.0, 1.0) * k as f64;
        let seg = (t.floor() as usize).min(k - 1);
        let frac = t - seg as f64;
        let v = (1.0 - frac) * self.knots[seg] + frac * self.knots[seg + 1];
        (v, seg, frac)
    }

    /// Slope of the first segment; equals curve(y)/y for y inside it.
    pub fn first_slope(&self) -> f64 {
        self.segments() as f64 * self.knots[1]
    }

    /// Luminance gain applied to a pixel of luminance `y`.
    fn gain(&self, y: f64) -> (f64, usize, f64, bool) {
        let (v, seg, frac) = self.eval(y);
        if y < LUMA_GUARD {
            (self.first_slope(), seg, frac, true)
        } else {
            (v / y, seg, frac, false)
        }
    }
}

/// Maps luminance through the tone curve.
pub fn tone_curve<T: Sample>(params: &ModelParams, luma: &LumaMap<T>) -> LumaMap<f64> {
    let curve = ToneCurve::from_logits(params.curve_logits());
    let data = luma.data().iter().map(|v| curve.eval(v.to_f64()).0).collect();
    Raster::from_parts(luma.width(), luma.height(), data)
}

/// Rescales RGB by curve(Y)/Y and clamps to [0,1].
pub fn apply_tone_curve<T: Sample>(params: &ModelParams, img: &Image<T>) -> Image<f64> {
    let curve = ToneCurve::from_logits(params.curve_logits());
    let mut data = Vec::with_capacity(img.data().len());
    for p in img.pixels() {
        let rgb = [p[0].to_f64(), p[1].to_f64(), p[2].to_f64()];
        let (gain, ..) = curve.gain(luma_of(rgb));
        data.extend(rgb.iter().map(|v| (v * gain).clamp(0.0, 1.0)));
    }
    Raster::from_parts(img.width(), img.height(), data)
}

/// Convex combination of the LUT bank.
pub fn blend_luts(params: &ModelParams, weights: &[f64]) -> Vec<f64> {
    let dims = params.dims();
    let mut out = vec![0.0; dims.lut_len()];
    for (b, &w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(params.lut(b)) {
            *o += w * v;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Cell {
    base: [usize; 3],
    frac: [f64; 3],
}

#[inline]
fn locate(d: usize, rgb: [f64; 3]) -> Cell {
    let scale = (d - 1) as f64;
    let mut base = [0; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let p = rgb[a].clamp(0.0, 1.0) * scale;
        let i = (p.floor() as usize).min(d - 2);
        base[a] = i;
        frac[a] = p - i as f64;
    }
    Cell { base, frac }
}

/// Corner offsets and trilinear weights of a cell.
#[inline]
fn corners(d: usize, cell: &Cell) -> [(usize, f64); 8] {
    let [i, j, k] = cell.base;
    let [fr, fg, fb] = cell.frac;
    let mut out = [(0usize, 0.0f64); 8];
    for (n, slot) in out.iter_mut().enumerate() {
        let (a, b, c) = ((n >> 2) & 1, (n >> 1) & 1, n & 1);
        let wr = if a == 1 { fr } else { 1.0 - fr };
        let wg = if b == 1 { fg } else { 1.0 - fg };
        let wb = if c == 1 { fb } else { 1.0 - fb };
        *slot = (lut_node(d, i + a, j + b, k + c), wr * wg * wb);
    }
    out
}

#[inline]
fn trilinear(lut: &[f64], d: usize, cell: &Cell) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (node, w) in corners(d, cell) {
        for c in 0..3 {
            out[c] += w * lut[node + c];
        }
    }
    out
}

/// Trilinear lookup of the blended LUT at every pixel.
pub fn apply_lut_blend<T: Sample>(
    params: &ModelParams,
    img: &Image<T>,
    blend_weights: &[f64],
) -> Result<Image<f64>> {
    let dims = params.dims();
    if blend_weights.len() != dims.luts {
        return Err(Error::InvalidParameter(format!(
            "expected {} blend weights, got {}",
            dims.luts,
            blend_weights.len()
        )));
    }
    let sum: f64 = blend_weights.iter().sum();
    if blend_weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(
            "blend weights must be nonnegative and sum to 1".into(),
        ));
    }
    let lut = blend_luts(params, blend_weights);
    let d = dims.lut_size;
    let mut data = Vec::with_capacity(img.data().len());
    for p in img.pixels() {
        let rgb = [p[0].to_f64(), p[1].to_f64(), p[2].to_f64()];
        data.extend(trilinear(&lut, d, &locate(d, rgb)));
    }
    Ok(Raster::from_parts(img.width(), img.height(), data))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn head_dot(row: &[f64], stats: &StatsVector) -> f64 {
    row[..StatsVector::LEN]
        .iter()
        .zip(stats.as_slice())
        .map(|(w, s)| w * s)
        .sum::<f64>()
        + row[StatsVector::LEN]
}

/// Descriptor and blend weights from the image statistics.
pub fn heads(params: &ModelParams, stats: &StatsVector) -> (f64, Vec<f64>) {
    let descriptor = head_dot(params.fl_head(), stats);
    let logits: Vec<f64> = params
        .blend_head()
        .chunks_exact(HEAD_WIDTH)
        .map(|row| head_dot(row, stats))
        .collect();
    (descriptor, softmax(&logits))
}

#[derive(Clone, Copy, Debug)]
struct PixelTrace {
    rgb: [f64; 3],
    lum: f64,
    seg: usize,
    frac: f64,
    guarded: bool,
    tone_pass: [bool; 3],
    cell: Cell,
    out_pass: [bool; 3],
}

/// Everything [`backward`] needs to replay a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    dims: ModelDims,
    width: usize,
    height: usize,
    stats: StatsVector,
    curve: ToneCurve,
    blend: Vec<f64>,
    effective_lut: Vec<f64>,
    pixels: Vec<PixelTrace>,
}

impl ForwardCache {
    pub fn stats(&self) -> &StatsVector {
        &self.stats
    }

    pub fn blend_weights(&self) -> &[f64] {
        &self.blend
    }

    pub fn curve(&self) -> &ToneCurve {
        &self.curve
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub corrected: Image<f64>,
    /// Global luminance descriptor of the input.
    pub descriptor: f64,
    pub cache: ForwardCache,
}

pub fn forward<T: Sample>(params: &ModelParams, img: &Image<T>) -> Forward {
    let dims = params.dims();
    let d = dims.lut_size;
    let stats = global_stats(img);
    let (descriptor, blend) = heads(params, &stats);
    let curve = ToneCurve::from_logits(params.curve_logits());
    let effective_lut = blend_luts(params, &blend);

    let mut pixels = Vec::with_capacity(img.pixel_count());
    let mut data = Vec::with_capacity(img.data().len());
    for p in img.pixels() {
        let rgb = [p[0].to_f64(), p[1].to_f64(), p[2].to_f64()];
        let lum = luma_of(rgb);
        let (gain, seg, frac, guarded) = curve.gain(lum);
        let mut toned = [0.0; 3];
        let mut tone_pass = [false; 3];
        for c in 0..3 {
            let v = rgb[c] * gain;
            tone_pass[c] = (0.0..=1.0).contains(&v);
            toned[c] = v.clamp(0.0, 1.0);
        }
        let cell = locate(d, toned);
        let out = trilinear(&effective_lut, d, &cell);
        let mut out_pass = [false; 3];
        for c in 0..3 {
            out_pass[c] = (0.0..=1.0).contains(&out[c]);
            data.push(out[c].clamp(0.0, 1.0));
        }
        pixels.push(PixelTrace {
            rgb,
            lum,
            seg,
            frac,
            guarded,
            tone_pass,
            cell,
            out_pass,
        });
    }
    Forward {
        corrected: Raster::from_parts(img.width(), img.height(), data),
        descriptor,
        cache: ForwardCache {
            dims,
            width: img.width(),
            height: img.height(),
            stats,
            curve,
            blend,
            effective_lut,
            pixels,
        },
    }
}

/// Reverse-mode gradient of `<grad_corrected, corrected> + grad_descriptor * descriptor`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_corrected: &Image<f64>,
    grad_descriptor: f64,
) -> Result<ParamGrads> {
    let dims = params.dims();
    if cache.dims != dims {
        return Err(Error::CacheMismatch(format!(
            "cache built for {:?}, params are {:?}",
            cache.dims, dims
        )));
    }
    if grad_corrected.dims() != (cache.width, cache.height) {
        return Err(Error::CacheMismatch(format!(
            "gradient is {:?}, cache is {:?}",
            grad_corrected.dims(),
            (cache.width, cache.height)
        )));
    }
    let d = dims.lut_size;
    let scale = (d - 1) as f64;
    let k = dims.curve_knots;
    let lut = &cache.effective_lut;

    let mut g_lut = vec![0.0; dims.lut_len()];
    let mut g_knots = vec![0.0; k + 1];

    for (px, g) in cache.pixels.iter().zip(grad_corrected.pixels()) {
        let mut go = [0.0; 3];
        for c in 0..3 {
            if px.out_pass[c] {
                go[c] = g[c];
            }
        }
        if go == [0.0; 3] {
            continue;
        }
        let [fr, fg, fb] = px.cell.frac;
        let mut g_frac = [0.0; 3];
        for (n, (node, w)) in corners(d, &px.cell).into_iter().enumerate() {
            let (a, b, c) = ((n >> 2) & 1, (n >> 1) & 1, n & 1);
            let wr = if a == 1 { fr } else { 1.0 - fr };
            let wg = if b == 1 { fg } else { 1.0 - fg };
            let wb = if c == 1 { fb } else { 1.0 - fb };
            let sr = if a == 1 { 1.0 } else { -1.0 };
            let sg = if b == 1 { 1.0 } else { -1.0 };
            let sb = if c == 1 { 1.0 } else { -1.0 };
            let mut dot = 0.0;
            for ch in 0..3 {
                g_lut[node + ch] += w * go[ch];
                dot += go[ch] * lut[node + ch];
            }
            g_frac[0] += sr * wg * wb * dot;
            g_frac[1] += wr * sg * wb * dot;
            g_frac[2] += wr * wg * sb * dot;
        }
        let mut g_gain = 0.0;
        for a in 0..3 {
            if px.tone_pass[a] {
                g_gain += scale * g_frac[a] * px.rgb[a];
            }
        }
        if px.guarded {
            g_knots[1] += k as f64 * g_gain;
        } else {
            let g_val = g_gain / px.lum;
            g_knots[px.seg] += (1.0 - px.frac) * g_val;
            g_knots[px.seg + 1] += px.frac * g_val;
        }
    }

    let mut grads = ParamGrads::zeros(dims)?;

    // knots[j] = S_j / Z with S_j = sum_{m<j} softplus(l_m), Z = S_K.
    let curve = &cache.curve;
    let weighted: f64 = g_knots.iter().zip(&curve.knots).map(|(g, y)| g * y).sum();
    let logits = params.curve_logits();
    let mut suffix = 0.0;
    let mut g_logits = vec![0.0; k];
    for m in (0..k).rev() {
        suffix += g_knots[m + 1];
        g_logits[m] = (suffix - weighted) / curve.total * sigmoid(logits[m]);
    }
    grads.curve_logits_mut().copy_from_slice(&g_logits);

    let mut g_blend = vec![0.0; dims.luts];
    for b in 0..dims.luts {
        let w = cache.blend[b];
        let src = params.lut(b);
        g_blend[b] = g_lut.iter().zip(src).map(|(g, v)| g * v).sum();
        for (dst, g) in grads.lut_mut(b).iter_mut().zip(&g_lut) {
            *dst = w * g;
        }
    }

    let mean_g: f64 = cache.blend.iter().zip(&g_blend).map(|(w, g)| w * g).sum();
    let stats = cache.stats.as_slice();
    let blend_head = grads.blend_head_mut();
    for b in 0..dims.luts {
        let g_logit = cache.blend[b] * (g_blend[b] - mean_g);
        let row = &mut blend_head[b * HEAD_WIDTH..(b + 1) * HEAD_WIDTH];
        for (dst, s) in row.iter_mut().zip(stats) {
            *dst = g_logit * s;
        }
        row[StatsVector::LEN] = g_logit;
    }

    let fl = grads.fl_head_mut();
    for (dst, s) in fl.iter_mut().zip(stats) {
        *dst = grad_descriptor * s;
    }
    fl[StatsVector::LEN] = grad_descriptor;

    Ok(grads)
}

/// Forward pass rounded to the `f32` image carrier.
pub fn correct<T: Sample>(params: &ModelParams, img: &Image<T>) -> Image {
    forward(params, img).corrected.convert()
}

/// Adds `grad` scaled by the luma weights to each channel; the RGB gradient of
/// a loss defined on luminance.
pub(crate) fn luma_grad_to_rgb(width: usize, height: usize, g_luma: &[f64]) -> Image<f64> {
    let mut data = Vec::with_capacity(g_luma.len() * 3);
    for g in g_luma {
        data.extend(LUMA_WEIGHTS.iter().map(|w| w * g));
    }
    Raster::from_parts(width, height, data)
}
