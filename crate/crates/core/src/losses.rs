//! Training objective: pseudo-label supervision (L1, SSIM, perceptual proxy)
//! plus the luminance ranking hinge over a dark-to-bright sequence.
//!
//! Every loss returns its value together with the gradient with respect to
//! its prediction argument.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::luma_grad_to_rgb;
use crate::raster::{luminance, Image, LumaMap, Raster};

pub const PERCEPTUAL_FILTERS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_p: f64,
    pub w_ssim: f64,
    pub w_lumi: f64,
    pub margin: f64,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub perceptual_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_p: 0.1,
            w_ssim: 0.05,
            w_lumi: 1.0,
            margin: 0.05,
            ssim_window: 8,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            perceptual_seed: 7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_p >= 0.0 && self.w_ssim >= 0.0 && self.w_lumi >= 0.0) {
            return Err(Error::InvalidParameter("loss weights must be >= 0".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidParameter("margin must be >= 0".into()));
        }
        if self.ssim_window < 2 {
            return Err(Error::InvalidParameter("ssim_window must be >= 2".into()));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::InvalidParameter("SSIM constants must be > 0".into()));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Image<f64>,
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn l1(pred: &Image<f64>, target: &Image<f64>) -> Result<LossGrad> {
    pred.check_same_dims(target)?;
    let n = pred.data().len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.data().len());
    for (p, t) in pred.data().iter().zip(target.data()) {
        value += (p - t).abs();
        grad.push(sign(p - t) / n);
    }
    Ok(LossGrad {
        value: value / n,
        grad: Raster::from_parts(pred.width(), pred.height(), grad),
    })
}

struct BlockStats {
    mu_x: f64,
    mu_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn block_stats(x: &LumaMap<f64>, y: &LumaMap<f64>, bx: usize, by: usize, win: usize) -> BlockStats {
    let w = x.width();
    let (xd, yd) = (x.data(), y.data());
    let n = (win * win) as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in by..by + win {
        for c in bx..bx + win {
            sx += xd[r * w + c];
            sy += yd[r * w + c];
        }
    }
    let (mu_x, mu_y) = (sx / n, sy / n);
    let (mut vx, mut vy, mut cv) = (0.0, 0.0, 0.0);
    for r in by..by + win {
        for c in bx..bx + win {
            let dx = xd[r * w + c] - mu_x;
            let dy = yd[r * w + c] - mu_y;
            vx += dx * dx;
            vy += dy * dy;
            cv += dx * dy;
        }
    }
    BlockStats {
        mu_x,
        mu_y,
        var_x: vx / n,
        var_y: vy / n,
        cov: cv / n,
    }
}

fn check_window(img: &Image<f64>, window: usize) -> Result<()> {
    if img.width() < window || img.height() < window {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            window,
        });
    }
    Ok(())
}

fn block_ssim(s: &BlockStats, c1: f64, c2: f64) -> f64 {
    ((2.0 * s.mu_x * s.mu_y + c1) * (2.0 * s.cov + c2))
        / ((s.mu_x * s.mu_x + s.mu_y * s.mu_y + c1) * (s.var_x + s.var_y + c2))
}

/// Mean SSIM over non-overlapping luminance blocks; pixels outside the last
/// full block row/column are ignored.
pub fn ssim_value(pred: &Image<f64>, target: &Image<f64>, cfg: &LossConfig) -> Result<f64> {
    pred.check_same_dims(target)?;
    check_window(pred, cfg.ssim_window)?;
    let (x, y) = (luminance(pred), luminance(target));
    let win = cfg.ssim_window;
    let (nbx, nby) = (pred.width() / win, pred.height() / win);
    let mut total = 0.0;
    for j in 0..nby {
        for i in 0..nbx {
            let s = block_stats(&x, &y, i * win, j * win, win);
            total += block_ssim(&s, cfg.ssim_c1, cfg.ssim_c2);
        }
    }
    Ok(total / (nbx * nby) as f64)
}

/// Mean SSIM and the gradient of `1 - SSIM` with respect to `pred`.
pub fn ssim(pred: &Image<f64>, target: &Image<f64>, cfg: &LossConfig) -> Result<(f64, Image<f64>)> {
    pred.check_same_dims(target)?;
    check_window(pred, cfg.ssim_window)?;
    let (x, y) = (luminance(pred), luminance(target));
    let (w, h) = pred.dims();
    let win = cfg.ssim_window;
    let (nbx, nby) = (w / win, h / win);
    let blocks = (nbx * nby) as f64;
    let n = (win * win) as f64;
    let (c1, c2) = (cfg.ssim_c1, cfg.ssim_c2);
    let mut g_luma = vec![0.0; w * h];
    let mut total = 0.0;
    for j in 0..nby {
        for i in 0..nbx {
            let (bx, by) = (i * win, j * win);
            let s = block_stats(&x, &y, bx, by, win);
            let a1 = 2.0 * s.mu_x * s.mu_y + c1;
            let a2 = 2.0 * s.cov + c2;
            let b1 = s.mu_x * s.mu_x + s.mu_y * s.mu_y + c1;
            let b2 = s.var_x + s.var_y + c2;
            let v = a1 * a2 / (b1 * b2);
            total += v;
            // dS/dx_p = S * [2mu_y/(n a1) + 2(y_p-mu_y)/(n a2) - 2mu_x/(n b1) - 2(x_p-mu_x)/(n b2)]
            let k0 = 2.0 * s.mu_y / (n * a1) - 2.0 * s.mu_x / (n * b1);
            for r in by..by + win {
                for c in bx..bx + win {
                    let idx = r * w + c;
                    let dx = x.data()[idx] - s.mu_x;
                    let dy = y.data()[idx] - s.mu_y;
                    let ds = v * (k0 + 2.0 * dy / (n * a2) - 2.0 * dx / (n * b2));
                    g_luma[idx] = -ds / blocks;
                }
            }
        }
    }
    Ok((total / blocks, luma_grad_to_rgb(w, h, &g_luma)))
}

/// Fixed bank of zero-mean, unit-norm 3x3 filters drawn from `seed`.
pub fn filter_bank(seed: u64) -> [[f64; 9]; PERCEPTUAL_FILTERS] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = [[0.0; 9]; PERCEPTUAL_FILTERS];
    for f in bank.iter_mut() {
        loop {
            for v in f.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let mean = f.iter().sum::<f64>() / 9.0;
            for v in f.iter_mut() {
                *v -= mean;
            }
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for v in f.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
    }
    bank
}

/// 2x2 box average over floor(w/2) x floor(h/2); `None` when a side would vanish.
fn pool2(src: &[f64], w: usize, h: usize) -> Option<(Vec<f64>, usize, usize)> {
    let (hw, hh) = (w / 2, h / 2);
    if hw == 0 || hh == 0 {
        return None;
    }
    let mut out = vec![0.0; hw * hh];
    for y in 0..hh {
        for x in 0..hw {
            let i = 2 * y * w + 2 * x;
            out[y * hw + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
        }
    }
    Some((out, hw, hh))
}

/// Copy of `src` with a one-pixel replicated border.
fn pad_edges(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let pw = w + 2;
    let mut out = vec![0.0; pw * (h + 2)];
    for py in 0..h + 2 {
        let sy = py.saturating_sub(1).min(h - 1);
        for px in 0..pw {
            let sx = px.saturating_sub(1).min(w - 1);
            out[py * pw + px] = src[sy * w + sx];
        }
    }
    out
}

/// Mean absolute filter response of `diff` (prediction minus target; the
/// filters are linear) at one scale. Accumulates the gradient with respect to
/// the prediction into `g_pred`.
fn feature_l1(
    diff: &[f64],
    w: usize,
    h: usize,
    bank: &[[f64; 9]; PERCEPTUAL_FILTERS],
    g_pred: &mut [f64],
) -> f64 {
    let count = (w * h * PERCEPTUAL_FILTERS) as f64;
    let pw = w + 2;
    let padded = pad_edges(diff, w, h);
    let mut g_padded = vec![0.0; padded.len()];
    let taps: [usize; 9] = std::array::from_fn(|t| (t / 3) * pw + t % 3);
    let mut value = 0.0;
    for f in bank {
        for y in 0..h {
            for x in 0..w {
                let base = y * pw + x;
                let mut acc = 0.0;
                for (fv, off) in f.iter().zip(taps) {
                    acc += fv * padded[base + off];
                }
                value += acc.abs();
                let g = sign(acc) / count;
                if g != 0.0 {
                    for (fv, off) in f.iter().zip(taps) {
                        g_padded[base + off] += fv * g;
                    }
                }
            }
        }
    }
    // Fold the border back onto the pixels it replicates.
    for py in 0..h + 2 {
        let sy = py.saturating_sub(1).min(h - 1);
        for px in 0..pw {
            let sx = px.saturating_sub(1).min(w - 1);
            g_pred[sy * w + sx] += g_padded[py * pw + px];
        }
    }
    value / count
}

/// L1 distance between fixed random filter responses of the luminance at full
/// and half resolution.
pub fn perceptual_proxy(pred: &Image<f64>, target: &Image<f64>, cfg: &LossConfig) -> Result<LossGrad> {
    pred.check_same_dims(target)?;
    let bank = filter_bank(cfg.perceptual_seed);
    let (w, h) = pred.dims();
    let (x, y) = (luminance(pred), luminance(target));
    let diff: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
    let mut g_luma = vec![0.0; w * h];
    let mut value = feature_l1(&diff, w, h, &bank, &mut g_luma);

    if let Some((dp, hw, hh)) = pool2(&diff, w, h) {
        let mut g_half = vec![0.0; hw * hh];
        value += feature_l1(&dp, hw, hh, &bank, &mut g_half);
        for py in 0..hh {
            for px in 0..hw {
                let g = 0.25 * g_half[py * hw + px];
                let i = 2 * py * w + 2 * px;
                g_luma[i] += g;
                g_luma[i + 1] += g;
                g_luma[i + w] += g;
                g_luma[i + w + 1] += g;
            }
        }
    }
    Ok(LossGrad {
        value,
        grad: luma_grad_to_rgb(w, h, &g_luma),
    })
}

/// Luminance ranking hinge over descriptors ordered dark to bright:
/// `w_lumi * sum_{i<j} max(0, F_i + margin - F_j)`.
pub fn lumi_rank(descriptors: &[f64], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let n = descriptors.len();
    let mut value = 0.0;
    let mut grads = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let gap = descriptors[i] + cfg.margin - descriptors[j];
            if gap > 0.0 {
                value += gap;
                grads[i] += cfg.w_lumi;
                grads[j] -= cfg.w_lumi;
            }
        }
    }
    (cfg.w_lumi * value, grads)
}

/// Weighted supervised loss `L1 + w_p*Lp + w_ssim*(1 - SSIM)` of one prediction.
pub fn supervised_loss(pred: &Image<f64>, target: &Image<f64>, cfg: &LossConfig) -> Result<LossGrad> {
    let l1v = l1(pred, target)?;
    let mut value = l1v.value;
    let mut grad: Vec<f64> = l1v.grad.into_raw();
    if cfg.w_p > 0.0 {
        let lp = perceptual_proxy(pred, target, cfg)?;
        value += cfg.w_p * lp.value;
        for (g, d) in grad.iter_mut().zip(lp.grad.data()) {
            *g += cfg.w_p * d;
        }
    }
    if cfg.w_ssim > 0.0 {
        let (s, sg) = ssim(pred, target, cfg)?;
        value += cfg.w_ssim * (1.0 - s);
        for (g, d) in grad.iter_mut().zip(sg.data()) {
            *g += cfg.w_ssim * d;
        }
    }
    Ok(LossGrad {
        value,
        grad: Raster::from_parts(pred.width(), pred.height(), grad),
    })
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub value: f64,
    pub supervised: f64,
    pub ranking: f64,
    /// Gradient for each prediction, in input order.
    pub pred_grads: Vec<Image<f64>>,
    /// Gradient for each descriptor, in input order.
    pub descriptor_grads: Vec<f64>,
}

/// Supervised loss averaged over a sequence of predictions sharing one target,
/// plus the ranking loss over their descriptors (given dark to bright).
///
/// For a single prediction this is exactly `L1 + w_p*Lp + w_ssim*(1-SSIM) + L_lumi`.
pub fn total_loss(
    preds: &[Image<f64>],
    target: &Image<f64>,
    descriptors: &[f64],
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scale = 1.0 / preds.len() as f64;
    let mut supervised = 0.0;
    let mut pred_grads = Vec::with_capacity(preds.len());
    for pred in preds {
        let s = supervised_loss(pred, target, cfg)?;
        supervised += scale * s.value;
        pred_grads.push(s.grad.map(|g| g * scale));
    }
    let (ranking, descriptor_grads) = lumi_rank(descriptors, cfg);
    Ok(TotalLoss {
        value: supervised + ranking,
        supervised,
        ranking,
        pred_grads,
        descriptor_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_constant_pair() {
        let a = Image::<f64>::filled(2, 2, [0.2; 3]);
        let b = Image::<f64>::filled(2, 2, [0.8; 3]);
        let r = l1(&a, &b).unwrap();
        assert!((r.value - 0.6).abs() < 1e-12);
        assert!(r.grad.data().iter().all(|&g| g == -1.0 / 12.0));
        let z = l1(&a, &a).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ssim_constants() {
        let cfg = LossConfig::default();
        let zero = Image::<f64>::zeros(16, 16);
        let one = Image::<f64>::filled(16, 16, [1.0; 3]);
        let c1 = cfg.ssim_c1;
        let expected = c1 / (1.0 + c1);
        assert!((ssim_value(&zero, &one, &cfg).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 9.999e-5).abs() < 1e-8);
        assert_eq!(ssim_value(&one, &one, &cfg).unwrap(), 1.0);
        assert!(matches!(
            ssim_value(&Image::zeros(7, 9), &Image::zeros(7, 9), &cfg),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn filter_bank_is_zero_mean_and_deterministic() {
        let a = filter_bank(7);
        assert_eq!(a, filter_bank(7));
        assert_ne!(a, filter_bank(8));
        for f in &a {
            assert!(f.iter().sum::<f64>().abs() < 1e-12);
            assert!((f.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_cases() {
        let cfg = LossConfig::default();
        assert_eq!(lumi_rank(&[0.0, 0.5, 1.0], &cfg).0, 0.0);
        let cfg2 = LossConfig {
            margin: 0.1,
            ..cfg.clone()
        };
        let (v, g) = lumi_rank(&[0.5, 0.2], &cfg2);
        assert!((v - 0.4).abs() < 1e-12);
        assert_eq!(g, vec![1.0, -1.0]);
        assert_eq!(lumi_rank(&[0.3], &cfg).0, 0.0);
        assert_eq!(lumi_rank(&[], &cfg).0, 0.0);
    }

    #[test]
    fn degenerate_weights_reduce_to_l1() {
        let cfg = LossConfig {
            w_p: 0.0,
            w_ssim: 0.0,
            w_lumi: 0.0,
            ..LossConfig::default()
        };
        let a = Image::<f64>::from_fn(8, 8, |x, y| [x as f64 / 8.0, y as f64 / 8.0, 0.5]);
        let b = Image::<f64>::filled(8, 8, [0.4; 3]);
        let t = total_loss(std::slice::from_ref(&a), &b, &[0.9, 0.1], &cfg).unwrap();
        assert_eq!(t.value, l1(&a, &b).unwrap().value);
    }
}
