//! Independent re-implementations used as test oracles.

#![allow(dead_code)]

use loopx::losses::{filter_bank, LossConfig};
use loopx::model::ModelParams;
use loopx::raster::global_stats;
use loopx::Image;

/// Value-only loss recomputed from the definitions; the finite-difference side
/// of the gradient check never touches the library forward or loss code.
pub struct LossOracle {
    pub seq: Vec<Image<f64>>,
    stats: Vec<Vec<f64>>,
    target: Image<f64>,
    target_luma: Vec<f64>,
    bank: [[f64; 9]; 8],
    cfg: LossConfig,
}

pub struct Upstream {
    pub descriptor: f64,
    pub blend: Vec<f64>,
    /// LUT cell base index and fractions of every pixel.
    pub cells: Vec<([usize; 3], [f64; 3])>,
}

pub fn luma(p: &[f64]) -> f64 {
    0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2]
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl LossOracle {
    pub fn new(seq: Vec<Image<f64>>, target: Image<f64>, cfg: LossConfig) -> Self {
        let stats = seq.iter().map(|i| global_stats(i).as_slice().to_vec()).collect();
        let target_luma = target.pixels().map(luma).collect();
        Self {
            seq,
            stats,
            target,
            target_luma,
            bank: filter_bank(cfg.perceptual_seed),
            cfg,
        }
    }

    /// Everything upstream of the LUT lookup for image `i`.
    pub fn upstream(&self, p: &ModelParams, i: usize) -> Upstream {
        let dims = p.dims();
        let stats = &self.stats[i];
        let dot = |row: &[f64]| row[..10].iter().zip(stats).map(|(a, b)| a * b).sum::<f64>() + row[10];
        let descriptor = dot(p.fl_head());
        let logits: Vec<f64> = p.blend_head().chunks(11).map(dot).collect();
        let mx = logits.iter().copied().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let blend = e.iter().map(|v| v / z).collect();

        let k = dims.curve_knots;
        let mut knots = vec![0.0];
        for l in p.curve_logits() {
            knots.push(knots.last().unwrap() + softplus(*l));
        }
        let total = knots[k];
        let curve = |y: f64| {
            let t = y.clamp(0.0, 1.0) * k as f64;
            let s = (t.floor() as usize).min(k - 1);
            let f = t - s as f64;
            ((1.0 - f) * knots[s] + f * knots[s + 1]) / total
        };
        let d = dims.lut_size;
        let cells = self.seq[i]
            .pixels()
            .map(|rgb| {
                let y = luma(rgb);
                let gain = if y < 1e-4 { k as f64 * knots[1] / total } else { curve(y) / y };
                let mut base = [0usize; 3];
                let mut frac = [0.0; 3];
                for c in 0..3 {
                    let v = (rgb[c] * gain).clamp(0.0, 1.0) * (d - 1) as f64;
                    base[c] = (v.floor() as usize).min(d - 2);
                    frac[c] = v - base[c] as f64;
                }
                (base, frac)
            })
            .collect();
        Upstream {
            descriptor,
            blend,
            cells,
        }
    }

    pub fn upstreams(&self, p: &ModelParams) -> Vec<Upstream> {
        (0..self.seq.len()).map(|i| self.upstream(p, i)).collect()
    }

    /// Trilinear lookup in the blended LUT, clamped.
    pub fn lookup(&self, p: &ModelParams, up: &Upstream) -> Vec<[f64; 3]> {
        let dims = p.dims();
        let d = dims.lut_size;
        let luts: Vec<&[f64]> = (0..dims.luts).map(|b| p.lut(b)).collect();
        up.cells
            .iter()
            .map(|(base, frac)| {
                let mut o = [0.0; 3];
                for corner in 0..8 {
                    let (br, bg, bb) = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1);
                    let pick = |bit: usize, f: f64| if bit == 1 { f } else { 1.0 - f };
                    let wgt = pick(br, frac[0]) * pick(bg, frac[1]) * pick(bb, frac[2]);
                    let node = (((base[0] + br) * d + base[1] + bg) * d + base[2] + bb) * 3;
                    for (lut, wb) in luts.iter().zip(&up.blend) {
                        for c in 0..3 {
                            o[c] += wb * wgt * lut[node + c];
                        }
                    }
                }
                o.map(|v| v.clamp(0.0, 1.0))
            })
            .collect()
    }

    fn features(&self, diff: &[f64], w: usize, h: usize) -> f64 {
        // Edge-replicated copy so every 3x3 tap is in bounds.
        let pw = w + 2;
        let padded: Vec<f64> = (0..pw * (h + 2))
            .map(|i| {
                let x = (i % pw).saturating_sub(1).min(w - 1);
                let y = (i / pw).saturating_sub(1).min(h - 1);
                diff[y * w + x]
            })
            .collect();
        let mut total = 0.0;
        for f in &self.bank {
            for y in 0..h {
                let rows = [&padded[y * pw..], &padded[(y + 1) * pw..], &padded[(y + 2) * pw..]];
                for x in 0..w {
                    let mut acc = 0.0;
                    for (r, row) in rows.iter().enumerate() {
                        acc += f[3 * r] * row[x] + f[3 * r + 1] * row[x + 1] + f[3 * r + 2] * row[x + 2];
                    }
                    total += acc.abs();
                }
            }
        }
        total / (w * h * 8) as f64
    }

    pub fn supervised(&self, pred: &[[f64; 3]]) -> f64 {
        let (w, h) = self.target.dims();
        let l1 = pred
            .iter()
            .flatten()
            .zip(self.target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / (3 * w * h) as f64;

        let lp: Vec<f64> = pred.iter().map(|p| luma(p)).collect();
        let diff: Vec<f64> = lp.iter().zip(&self.target_luma).map(|(a, b)| a - b).collect();
        let (hw, hh) = (w / 2, h / 2);
        let half: Vec<f64> = (0..hw * hh)
            .map(|i| {
                let (x, y) = (2 * (i % hw), 2 * (i / hw));
                0.25 * (diff[y * w + x] + diff[y * w + x + 1] + diff[(y + 1) * w + x] + diff[(y + 1) * w + x + 1])
            })
            .collect();
        let perceptual = self.features(&diff, w, h) + self.features(&half, hw, hh);

        let win = self.cfg.ssim_window;
        let (c1, c2) = (self.cfg.ssim_c1, self.cfg.ssim_c2);
        let mut ssim = 0.0;
        for by in 0..h / win {
            for bx in 0..w / win {
                let idx: Vec<usize> = (0..win * win)
                    .map(|i| (by * win + i / win) * w + bx * win + i % win)
                    .collect();
                let n = idx.len() as f64;
                let mx = idx.iter().map(|&i| lp[i]).sum::<f64>() / n;
                let my = idx.iter().map(|&i| self.target_luma[i]).sum::<f64>() / n;
                let vx = idx.iter().map(|&i| (lp[i] - mx).powi(2)).sum::<f64>() / n;
                let vy = idx.iter().map(|&i| (self.target_luma[i] - my).powi(2)).sum::<f64>() / n;
                let cv = idx.iter().map(|&i| (lp[i] - mx) * (self.target_luma[i] - my)).sum::<f64>() / n;
                ssim += ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        ssim /= ((w / win) * (h / win)) as f64;
        l1 + self.cfg.w_p * perceptual + self.cfg.w_ssim * (1.0 - ssim)
    }

    pub fn loss(&self, p: &ModelParams) -> f64 {
        self.loss_with(p, &self.upstreams(p))
    }

    /// Loss reusing upstream quantities; valid when `p` differs from the
    /// parameters they were computed with only in LUT entries.
    pub fn loss_with(&self, p: &ModelParams, ups: &[Upstream]) -> f64 {
        let mut supervised = 0.0;
        for up in ups {
            supervised += self.supervised(&self.lookup(p, up));
        }
        let desc: Vec<f64> = ups.iter().map(|u| u.descriptor).collect();
        let mut rank = 0.0;
        for i in 0..desc.len() {
            for j in i + 1..desc.len() {
                rank += (desc[i] + self.cfg.margin - desc[j]).max(0.0);
            }
        }
        supervised / ups.len() as f64 + self.cfg.w_lumi * rank
    }
}

