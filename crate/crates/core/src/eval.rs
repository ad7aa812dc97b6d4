//! PSNR/SSIM metrics and the single-exposure (SEC) and fusion (MEF)
//! evaluation protocols.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;

use crate::data::{format_ev, Scene};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::losses::{ssim_value, LossConfig};
use crate::model::{correct, ModelParams};
use crate::raster::Image;
use crate::trainer::infer;

/// PSNR in dB, or the marker for identical images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }

    /// True when at least `db`; the infinite marker satisfies any bound.
    pub fn at_least(self, db: f64) -> bool {
        self.finite().is_none_or(|v| v >= db)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.3}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

/// Peak-1.0 PSNR over all samples.
pub fn psnr(a: &Image, b: &Image) -> Result<Psnr> {
    a.check_same_dims(b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(10.0 * (1.0 / mse).log10())
    }
}

/// Mean block SSIM with the default window and constants.
pub fn ssim_metric(a: &Image, b: &Image) -> Result<f64> {
    ssim_value(&a.convert(), &b.convert(), &LossConfig::default())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecEntry {
    pub ev: f64,
    pub psnr: Psnr,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEval {
    pub scene: String,
    pub sec: Vec<SecEntry>,
    pub mef_psnr: Psnr,
    pub mef_ssim: f64,
}

/// Mean of finite PSNR values with the count of infinite ones excluded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsnrMean {
    pub mean: Option<f64>,
    pub infinite: usize,
}

impl PsnrMean {
    pub fn of(values: impl IntoIterator<Item = Psnr>) -> Self {
        let (mut sum, mut n, mut infinite) = (0.0, 0usize, 0usize);
        for v in values {
            match v {
                Psnr::Finite(x) => {
                    sum += x;
                    n += 1;
                }
                Psnr::Infinite => infinite += 1,
            }
        }
        Self {
            mean: (n > 0).then(|| sum / n as f64),
            infinite,
        }
    }
}

impl fmt::Display for PsnrMean {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mean {
            Some(m) => write!(f, "{m:.3}")?,
            None => f.write_str("inf")?,
        }
        if self.infinite > 0 && self.mean.is_some() {
            write!(f, "*{}", self.infinite)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scenes: Vec<SceneEval>,
    pub sec_psnr: PsnrMean,
    pub sec_ssim: f64,
    pub mef_psnr: PsnrMean,
    pub mef_ssim: f64,
}

impl EvalReport {
    pub fn from_scenes(scenes: Vec<SceneEval>) -> Self {
        let sec: Vec<&SecEntry> = scenes.iter().flat_map(|s| &s.sec).collect();
        let sec_psnr = PsnrMean::of(sec.iter().map(|e| e.psnr));
        let sec_ssim = sec.iter().map(|e| e.ssim).sum::<f64>() / sec.len().max(1) as f64;
        let mef_psnr = PsnrMean::of(scenes.iter().map(|s| s.mef_psnr));
        let mef_ssim = scenes.iter().map(|s| s.mef_ssim).sum::<f64>() / scenes.len().max(1) as f64;
        Self {
            scenes,
            sec_psnr,
            sec_ssim,
            mef_psnr,
            mef_ssim,
        }
    }

    /// Sorted union of EVs across scenes.
    fn ev_columns(&self) -> Vec<String> {
        let set: BTreeSet<i64> = self
            .scenes
            .iter()
            .flat_map(|s| s.sec.iter().map(|e| (e.ev * 100.0).round() as i64))
            .collect();
        set.into_iter().map(|c| format_ev(c as f64 / 100.0)).collect()
    }

    fn sec_cell<'a>(scene: &'a SceneEval, ev: &str) -> Option<&'a SecEntry> {
        scene.sec.iter().find(|e| format_ev(e.ev) == ev)
    }

    /// One row per scene followed by a `mean` row. Infinite PSNR is written
    /// as `inf` and left out of the means.
    pub fn to_csv(&self) -> String {
        let evs = self.ev_columns();
        let mut out = String::from("scene,mef_psnr,mef_ssim,sec_psnr,sec_ssim");
        for ev in &evs {
            out.push_str(&format!(",psnr@{ev},ssim@{ev}"));
        }
        out.push('\n');
        for s in &self.scenes {
            let sec_psnr = PsnrMean::of(s.sec.iter().map(|e| e.psnr));
            let sec_ssim = s.sec.iter().map(|e| e.ssim).sum::<f64>() / s.sec.len().max(1) as f64;
            out.push_str(&format!(
                "{},{},{:.6},{},{:.6}",
                s.scene,
                s.mef_psnr,
                s.mef_ssim,
                fmt_mean_csv(sec_psnr),
                sec_ssim
            ));
            for ev in &evs {
                match Self::sec_cell(s, ev) {
                    Some(e) => out.push_str(&format!(",{},{:.6}", e.psnr, e.ssim)),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "mean,{},{:.6},{},{:.6}",
            fmt_mean_csv(self.mef_psnr),
            self.mef_ssim,
            fmt_mean_csv(self.sec_psnr),
            self.sec_ssim
        ));
        for ev in &evs {
            let cells: Vec<&SecEntry> = self.scenes.iter().filter_map(|s| Self::sec_cell(s, ev)).collect();
            let p = PsnrMean::of(cells.iter().map(|e| e.psnr));
            let q = cells.iter().map(|e| e.ssim).sum::<f64>() / cells.len().max(1) as f64;
            out.push_str(&format!(",{},{q:.6}", fmt_mean_csv(p)));
        }
        out.push('\n');
        out
    }

    /// Aligned plain-text table with PSNR/SSIM column pairs per EV.
    pub fn to_table(&self) -> String {
        let evs = self.ev_columns();
        let mut header = vec!["scene".to_string(), "MEF PSNR".into(), "MEF SSIM".into()];
        for ev in &evs {
            header.push(format!("EV{ev} PSNR"));
            header.push(format!("EV{ev} SSIM"));
        }
        header.push("SEC PSNR".into());
        header.push("SEC SSIM".into());
        let mut rows = vec![header];
        for s in &self.scenes {
            let mut row = vec![s.scene.clone(), s.mef_psnr.to_string(), format!("{:.4}", s.mef_ssim)];
            for ev in &evs {
                match Self::sec_cell(s, ev) {
                    Some(e) => {
                        row.push(e.psnr.to_string());
                        row.push(format!("{:.4}", e.ssim));
                    }
                    None => {
                        row.push("-".into());
                        row.push("-".into());
                    }
                }
            }
            let sp = PsnrMean::of(s.sec.iter().map(|e| e.psnr));
            let ss = s.sec.iter().map(|e| e.ssim).sum::<f64>() / s.sec.len().max(1) as f64;
            row.push(sp.to_string());
            row.push(format!("{ss:.4}"));
            rows.push(row);
        }
        let mut mean = vec!["mean".to_string(), self.mef_psnr.to_string(), format!("{:.4}", self.mef_ssim)];
        for ev in &evs {
            let cells: Vec<&SecEntry> = self.scenes.iter().filter_map(|s| Self::sec_cell(s, ev)).collect();
            mean.push(PsnrMean::of(cells.iter().map(|e| e.psnr)).to_string());
            mean.push(format!(
                "{:.4}",
                cells.iter().map(|e| e.ssim).sum::<f64>() / cells.len().max(1) as f64
            ));
        }
        mean.push(self.sec_psnr.to_string());
        mean.push(format!("{:.4}", self.sec_ssim));
        rows.push(mean);

        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    if c == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 || i == rows.len() - 2 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
                out.push('\n');
            }
        }
        let inf = self.sec_psnr.infinite + self.mef_psnr.infinite;
        if inf > 0 {
            out.push_str(&format!("* {inf} infinite PSNR value(s) excluded from means\n"));
        }
        out
    }
}

fn fmt_mean_csv(m: PsnrMean) -> String {
    match m.mean {
        Some(v) => format!("{v:.3}"),
        None => "inf".into(),
    }
}

pub fn evaluate_scene(params: &ModelParams, scene: &Scene, fusion: &FusionParams) -> Result<SceneEval> {
    let gt = scene
        .gt
        .as_ref()
        .ok_or_else(|| Error::MissingGroundTruth(scene.id.clone()))?;
    let sec = scene
        .images
        .iter()
        .zip(&scene.evs)
        .map(|(img, &ev)| {
            let out = correct(params, img);
            Ok(SecEntry {
                ev,
                psnr: psnr(&out, gt)?,
                ssim: ssim_metric(&out, gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fused = infer(params, &scene.images, fusion)?.fused;
    Ok(SceneEval {
        scene: scene.id.clone(),
        sec,
        mef_psnr: psnr(&fused, gt)?,
        mef_ssim: ssim_metric(&fused, gt)?,
    })
}

/// SEC metrics for every corrected input and MEF metrics for the fused
/// result, each against the scene's ground truth.
pub fn evaluate(params: &ModelParams, scenes: &[Scene], fusion: &FusionParams) -> Result<EvalReport> {
    if let Some(s) = scenes.iter().find(|s| s.gt.is_none()) {
        return Err(Error::MissingGroundTruth(s.id.clone()));
    }
    let rows = scenes
        .par_iter()
        .map(|s| evaluate_scene(params, s, fusion))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scenes(rows))
}

/// MEF metrics of plain fusion of the captured sequence (no correction).
pub fn evaluate_fusion_baseline(scenes: &[Scene], fusion: &FusionParams) -> Result<EvalReport> {
    let rows = scenes
        .par_iter()
        .map(|s| {
            let gt = s
                .gt
                .as_ref()
                .ok_or_else(|| Error::MissingGroundTruth(s.id.clone()))?;
            let fused = crate::fusion::fuse(&s.images, fusion)?;
            Ok(SceneEval {
                scene: s.id.clone(),
                sec: Vec::new(),
                mef_psnr: psnr(&fused, gt)?,
                mef_ssim: ssim_metric(&fused, gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scenes(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_basics() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);
        assert_eq!(psnr_from_mse(0.01), Psnr::Finite(20.0));
        assert!(matches!(
            psnr(&a, &Image::zeros(4, 5)),
            Err(Error::DimensionMismatch(..))
        ));
    }

    #[test]
    fn psnr_mean_skips_infinite() {
        let m = PsnrMean::of([Psnr::Finite(10.0), Psnr::Infinite, Psnr::Finite(20.0)]);
        assert_eq!(m.mean, Some(15.0));
        assert_eq!(m.infinite, 1);
        assert_eq!(m.to_string(), "15.000*1");
        assert_eq!(PsnrMean::of([Psnr::Infinite]).to_string(), "inf");
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = Image::from_fn(16, 16, |x, y| [x as f32 / 16.0, y as f32 / 16.0, 0.2]);
        let b = Image::from_fn(16, 16, |x, y| [0.7, (x * y) as f32 / 256.0, 0.4]);
        assert_eq!(ssim_metric(&a, &a).unwrap(), 1.0);
        assert!((ssim_metric(&a, &b).unwrap() - ssim_metric(&b, &a).unwrap()).abs() < 1e-9);
    }
}
