use super::{Raster, Sample};
use crate::error::{Error, Result};

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Ordered pyramid levels, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T, const C: usize> {
    pub levels: Vec<Raster<T, C>>,
}

impl<T: Sample, const C: usize> Pyramid<T, C> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[inline]
fn half(n: usize) -> usize {
    n.div_ceil(2)
}

pub(crate) fn check_levels(levels: usize, width: usize, height: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::ZeroLevels);
    }
    // 2^(levels-1) <= min(width, height)
    let min_dim = width.min(height);
    if levels > usize::BITS as usize || (1usize << (levels - 1)) > min_dim {
        return Err(Error::LevelCountTooLarge {
            levels,
            width,
            height,
        });
    }
    Ok(())
}

/// Separable 5-tap binomial blur with edge-replicated borders.
pub fn blur<T: Sample, const C: usize>(src: &Raster<T, C>) -> Raster<T, C> {
    let (w, h) = src.dims();
    let s = src.data();
    let mut tmp = vec![0.0f64; w * h * C];
    for y in 0..h {
        for x in 0..w {
            for (k, wk) in BINOMIAL.iter().enumerate() {
                let sx = (x as isize + k as isize - 2).clamp(0, w as isize - 1) as usize;
                let si = (y * w + sx) * C;
                let di = (y * w + x) * C;
                for c in 0..C {
                    tmp[di + c] += wk * s[si + c].to_f64();
                }
            }
        }
    }
    let mut out = vec![0.0f64; w * h * C];
    for y in 0..h {
        for (k, wk) in BINOMIAL.iter().enumerate() {
            let sy = (y as isize + k as isize - 2).clamp(0, h as isize - 1) as usize;
            for x in 0..w {
                let si = (sy * w + x) * C;
                let di = (y * w + x) * C;
                for c in 0..C {
                    out[di + c] += wk * tmp[si + c];
                }
            }
        }
    }
    Raster::from_parts(w, h, out.into_iter().map(T::from_f64).collect())
}

/// Keeps every second pixel starting at (0,0); output is ceil(w/2) x ceil(h/2).
pub fn decimate<T: Sample, const C: usize>(src: &Raster<T, C>) -> Raster<T, C> {
    let (w, h) = src.dims();
    let (hw, hh) = (half(w), half(h));
    let mut data = Vec::with_capacity(hw * hh * C);
    for y in 0..hh {
        for x in 0..hw {
            data.extend_from_slice(&src.pixel(2 * x, 2 * y));
        }
    }
    Raster::from_parts(hw, hh, data)
}

/// Expands `src` to `width x height` by zero insertion followed by the
/// binomial kernel scaled by two per axis. Samples outside the coarse grid are
/// edge-replicated before insertion, so constants are preserved everywhere.
pub fn upsample<T: Sample, const C: usize>(
    src: &Raster<T, C>,
    width: usize,
    height: usize,
) -> Raster<T, C> {
    let (sw, sh) = src.dims();
    let s = src.data();
    // Horizontal pass: coarse rows -> fine columns.
    let mut tmp = vec![0.0f64; width * sh * C];
    for y in 0..sh {
        for x in 0..width {
            let di = (y * width + x) * C;
            for (k, wk) in BINOMIAL.iter().enumerate() {
                let pos = x as isize + k as isize - 2;
                if pos.rem_euclid(2) != 0 {
                    continue;
                }
                let sx = pos.div_euclid(2).clamp(0, sw as isize - 1) as usize;
                let si = (y * sw + sx) * C;
                for c in 0..C {
                    tmp[di + c] += 2.0 * wk * s[si + c].to_f64();
                }
            }
        }
    }
    let mut out = vec![0.0f64; width * height * C];
    for y in 0..height {
        for (k, wk) in BINOMIAL.iter().enumerate() {
            let pos = y as isize + k as isize - 2;
            if pos.rem_euclid(2) != 0 {
                continue;
            }
            let sy = pos.div_euclid(2).clamp(0, sh as isize - 1) as usize;
            for x in 0..width {
                let si = (sy * width + x) * C;
                let di = (y * width + x) * C;
                for c in 0..C {
                    out[di + c] += 2.0 * wk * tmp[si + c];
                }
            }
        }
    }
    Raster::from_parts(width, height, out.into_iter().map(T::from_f64).collect())
}

pub fn gaussian_pyramid<T: Sample, const C: usize>(
    src: &Raster<T, C>,
    levels: usize,
) -> Result<Pyramid<T, C>> {
    check_levels(levels, src.width(), src.height())?;
    let mut out = Vec::with_capacity(levels);
    out.push(src.clone());
    for _ in 1..levels {
        let next = decimate(&blur(out.last().expect("nonempty")));
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}

pub fn laplacian_pyramid<T: Sample, const C: usize>(
    src: &Raster<T, C>,
    levels: usize,
) -> Result<Pyramid<T, C>> {
    let gauss = gaussian_pyramid(src, levels)?;
    let mut out = Vec::with_capacity(levels);
    for k in 0..levels - 1 {
        let fine = &gauss.levels[k];
        let up = upsample(&gauss.levels[k + 1], fine.width(), fine.height());
        let data = fine
            .data()
            .iter()
            .zip(up.data())
            .map(|(a, b)| T::from_f64(a.to_f64() - b.to_f64()))
            .collect();
        out.push(Raster::from_parts(fine.width(), fine.height(), data));
    }
    out.push(gauss.levels[levels - 1].clone());
    Ok(Pyramid { levels: out })
}

/// Collapses a Laplacian pyramid back to a raster.
pub fn reconstruct<T: Sample, const C: usize>(pyr: &Pyramid<T, C>) -> Result<Raster<T, C>> {
    let top = pyr.levels.last().ok_or(Error::ZeroLevels)?;
    for k in 0..pyr.levels.len() - 1 {
        let (w, h) = pyr.levels[k].dims();
        let expected = (half(w), half(h));
        let got = pyr.levels[k + 1].dims();
        if got != expected {
            return Err(Error::MismatchedPyramid {
                level: k + 1,
                got,
                expected,
            });
        }
    }
    let mut cur = top.clone();
    for band in pyr.levels.iter().rev().skip(1) {
        let up = upsample(&cur, band.width(), band.height());
        let data = band
            .data()
            .iter()
            .zip(up.data())
            .map(|(a, b)| T::from_f64(a.to_f64() + b.to_f64()))
            .collect();
        cur = Raster::from_parts(band.width(), band.height(), data);
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Image, LumaMap};

    #[test]
    fn level_precondition() {
        let img = Image::<f64>::zeros(8, 5);
        assert!(gaussian_pyramid(&img, 3).is_ok());
        assert!(matches!(
            gaussian_pyramid(&img, 4),
            Err(Error::LevelCountTooLarge { .. })
        ));
        assert!(matches!(gaussian_pyramid(&img, 0), Err(Error::ZeroLevels)));
    }

    #[test]
    fn single_level_is_source() {
        let img = Image::<f32>::from_fn(5, 3, |x, y| [x as f32 * 0.1, y as f32 * 0.2, 0.3]);
        let g = gaussian_pyramid(&img, 1).unwrap();
        assert_eq!(g.levels, vec![img.clone()]);
        let l = laplacian_pyramid(&img, 1).unwrap();
        assert_eq!(reconstruct(&l).unwrap(), img);
    }

    #[test]
    fn constants_survive_every_level() {
        let img = LumaMap::<f64>::filled(13, 9, [0.37]);
        let g = gaussian_pyramid(&img, 4).unwrap();
        let dims: Vec<_> = g.levels.iter().map(|l| l.dims()).collect();
        assert_eq!(dims, vec![(13, 9), (7, 5), (4, 3), (2, 2)]);
        for level in &g.levels {
            assert!(level.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
        let l = laplacian_pyramid(&img, 4).unwrap();
        for band in &l.levels[..3] {
            assert!(band.data().iter().all(|v| v.abs() < 1e-12));
        }
        assert!(l.levels[3].data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn odd_dims_round_trip() {
        let img = Image::<f32>::from_fn(11, 7, |x, y| {
            let v = ((x * 7 + y * 3) % 10) as f32 / 10.0;
            [v, 1.0 - v, 0.5 * v]
        });
        let l = laplacian_pyramid(&img, 3).unwrap();
        let back = reconstruct(&l).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 1e-5);
    }

    #[test]
    fn reconstruct_rejects_inconsistent_levels() {
        let pyr = Pyramid {
            levels: vec![LumaMap::<f32>::zeros(8, 8), LumaMap::<f32>::zeros(3, 4)],
        };
        assert!(matches!(
            reconstruct(&pyr),
            Err(Error::MismatchedPyramid { level: 1, .. })
        ));
    }
}
