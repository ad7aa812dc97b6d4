//! Synthetic multi-exposure scenes and the on-disk sequence dataset.
//!
//! A scene is a procedural linear radiance map rendered through a camera
//! response function at several relative exposures, `I_i = f(E * 2^EV_i)`.
//!
//! Dataset layout:
//!
//! ```text
//! root/manifest.txt            one line per scene: `<id> <ev>,<ev>,...`
//! root/scene_<id>/ev_<+X.XX>.png
//! root/scene_<id>/gt.png       optional
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{global_stats, luma_of, nearest_rank, read_png, write_png16, Image};

pub const MANIFEST: &str = "manifest.txt";
pub const GT_FILE: &str = "gt.png";

/// Mean luminance targeted by the synthetic ground truth exposure.
pub const GT_MEAN_LUMINANCE: f64 = 0.45;

/// Five EVs evenly spanning [-1.5, +1.5].
pub const DEFAULT_EVS: [f64; 5] = [-1.5, -0.75, 0.0, 0.75, 1.5];
/// Wide preset spanning [-3, +3].
pub const WIDE_EVS: [f64; 5] = [-3.0, -1.5, 0.0, 1.5, 3.0];

/// Linear scene radiance, nonnegative and unbounded above.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceImage(Image<f64>);

impl RadianceImage {
    pub fn new(img: Image<f64>) -> Result<Self> {
        if let Some(index) = img.data().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "radiance must be nonnegative (sample {index})"
            )));
        }
        Ok(Self(img))
    }

    pub fn image(&self) -> &Image<f64> {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrfKind {
    Gamma,
    Smoothstep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfSpec {
    pub kind: CrfKind,
    pub gamma: f64,
}

impl Default for CrfSpec {
    fn default() -> Self {
        Self {
            kind: CrfKind::Gamma,
            gamma: 2.2,
        }
    }
}

impl CrfSpec {
    pub fn smoothstep() -> Self {
        Self {
            kind: CrfKind::Smoothstep,
            ..Self::default()
        }
    }

    #[inline]
    pub fn respond(&self, x: f64) -> f64 {
        let u = x.clamp(0.0, 1.0);
        match self.kind {
            CrfKind::Gamma => u.powf(1.0 / self.gamma),
            CrfKind::Smoothstep => 3.0 * u * u - 2.0 * u * u * u,
        }
    }
}

/// N images of one scene ordered dark to bright.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureSequence {
    pub images: Vec<Image>,
    pub evs: Option<Vec<f64>>,
}

/// A scene held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub evs: Vec<f64>,
    pub images: Vec<Image>,
    pub gt: Option<Image>,
}

/// A scene as recorded on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub evs: Vec<f64>,
    pub image_paths: Vec<PathBuf>,
    pub gt_path: Option<PathBuf>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Procedural scene: a smooth albedo gradient under a multi-stop illumination
/// ramp, 3 to 8 flat shapes with their own albedo and lighting, and
/// value-noise texture. Scaled so the luminance median is 0.5.
pub fn render_radiance(seed: u64, width: usize, height: usize) -> Result<RadianceImage> {
    if width < 16 || height < 16 {
        return Err(Error::InvalidParameter(format!(
            "scene must be at least 16x16, got {width}x{height}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [
        rng.random_range(0.3..0.8),
        rng.random_range(0.3..0.8),
        rng.random_range(0.3..0.8),
    ];
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let light_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (lx, ly) = (light_angle.cos(), light_angle.sin());
    let stops = rng.random_range(2.0..4.0);

    struct Shape {
        circle: bool,
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        albedo: [f64; 3],
        light: f64,
    }
    let count = rng.random_range(3..=8);
    let shapes: Vec<Shape> = (0..count)
        .map(|_| Shape {
            circle: rng.random_bool(0.5),
            cx: rng.random_range(0.0..1.0),
            cy: rng.random_range(0.0..1.0),
            rx: rng.random_range(0.08..0.3),
            ry: rng.random_range(0.08..0.3),
            albedo: [
                rng.random_range(0.05..1.0),
                rng.random_range(0.05..1.0),
                rng.random_range(0.05..1.0),
            ],
            light: 2f64.powf(rng.random_range(-1.5..1.5)),
        })
        .collect();

    let cell = 8usize;
    let (nx, ny) = (width / cell + 2, height / cell + 2);
    let lattice: Vec<f64> = (0..nx * ny).map(|_| rng.random()).collect();
    let noise = |x: usize, y: usize| {
        let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (smoothstep(fx - ix as f64), smoothstep(fy - iy as f64));
        let at = |i: usize, j: usize| lattice[j * nx + i];
        let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
        let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    };

    let img = Image::<f64>::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let ramp = (u - 0.5) * gx + (v - 0.5) * gy;
        let mut albedo = base.map(|b| b * (1.0 + 0.6 * ramp).max(0.1));
        let mut light = 2f64.powf(stops * ((u - 0.5) * lx + (v - 0.5) * ly));
        for s in &shapes {
            let (dx, dy) = ((u - s.cx) / s.rx, (v - s.cy) / s.ry);
            let inside = if s.circle {
                dx * dx + dy * dy <= 1.0
            } else {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            };
            if inside {
                albedo = s.albedo;
                light *= s.light;
            }
        }
        let texture = 0.75 + 0.5 * noise(x, y);
        albedo.map(|a| a * light * texture)
    });

    let mut lum: Vec<f64> = img
        .pixels()
        .map(|p| luma_of([p[0], p[1], p[2]]))
        .collect();
    lum.sort_by(f64::total_cmp);
    let median = nearest_rank(&lum, 50.0);
    let scale = 0.5 / median;
    RadianceImage::new(img.map(|v| v * scale))
}

pub fn apply_crf(rad: &RadianceImage, delta_t: f64, crf: &CrfSpec) -> Result<Image> {
    if !(delta_t > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "exposure time must be > 0, got {delta_t}"
        )));
    }
    if !(crf.gamma > 0.0) {
        return Err(Error::InvalidParameter("gamma must be > 0".into()));
    }
    Ok(rad.image().map(|x| crf.respond(x * delta_t)).convert())
}

fn check_increasing(evs: &[f64], scene: &str) -> Result<()> {
    if evs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::NonMonotoneEvList {
            scene: scene.to_string(),
        });
    }
    Ok(())
}

/// Renders `f(E * 2^EV)` for each EV, dark to bright.
pub fn render_sequence(rad: &RadianceImage, evs: &[f64], crf: &CrfSpec) -> Result<ExposureSequence> {
    if evs.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_increasing(evs, "<rendered>")?;
    let images = evs
        .iter()
        .map(|ev| apply_crf(rad, 2f64.powf(*ev), crf))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExposureSequence {
        images,
        evs: Some(evs.to_vec()),
    })
}

/// Stable ascending order of images by mean sample value; `perm[k]` is the
/// index of the k-th darkest image.
pub fn sort_by_mean_intensity(seq: &[Image]) -> Vec<usize> {
    let means: Vec<f64> = seq.iter().map(|img| img.mean()).collect();
    let mut perm: Vec<usize> = (0..seq.len()).collect();
    perm.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    perm
}

/// Exposure time whose rendering has the target mean luminance, found by
/// bisection on log2 exposure.
pub fn auto_exposure(rad: &RadianceImage, crf: &CrfSpec, target_mean: f64) -> Result<f64> {
    let mean_at = |log_t: f64| -> Result<f64> {
        Ok(global_stats(&apply_crf(rad, 2f64.powf(log_t), crf)?).mean_luminance())
    };
    let (mut lo, mut hi) = (-24.0f64, 24.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid)? < target_mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(2f64.powf(0.5 * (lo + hi)))
}

/// Renders a complete synthetic scene with its auto-exposed ground truth.
pub fn synth_scene(
    id: impl Into<String>,
    seed: u64,
    width: usize,
    height: usize,
    evs: &[f64],
    crf: &CrfSpec,
) -> Result<Scene> {
    let rad = render_radiance(seed, width, height)?;
    let seq = render_sequence(&rad, evs, crf)?;
    let gt = apply_crf(&rad, auto_exposure(&rad, crf, GT_MEAN_LUMINANCE)?, crf)?;
    Ok(Scene {
        id: id.into(),
        evs: evs.to_vec(),
        images: seq.images,
        gt: Some(gt),
    })
}

/// `n` scenes with ids `0000..`, scene `i` seeded by `seed * 1_000_003 + i`.
pub fn synth_corpus(
    n: usize,
    seed: u64,
    width: usize,
    height: usize,
    evs: &[f64],
    crf: &CrfSpec,
) -> Result<Vec<Scene>> {
    (0..n)
        .map(|i| {
            synth_scene(
                format!("{i:04}"),
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                width,
                height,
                evs,
                crf,
            )
        })
        .collect()
}

/// EV formatted with sign and two decimals, e.g. `+0.75`.
pub fn format_ev(ev: f64) -> String {
    let s = format!("{ev:+.2}");
    if s == "-0.00" {
        "+0.00".into()
    } else {
        s
    }
}

/// Parses an EV token of the form `<sign><digits>.<two digits>`.
pub fn parse_ev(token: &str) -> Result<f64> {
    let malformed = || Error::MalformedEvName(token.to_string());
    let rest = token
        .strip_prefix('+')
        .or_else(|| token.strip_prefix('-'))
        .ok_or_else(malformed)?;
    let (int, frac) = rest.split_once('.').ok_or_else(malformed)?;
    if int.is_empty()
        || frac.len() != 2
        || !int.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(malformed());
    }
    let v: f64 = token.parse().map_err(|_| malformed())?;
    Ok(if v == 0.0 { 0.0 } else { v })
}

pub fn ev_file_name(ev: f64) -> String {
    format!("ev_{}.png", format_ev(ev))
}

/// EV encoded in a file name `ev_<+X.XX>.png`.
pub fn parse_ev_file_name(name: &str) -> Result<f64> {
    let token = name
        .strip_prefix("ev_")
        .and_then(|s| s.strip_suffix(".png"))
        .ok_or_else(|| Error::MalformedEvName(name.to_string()))?;
    parse_ev(token).map_err(|_| Error::MalformedEvName(name.to_string()))
}

fn check_scene_id(id: &str) -> Result<()> {
    if id.is_empty()
        || !id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
    {
        return Err(Error::InvalidParameter(format!("invalid scene id {id:?}")));
    }
    Ok(())
}

pub fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join(format!("scene_{id}"))
}

/// Writes scenes as 16-bit PNGs plus the manifest.
pub fn save_dataset(root: &Path, scenes: &[Scene]) -> Result<Vec<SceneRecord>> {
    fs::create_dir_all(root)?;
    let mut manifest = String::new();
    let mut records = Vec::with_capacity(scenes.len());
    for scene in scenes {
        check_scene_id(&scene.id)?;
        check_increasing(&scene.evs, &scene.id)?;
        if scene.evs.len() != scene.images.len() || scene.images.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "scene {} has {} EVs for {} images",
                scene.id,
                scene.evs.len(),
                scene.images.len()
            )));
        }
        for &ev in &scene.evs {
            if parse_ev(&format_ev(ev))? != ev {
                return Err(Error::MalformedEvName(format!(
                    "EV {ev} is not representable with two decimals"
                )));
            }
        }
        let dir = scene_dir(root, &scene.id);
        fs::create_dir_all(&dir)?;
        let mut image_paths = Vec::with_capacity(scene.images.len());
        for (ev, img) in scene.evs.iter().zip(&scene.images) {
            let path = dir.join(ev_file_name(*ev));
            write_png16(&path, img)?;
            image_paths.push(path);
        }
        let gt_path = match &scene.gt {
            Some(gt) => {
                let path = dir.join(GT_FILE);
                write_png16(&path, gt)?;
                Some(path)
            }
            None => None,
        };
        let evs: Vec<String> = scene.evs.iter().map(|&e| format_ev(e)).collect();
        manifest.push_str(&format!("{} {}\n", scene.id, evs.join(",")));
        records.push(SceneRecord {
            id: scene.id.clone(),
            evs: scene.evs.clone(),
            image_paths,
            gt_path,
        });
    }
    fs::write(root.join(MANIFEST), manifest)?;
    Ok(records)
}

/// Reads and validates the manifest against the folder contents.
pub fn load_dataset(root: &Path) -> Result<Vec<SceneRecord>> {
    let manifest_path = root.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::MissingManifest(format!("{}: {e}", manifest_path.display()))
    })?;
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, evs) = line.split_once(char::is_whitespace).ok_or_else(|| {
            Error::MissingManifest(format!("line {}: expected `<id> <ev>,...`", lineno + 1))
        })?;
        check_scene_id(id).map_err(|e| Error::MissingManifest(format!("line {}: {e}", lineno + 1)))?;
        if !ids.insert(id.to_string()) {
            return Err(Error::MissingManifest(format!("duplicate scene id {id}")));
        }
        let evs = evs
            .trim()
            .split(',')
            .map(|t| parse_ev(t.trim()))
            .collect::<Result<Vec<_>>>()?;
        check_increasing(&evs, id)?;

        let dir = scene_dir(root, id);
        if !dir.is_dir() {
            return Err(Error::MissingManifest(format!(
                "scene {id} listed but {} is missing",
                dir.display()
            )));
        }
        let mut on_disk = Vec::new();
        let mut gt_path = None;
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == GT_FILE {
                gt_path = Some(entry.path());
                continue;
            }
            on_disk.push(parse_ev_file_name(&name)?);
        }
        on_disk.sort_by(f64::total_cmp);
        if on_disk != evs {
            return Err(Error::MissingManifest(format!(
                "scene {id}: files {:?} do not match manifest EVs {:?}",
                on_disk.iter().map(|&e| format_ev(e)).collect::<Vec<_>>(),
                evs.iter().map(|&e| format_ev(e)).collect::<Vec<_>>(),
            )));
        }
        records.push(SceneRecord {
            id: id.to_string(),
            image_paths: evs.iter().map(|&e| dir.join(ev_file_name(e))).collect(),
            evs,
            gt_path,
        });
    }
    for entry in fs::read_dir(root)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("scene_") {
            if !ids.contains(id) {
                return Err(Error::MissingManifest(format!(
                    "folder {name} has no manifest entry"
                )));
            }
        }
    }
    Ok(records)
}

pub fn load_scene(record: &SceneRecord) -> Result<Scene> {
    let images = record
        .image_paths
        .iter()
        .map(|p| read_png(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = images.first() {
        for img in &images[1..] {
            first.check_same_dims(img)?;
        }
    }
    let gt = record.gt_path.as_deref().map(read_png).transpose()?;
    Ok(Scene {
        id: record.id.clone(),
        evs: record.evs.clone(),
        images,
        gt,
    })
}

pub fn load_scenes(root: &Path) -> Result<Vec<Scene>> {
    load_dataset(root)?.iter().map(load_scene).collect()
}
