//! Procedural superquadric shapes, multi-view datasets on disk, and
//! instance cropping.
//!
//! Synthetic sets carry posed supervision views. Pseudo-real sets carry one
//! canonical-view image per shape plus evaluation views in a `sealed_eval`
//! folder that [`TrainingReader`] refuses to open.

use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::{config_hash, derive_seed};
use crate::error::{invalid, io_err, Error, Result};
use crate::geometry::{RelativePose, Rig, Vec3, SHAPE_BOUND};
use crate::image::{Image, BACKGROUND_GRAY};
use crate::renderfield::{composite_background, render_field, RenderSettings};

pub const SEALED_DIR: &str = "sealed_eval";
pub const SYNTHETIC_DIR: &str = "shapes";
pub const PSEUDO_REAL_DIR: &str = "pseudo_real";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const DATASET_FILE: &str = "dataset.json";

/// Peak density of a part's interior.
const PART_DENSITY: f64 = 30.0;
/// Steepness of the soft surface.
const SURFACE_SHARPNESS: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    /// Boxy-to-round parts.
    Synthetic,
    /// Round-to-pointed parts, shifted away from the synthetic family.
    PseudoReal,
}

impl ShapeFamily {
    fn exponent_range(self) -> (f64, f64) {
        match self {
            ShapeFamily::Synthetic => (0.3, 1.0),
            ShapeFamily::PseudoReal => (1.0, 2.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Part {
    center: Vec3,
    radii: Vec3,
    /// Vertical and horizontal shape exponents.
    exponents: (f64, f64),
    yaw: f64,
    /// Colour above and below the part's local equator.
    colors: [[f64; 3]; 2],
}

impl Part {
    /// Inside-outside function: < 1 inside, 1 on the surface.
    fn implicit(&self, p: Vec3) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let (s, c) = self.yaw.sin_cos();
        let x = (c * d[0] - s * d[2]) / self.radii[0];
        let z = (s * d[0] + c * d[2]) / self.radii[2];
        let y = d[1] / self.radii[1];
        let (e1, e2) = self.exponents;
        let xz = x.abs().powf(2.0 / e2) + z.abs().powf(2.0 / e2);
        xz.powf(e2 / e1) + y.abs().powf(2.0 / e1)
    }

    fn color(&self, p: Vec3) -> [f64; 3] {
        self.colors[usize::from(p[1] < self.center[1])]
    }

    /// Conservative axis-aligned half-extents.
    fn extent(&self) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        [
            c.abs() * self.radii[0] + s.abs() * self.radii[2],
            self.radii[1],
            s.abs() * self.radii[0] + c.abs() * self.radii[2],
        ]
    }

    fn transformed(&self, offset: Vec3, scale: f64) -> Part {
        Part {
            center: [0, 1, 2].map(|k| (self.center[k] - offset[k]) * scale),
            radii: self.radii.map(|r| r * scale),
            ..self.clone()
        }
    }
}

/// Analytic density + colour field made of 1 to 4 superquadric parts, scaled
/// to fit inside the shape cube.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyShape {
    pub seed: u64,
    pub family: ShapeFamily,
    parts: Vec<Part>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hue = rng.random::<f64>() * 6.0;
    let (sat, val) = (rng.random_range(0.5..0.9), rng.random_range(0.55..0.95));
    let f = hue.fract();
    let (p, q, t) = (val * (1.0 - sat), val * (1.0 - sat * f), val * (1.0 - sat * (1.0 - f)));
    match hue as usize {
        0 => [val, t, p],
        1 => [q, val, p],
        2 => [p, val, t],
        3 => [p, q, val],
        4 => [t, p, val],
        _ => [val, p, q],
    }
}

fn random_part(rng: &mut ChaCha8Rng, family: ShapeFamily, center: Vec3) -> Part {
    let (lo, hi) = family.exponent_range();
    let first = random_color(rng);
    let second = if rng.random_bool(0.5) { random_color(rng) } else { first };
    Part {
        center,
        radii: [0; 3].map(|_| rng.random_range(0.2..0.5)),
        exponents: (rng.random_range(lo..=hi), rng.random_range(lo..=hi)),
        yaw: rng.random_range(0.0..std::f64::consts::PI),
        colors: [first, second],
    }
}

pub fn generate_shape(seed: u64, family: ShapeFamily) -> ToyShape {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.random_range(1..=4);
        let mut parts = vec![random_part(&mut rng, family, [0.0; 3])];
        for _ in 1..n {
            let dir = loop {
                let v: Vec3 = [0; 3].map(|_| rng.random_range(-1.0..1.0));
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len > 0.1 && len <= 1.0 {
                    break v.map(|x| x / len);
                }
            };
            let dist = rng.random_range(0.25..0.55);
            parts.push(random_part(&mut rng, family, dir.map(|x| x * dist)));
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for p in &parts {
            let e = p.extent();
            for k in 0..3 {
                lo[k] = lo[k].min(p.center[k] - e[k]);
                hi[k] = hi[k].max(p.center[k] + e[k]);
            }
        }
        let offset = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
        let half = (0..3).map(|k| 0.5 * (hi[k] - lo[k])).fold(0.0, f64::max);
        let scale = SHAPE_BOUND / half;
        let parts: Vec<Part> = parts.iter().map(|p| p.transformed(offset, scale)).collect();
        let near_origin = parts.iter().any(|p| p.center.iter().map(|c| c * c).sum::<f64>() < 0.3 * 0.3);
        if near_origin {
            return ToyShape { seed, family, parts };
        }
    }
}

impl ToyShape {
    /// A shape with no parts; renders as pure background.
    pub fn empty() -> Self {
        ToyShape { seed: 0, family: ShapeFamily::Synthetic, parts: Vec::new() }
    }

    /// Single solid ellipsoid part, for tests and oracles.
    pub fn sphere(center: Vec3, radius: f64, color: [f64; 3]) -> Self {
        ToyShape {
            seed: 0,
            family: ShapeFamily::Synthetic,
            parts: vec![Part { center, radii: [radius; 3], exponents: (1.0, 1.0), yaw: 0.0, colors: [color; 2] }],
        }
    }

    pub fn n_parts(&self) -> usize {
        self.parts.len()
    }

    /// `(density, rgb)` at a point; zero density outside the shape cube.
    pub fn sample(&self, p: Vec3) -> (f64, [f64; 3]) {
        if p.iter().any(|c| c.abs() > SHAPE_BOUND) {
            return (0.0, [0.0; 3]);
        }
        let mut density = 0.0;
        let mut rgb = [0.0; 3];
        for part in &self.parts {
            let f = part.implicit(p);
            let d = PART_DENSITY / (1.0 + (SURFACE_SHARPNESS * (f - 1.0)).exp());
            let c = part.color(p);
            for k in 0..3 {
                rgb[k] += d * c[k];
            }
            density += d;
        }
        if density > 0.0 {
            rgb.iter_mut().for_each(|c| *c /= density);
        }
        (density, rgb)
    }

    pub fn field(&self) -> impl Fn(&[Vec3]) -> Vec<(f64, [f64; 3])> + '_ {
        move |pts| pts.iter().map(|&p| self.sample(p)).collect()
    }
}

/// Ground-truth rendering parameters for datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Input and supervision view resolution.
    pub resolution: usize,
    /// Resolution of sealed evaluation views.
    pub eval_resolution: usize,
    pub samples_per_ray: usize,
    pub rig: Rig,
    pub supervision_views: usize,
    pub eval_views: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            resolution: 128,
            eval_resolution: 224,
            samples_per_ray: 96,
            rig: Rig::default(),
            supervision_views: 4,
            eval_views: 5,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        RenderSettings::new(self.resolution, self.samples_per_ray).validate()?;
        RenderSettings::new(self.eval_resolution, self.samples_per_ray).validate()?;
        if self.supervision_views == 0 || self.eval_views == 0 {
            return invalid("view counts must be positive");
        }
        Ok(())
    }
}

/// Gray-composited views of a shape, with their alpha maps.
pub fn render_shape_views(
    shape: &ToyShape,
    poses: &[RelativePose],
    resolution: usize,
    samples_per_ray: usize,
    rig: Rig,
) -> Result<Vec<(Image, Vec<f64>)>> {
    let settings = RenderSettings::new(resolution, samples_per_ray).with_rig(rig);
    let field = shape.field();
    poses
        .iter()
        .map(|&d| {
            let view = render_field(&field, &rig.compose_relative(d)?, &settings)?;
            Ok((composite_background(&view, [BACKGROUND_GRAY; 3]), view.alpha))
        })
        .collect()
}

/// Uniform offsets within ±120° azimuth and ±45° elevation, never exactly the
/// canonical view.
pub fn sample_view_poses(n: usize, rng: &mut impl Rng) -> Vec<RelativePose> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let d = RelativePose {
            azimuth_deg: rng.random_range(-120.0..=120.0),
            elevation_deg: rng.random_range(-45.0..=45.0),
        };
        if d != RelativePose::IDENTITY {
            out.push(d);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub name: String,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_deg: f64,
}

impl CameraRecord {
    fn new(name: String, d: RelativePose, rig: Rig) -> Self {
        CameraRecord {
            name,
            azimuth_deg: d.azimuth_deg,
            elevation_deg: d.elevation_deg,
            radius: rig.radius,
            fov_deg: rig.fov_deg,
        }
    }

    pub fn relative(&self) -> RelativePose {
        RelativePose { azimuth_deg: self.azimuth_deg, elevation_deg: self.elevation_deg }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamerasFile {
    pub shape_seed: u64,
    pub config_hash: String,
    pub cameras: Vec<CameraRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub kind: ShapeFamily,
    pub n_shapes: usize,
    pub seed: u64,
    pub config: DataConfig,
    pub config_hash: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

/// Builds `dir` under a temporary name and renames it into place.
fn write_folder_atomic(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
    fill(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))
}

pub fn shape_id(i: usize) -> String {
    format!("{i:05}")
}

const SYNTHETIC_STREAM: u64 = 0x5717;
const PSEUDO_REAL_STREAM: u64 = 0x9e41;

fn build_set(
    root: &Path,
    family: ShapeFamily,
    n_shapes: usize,
    seed: u64,
    config: &DataConfig,
    write_one: impl Fn(&Path, &ToyShape, &mut ChaCha8Rng, &str) -> Result<()> + Sync,
) -> Result<PathBuf> {
    config.validate()?;
    if n_shapes == 0 {
        return invalid("n_shapes must be >= 1");
    }
    let (sub, stream) = match family {
        ShapeFamily::Synthetic => (SYNTHETIC_DIR, SYNTHETIC_STREAM),
        ShapeFamily::PseudoReal => (PSEUDO_REAL_DIR, PSEUDO_REAL_STREAM),
    };
    let dir = root.join(sub);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let hash = config_hash(&(family, seed, config));
    (0..n_shapes).into_par_iter().try_for_each(|i| {
        let shape_seed = derive_seed(seed, &[stream, i as u64]);
        let shape = generate_shape(shape_seed, family);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(shape_seed, &[0xca3]));
        write_folder_atomic(&dir.join(shape_id(i)), |d| write_one(d, &shape, &mut rng, &hash))
    })?;
    let info = DatasetInfo { kind: family, n_shapes, seed, config: config.clone(), config_hash: hash };
    write_json(&dir.join(DATASET_FILE), &info)?;
    Ok(dir)
}

/// `root/shapes/<id>/{input.png, view_k.png, cameras.json}`.
pub fn build_synthetic_set(root: &Path, n_shapes: usize, seed: u64, config: &DataConfig) -> Result<PathBuf> {
    build_set(root, ShapeFamily::Synthetic, n_shapes, seed, config, |dir, shape, rng, hash| {
        let mut poses = vec![RelativePose::IDENTITY];
        poses.extend(sample_view_poses(config.supervision_views, rng));
        let views = render_shape_views(shape, &poses, config.resolution, config.samples_per_ray, config.rig)?;
        let mut cameras = Vec::new();
        for (k, ((img, _), d)) in views.iter().zip(&poses).enumerate() {
            let name = if k == 0 { "input.png".to_string() } else { format!("view_{}.png", k - 1) };
            img.save_png(&dir.join(&name))?;
            cameras.push(CameraRecord::new(name, *d, config.rig));
        }
        write_json(&dir.join(CAMERAS_FILE), &CamerasFile { shape_seed: shape.seed, config_hash: hash.into(), cameras })
    })
}

/// `root/pseudo_real/<id>/{input.png, sealed_eval/{view_k.png, cameras.json}}`.
pub fn build_pseudo_real_set(root: &Path, n_shapes: usize, seed: u64, config: &DataConfig) -> Result<PathBuf> {
    build_set(root, ShapeFamily::PseudoReal, n_shapes, seed, config, |dir, shape, rng, hash| {
        let input = render_shape_views(
            shape,
            &[RelativePose::IDENTITY],
            config.resolution,
            config.samples_per_ray,
            config.rig,
        )?;
        input[0].0.save_png(&dir.join("input.png"))?;
        let sealed = dir.join(SEALED_DIR);
        fs::create_dir_all(&sealed).map_err(io_err(&sealed))?;
        let poses = sample_view_poses(config.eval_views, rng);
        let views = render_shape_views(shape, &poses, config.eval_resolution, config.samples_per_ray, config.rig)?;
        let mut cameras = Vec::new();
        for (k, ((img, _), d)) in views.iter().zip(&poses).enumerate() {
            let name = format!("view_{k}.png");
            img.save_png(&sealed.join(&name))?;
            cameras.push(CameraRecord::new(name, *d, config.rig));
        }
        write_json(
            &sealed.join(CAMERAS_FILE),
            &CamerasFile { shape_seed: shape.seed, config_hash: hash.into(), cameras },
        )
    })
}

/// Regenerates the shape behind a dataset folder (for oracle evaluation).
pub fn shape_for(family: ShapeFamily, seed: u64, index: usize) -> ToyShape {
    let stream = match family {
        ShapeFamily::Synthetic => SYNTHETIC_STREAM,
        ShapeFamily::PseudoReal => PSEUDO_REAL_STREAM,
    };
    generate_shape(derive_seed(seed, &[stream, index as u64]), family)
}

/// One synthetic training sample: canonical input and posed supervision views.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub input: Image,
    pub views: Vec<(RelativePose, Image)>,
}

/// One single-view training image.
#[derive(Clone, Debug, PartialEq)]
pub struct RealSample {
    pub id: String,
    pub input: Image,
}

/// Held-out evaluation instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalInstance {
    pub id: String,
    pub input: Image,
    pub views: Vec<(RelativePose, Image)>,
}

/// File reader for the training path: refuses anything under a sealed
/// folder and records every path it opens.
#[derive(Debug, Default)]
pub struct TrainingReader {
    opened: Mutex<Vec<PathBuf>>,
}

impl TrainingReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn opened(&self) -> Vec<PathBuf> {
        self.opened.lock().expect("reader log").clone()
    }

    fn check(&self, path: &Path) -> Result<()> {
        if path.components().any(|c| matches!(c, Component::Normal(n) if n == SEALED_DIR)) {
            return Err(Error::Refused { path: path.to_path_buf(), reason: "sealed evaluation data".into() });
        }
        self.opened.lock().expect("reader log").push(path.to_path_buf());
        Ok(())
    }

    pub fn image(&self, path: &Path) -> Result<Image> {
        self.check(path)?;
        Image::load_png(path)
    }

    pub fn text(&self, path: &Path) -> Result<String> {
        self.check(path)?;
        fs::read_to_string(path).map_err(io_err(path))
    }

    /// Sorted subfolders of `dir`.
    pub fn folders(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.check(dir)?;
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_dir() && path.extension().is_none_or(|e| e != "partial") {
                out.push(path);
            }
        }
        out.sort();
        Ok(out)
    }
}

fn folder_id(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_synthetic_set(dir: &Path, reader: &TrainingReader) -> Result<Vec<SyntheticSample>> {
    reader
        .folders(dir)?
        .iter()
        .map(|f| {
            let cams: CamerasFile = serde_json::from_str(&reader.text(&f.join(CAMERAS_FILE))?)?;
            let mut input = None;
            let mut views = Vec::new();
            for c in &cams.cameras {
                let img = reader.image(&f.join(&c.name))?;
                if c.name == "input.png" {
                    input = Some(img);
                } else {
                    views.push((c.relative(), img));
                }
            }
            let input = input.ok_or_else(|| Error::Config(format!("{} has no input view", f.display())))?;
            Ok(SyntheticSample { id: folder_id(f), input, views })
        })
        .collect()
}

/// Loads `<dir>/<id>/input.png` for every subfolder; sealed folders are never touched.
pub fn load_real_set(dir: &Path, reader: &TrainingReader) -> Result<Vec<RealSample>> {
    reader
        .folders(dir)?
        .iter()
        .map(|f| Ok(RealSample { id: folder_id(f), input: reader.image(&f.join("input.png"))? }))
        .collect()
}

/// Evaluation loader: input view plus sealed views with poses.
pub fn load_eval_set(dir: &Path) -> Result<Vec<EvalInstance>> {
    let mut folders: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.extension().is_none_or(|e| e != "partial"))
        .collect();
    folders.sort();
    folders
        .iter()
        .map(|f| {
            let sealed = f.join(SEALED_DIR);
            let cams_path = sealed.join(CAMERAS_FILE);
            if !cams_path.exists() {
                return Err(Error::Config(format!("{} has no sealed evaluation views", f.display())));
            }
            let text = fs::read_to_string(&cams_path).map_err(io_err(&cams_path))?;
            let cams: CamerasFile = serde_json::from_str(&text)?;
            let views = cams
                .cameras
                .iter()
                .map(|c| Ok((c.relative(), Image::load_png(&sealed.join(&c.name))?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalInstance { id: folder_id(f), input: Image::load_png(&f.join("input.png"))?, views })
        })
        .collect()
}

pub const TRAIN_EXPAND_RANGE: (f64, f64) = (1.45, 1.7);
pub const EVAL_EXPAND_RATIO: f64 = 1.6;

pub fn sample_expand_ratio(rng: &mut impl Rng) -> f64 {
    rng.random_range(TRAIN_EXPAND_RANGE.0..=TRAIN_EXPAND_RANGE.1)
}

/// Square, gray-background crop of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub image: Image,
    pub source_id: String,
    pub expand_ratio: f64,
    /// Crop side in source pixels, before resizing.
    pub crop_side: usize,
}

/// Pixel bounding box `(x0, y0, x1, y1)`, inclusive, of a mask.
pub fn mask_bbox(mask: &[bool], width: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        bb = Some(match bb {
            None => (x, y, x, y),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
        });
    }
    bb
}

pub fn crop_instance(
    image: &Image,
    mask: &[bool],
    expand_ratio: f64,
    output_resolution: usize,
    background_gray: f64,
    source_id: &str,
) -> Result<InstanceRecord> {
    if mask.len() != image.width() * image.height() {
        return invalid("mask size does not match the image");
    }
    if !(expand_ratio >= 1.0) || output_resolution == 0 {
        return invalid(format!("bad crop parameters: ratio {expand_ratio}, resolution {output_resolution}"));
    }
    let (x0, y0, x1, y1) = mask_bbox(mask, image.width()).ok_or_else(|| Error::InvalidArgument("empty mask".into()))?;
    let longer = (x1 - x0 + 1).max(y1 - y0 + 1);
    let side = ((expand_ratio * longer as f64).round() as usize).max(1);
    let cx = 0.5 * (x0 + x1 + 1) as f64;
    let cy = 0.5 * (y0 + y1 + 1) as f64;
    let left = (cx - 0.5 * side as f64 + 0.5).floor() as isize;
    let top = (cy - 0.5 * side as f64 + 0.5).floor() as isize;
    let gray = [background_gray; 3];
    let mut canvas = Image::filled(side, side, gray);
    for v in 0..side {
        for u in 0..side {
            let (sx, sy) = (left + u as isize, top + v as isize);
            if sx < 0 || sy < 0 || sx >= image.width() as isize || sy >= image.height() as isize {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            if mask[sy * image.width() + sx] {
                canvas.set(u, v, image.get(sx, sy));
            }
        }
    }
    Ok(InstanceRecord {
        image: canvas.resize(output_resolution, output_resolution),
        source_id: source_id.to_string(),
        expand_ratio,
        crop_side: side,
    })
}

/// Mask of pixels that differ from the background gray.
pub fn foreground_mask(image: &Image, tol: f64) -> Vec<bool> {
    image.data().chunks(3).map(|p| p.iter().any(|v| (v - BACKGROUND_GRAY).abs() > tol)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probes() -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..100).map(|_| [0; 3].map(|_| rng.random_range(-1.2..1.2))).collect()
    }

    #[test]
    fn shapes_are_deterministic_and_bounded() {
        let pts = probes();
        for family in [ShapeFamily::Synthetic, ShapeFamily::PseudoReal] {
            for seed in 0..20 {
                let a = generate_shape(seed, family);
                let b = generate_shape(seed, family);
                assert!((1..=4).contains(&a.n_parts()));
                assert!(pts.iter().all(|&p| a.sample(p) == b.sample(p)));
                for &p in &pts {
                    if p.iter().any(|c| c.abs() > SHAPE_BOUND) {
                        assert_eq!(a.sample(p).0, 0.0);
                    }
                    assert!(a.sample(p).0 <= 4.0 * PART_DENSITY);
                }
                assert!(a.parts.iter().any(|p| p.center.iter().map(|c| c * c).sum::<f64>() < 0.09));
                let other = generate_shape(seed + 1000, family);
                assert!(pts.iter().any(|&p| a.sample(p) != other.sample(p)));
            }
        }
    }

    #[test]
    fn families_use_disjoint_exponents() {
        for seed in 0..20 {
            for p in generate_shape(seed, ShapeFamily::Synthetic).parts {
                assert!(p.exponents.0 <= 1.0 && p.exponents.1 <= 1.0);
            }
            for p in generate_shape(seed, ShapeFamily::PseudoReal).parts {
                assert!(p.exponents.0 >= 1.0 && p.exponents.1 >= 1.0);
            }
        }
    }

    #[test]
    fn empty_shape_renders_gray() {
        let v = render_shape_views(&ToyShape::empty(), &[RelativePose::IDENTITY], 16, 8, Rig::default()).unwrap();
        assert!(v[0].0.data().iter().all(|&x| x == BACKGROUND_GRAY));
    }

    #[test]
    fn centered_sphere_renders_centered_disc() {
        let s = ToyShape::sphere([0.0; 3], 0.5, [1.0, 0.0, 0.0]);
        let res = 32;
        let (img, alpha) = &render_shape_views(&s, &[RelativePose::IDENTITY], res, 64, Rig::default()).unwrap()[0];
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, &a) in alpha.iter().enumerate() {
            if a > 0.5 {
                sx += (i % res) as f64 + 0.5;
                sy += (i / res) as f64 + 0.5;
                n += 1.0;
            }
        }
        assert!((sx / n - 16.0).abs() < 0.5 && (sy / n - 16.0).abs() < 0.5);
        // silhouette radius from the rig geometry: r / sqrt(d² − r²) · focal
        let focal = 0.5 * res as f64 / 20f64.to_radians().tan();
        let expect = 0.5 / (1.8f64.powi(2) - 0.25).sqrt() * focal;
        assert!(((n / std::f64::consts::PI).sqrt() - expect).abs() < 1.0);
        assert!(img.get(16, 16)[0] > 0.9);
        assert!(img.get(0, 0).iter().all(|c| (c - BACKGROUND_GRAY).abs() < 1e-9));
    }

    #[test]
    fn crop_examples() {
        let mut img = Image::filled(300, 300, [0.1, 0.2, 0.3]);
        img.set(0, 0, [1.0; 3]);
        let mask: Vec<bool> =
            (0..300 * 300).map(|i| (50..150).contains(&(i % 300)) && (100..150).contains(&(i / 300))).collect();
        let rec = crop_instance(&img, &mask, 1.6, 64, 0.5, "a").unwrap();
        assert_eq!(rec.crop_side, 160);
        assert_eq!(rec.image.width(), 64);
        assert!(rec.image.get(0, 0).iter().all(|c| (c - 0.5).abs() < 1e-12));
        assert!(crop_instance(&img, &vec![false; 300 * 300], 1.6, 64, 0.5, "a").is_err());

        let full = vec![true; 300 * 300];
        let rec = crop_instance(&img, &full, 1.0, 300, 0.5, "b").unwrap();
        assert_eq!(rec.image, img);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..10_000).map(|_| sample_expand_ratio(&mut rng)).all(|r| (1.45..=1.7).contains(&r)));
    }

    #[test]
    fn crop_is_idempotent_on_gray_background() {
        let s = ToyShape::sphere([0.1, -0.05, 0.0], 0.45, [0.9, 0.3, 0.2]);
        let (img, alpha) = render_shape_views(&s, &[RelativePose::IDENTITY], 64, 48, Rig::default()).unwrap().remove(0);
        let mask: Vec<bool> = alpha.iter().map(|&a| a > 0.5).collect();
        let once = crop_instance(&img, &mask, 1.0, 48, BACKGROUND_GRAY, "x").unwrap().image;
        let m2 = foreground_mask(&once.quantized(), 1.0 / 255.0);
        let twice = crop_instance(&once, &m2, 1.0, 48, BACKGROUND_GRAY, "x").unwrap().image;
        let max = once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max <= 2.0 / 255.0, "max diff {max}");
    }

    #[test]
    fn sealed_folder_is_refused() {
        let r = TrainingReader::new();
        let p = Path::new("/data/pseudo_real/00000/sealed_eval/view_0.png");
        assert!(matches!(r.image(p), Err(Error::Refused { .. })));
        assert!(r.opened().is_empty());
    }
}
