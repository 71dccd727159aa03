//! Selection of unoccluded, well-framed instances from segmented images with
//! inverse-depth maps (larger value = nearer surface).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataworld::{crop_instance, sample_expand_ratio};
use crate::digest::{config_hash, derive_seed, name_seed};
use crate::error::{invalid, io_err, Error, Result};
use crate::image::{load_gray_png, save_gray16_png, save_gray8_png, Image, BACKGROUND_GRAY};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask size");
        Mask { width, height, bits }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Mask::new(width, height, (0..width * height).map(|i| f(i % width, i / width)).collect())
    }

    /// Pixels outside the image read as 0.
    pub fn at(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Inclusive `(x0, y0, x1, y1)`.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        crate::dataworld::mask_bbox(&self.bits, self.width)
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height), "mask shapes");
        Mask::new(self.width, self.height, self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && !b)
    }
}

/// Separable square-window reduction: `all` for erosion, `any` for dilation.
fn window_filter(mask: &Mask, k: usize, erode: bool) -> Mask {
    let r = (k / 2) as isize;
    let (w, h) = (mask.width, mask.height);
    let pass = |get: &dyn Fn(isize, isize) -> bool, len_outer: usize, len_inner: usize, horizontal: bool| {
        let mut out = vec![false; w * h];
        for o in 0..len_outer as isize {
            for i in 0..len_inner as isize {
                let hit = (-r..=r).map(|d| if horizontal { get(i + d, o) } else { get(o, i + d) });
                let v = if erode { hit.clone().all(|b| b) } else { hit.clone().any(|b| b) };
                let (x, y) = if horizontal { (i, o) } else { (o, i) };
                out[y as usize * w + x as usize] = v;
            }
        }
        out
    };
    let rows = pass(&|x, y| mask.at(x, y), h, w, true);
    let tmp = Mask::new(w, h, rows);
    Mask::new(w, h, pass(&|x, y| tmp.at(x, y), w, h, false))
}

/// Square-kernel erosion; pixels outside the image count as background.
pub fn erode(mask: &Mask, k: usize) -> Mask {
    window_filter(mask, k, true)
}

pub fn dilate(mask: &Mask, k: usize) -> Mask {
    window_filter(mask, k, false)
}

pub const BOUNDARY_KERNEL: usize = 9;
pub const CONTACT_KERNEL: usize = 15;

/// Inner boundary band: the mask minus its 9×9 erosion.
pub fn instance_boundary(mask: &Mask) -> Mask {
    mask.and_not(&erode(mask, BOUNDARY_KERNEL))
}

/// Part of `boundary` within reach of any other instance's boundary band.
pub fn contact_boundary(boundary: &Mask, others: &[Mask]) -> Mask {
    let mut union = Mask::empty(boundary.width, boundary.height);
    for o in others {
        union = union.or(o);
    }
    boundary.and(&dilate(&union, CONTACT_KERNEL))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalReject {
    /// All eight neighbours are inside the mask.
    Interior,
    /// Both probes fall on the same side of the mask.
    NonConvex,
    ZeroGradient,
}

const PROBE_STEP_PX: f64 = 2.0;

fn box3(mask: &Mask, x: isize, y: isize) -> f64 {
    let mut s = 0.0;
    for dy in -1..=1 {
        for dx in -1..=1 {
            s += f64::from(u8::from(mask.at(x + dx, y + dy)));
        }
    }
    s / 9.0
}

fn has_outside_neighbor(mask: &Mask, x: isize, y: isize) -> bool {
    (-1..=1).any(|dy| (-1..=1).any(|dx| (dx, dy) != (0, 0) && !mask.at(x + dx, y + dy)))
}

/// Outward unit normal `(x, y)` in image coordinates (y down) of the mask
/// boundary at a pixel, from the Sobel gradient of the box-blurred mask.
pub fn boundary_normal(mask: &Mask, point: (usize, usize)) -> std::result::Result<[f64; 2], NormalReject> {
    let (x, y) = (point.0 as isize, point.1 as isize);
    if !has_outside_neighbor(mask, x, y) {
        return Err(NormalReject::Interior);
    }
    let s = |dx: isize, dy: isize| box3(mask, x + dx, y + dy);
    let gx = (s(1, -1) + 2.0 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2.0 * s(-1, 0) + s(-1, 1));
    let gy = (s(-1, 1) + 2.0 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2.0 * s(0, -1) + s(1, -1));
    let norm = (gx * gx + gy * gy).sqrt();
    if norm < 1e-12 {
        return Err(NormalReject::ZeroGradient);
    }
    // the gradient points into the mask
    let n = [-gx / norm, -gy / norm];
    let probe = |sign: f64| {
        let px = (x as f64 + sign * PROBE_STEP_PX * n[0]).round() as isize;
        let py = (y as f64 + sign * PROBE_STEP_PX * n[1]).round() as isize;
        mask.at(px, py)
    };
    match (probe(1.0), probe(-1.0)) {
        (false, true) => Ok(n),
        (true, false) => Ok([-n[0], -n[1]]),
        _ => Err(NormalReject::NonConvex),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    Small,
    Truncated,
    Category,
    Occluded,
    DegenerateBoundary,
    LowConfidence,
}

impl DropReason {
    pub fn name(self) -> &'static str {
        match self {
            DropReason::Small => "small",
            DropReason::Truncated => "truncated",
            DropReason::Category => "category",
            DropReason::Occluded => "occluded",
            DropReason::DegenerateBoundary => "degenerate-boundary",
            DropReason::LowConfidence => "low-confidence",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "verdict", content = "reason")]
pub enum Verdict {
    Keep,
    Drop(DropReason),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean bounding-box side `s`.
    pub scale: Option<f64>,
    pub points: Vec<(usize, usize)>,
    /// Per sampled point: occluded or not, `None` when its normal was rejected.
    pub occluded: Vec<Option<bool>>,
    pub vote_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationVerdict {
    #[serde(flatten)]
    pub verdict: Verdict,
    pub diagnostics: Diagnostics,
}

impl CurationVerdict {
    fn plain(verdict: Verdict) -> Self {
        CurationVerdict { verdict, diagnostics: Diagnostics::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub confidence_threshold: f64,
    pub scale_px: usize,
    pub border_px: usize,
    pub n_points: usize,
    pub step_frac: f64,
    pub depth_ratio: f64,
    pub vote_frac: f64,
    pub crop_resolution: usize,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            confidence_threshold: 0.3,
            scale_px: 100,
            border_px: 10,
            n_points: 20,
            step_frac: 0.05,
            depth_ratio: 0.95,
            vote_frac: 0.5,
            crop_resolution: 128,
            seed: 0,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0
            || !(self.step_frac > 0.0)
            || !(self.depth_ratio > 0.0)
            || !(0.0..=1.0).contains(&self.vote_frac)
        {
            return invalid(format!("bad curation settings {self:?}"));
        }
        Ok(())
    }
}

pub fn filter_confidence(confidence: f64, threshold: f64) -> bool {
    confidence >= threshold
}

pub fn filter_small_truncated(mask: &Mask, scale_px: usize, border_px: usize) -> std::result::Result<(), DropReason> {
    let (x0, y0, x1, y1) = mask.bbox().ok_or(DropReason::DegenerateBoundary)?;
    if (x1 - x0 + 1).max(y1 - y0 + 1) < scale_px {
        return Err(DropReason::Small);
    }
    let gaps = [x0, y0, mask.width - 1 - x1, mask.height - 1 - y1];
    if gaps.iter().any(|&g| g < border_px) {
        return Err(DropReason::Truncated);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub id: String,
    pub confidence: f64,
    #[serde(default)]
    pub category: Option<String>,
    /// `[x, y, w, h]` in pixels. Informational: the filters measure the mask.
    pub bbox: [usize; 4],
}

/// One segmented image: RGB, inverse depth in `[0, 1]`, instance masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub image: Image,
    pub depth: Vec<f64>,
    pub instances: Vec<(InstanceMeta, Mask)>,
}

impl SceneRecord {
    fn depth_at(&self, x: f64, y: f64) -> f64 {
        let w = self.image.width();
        let xi = (x.round().max(0.0) as usize).min(w - 1);
        let yi = (y.round().max(0.0) as usize).min(self.image.height() - 1);
        self.depth[yi * w + xi]
    }

    pub fn load(dir: &Path) -> Result<SceneRecord> {
        let image = Image::load_png(&dir.join("image.png"))?;
        let (dw, dh, depth) = load_gray_png(&dir.join("depth.png"))?;
        if (dw, dh) != (image.width(), image.height()) {
            return Err(Error::Config(format!("{}: depth size differs from image", dir.display())));
        }
        let meta_path = dir.join("meta.json");
        #[derive(Deserialize)]
        struct Meta {
            instances: Vec<InstanceMeta>,
        }
        let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)?;
        let mut instances = Vec::new();
        for m in meta.instances {
            let (w, h, bits) = load_gray_png(&dir.join("masks").join(format!("{}.png", m.id)))?;
            if (w, h) != (dw, dh) {
                return Err(Error::Config(format!("{}: mask {} has the wrong size", dir.display(), m.id)));
            }
            instances.push((m, Mask::new(w, h, bits.iter().map(|&v| v > 0.5).collect())));
        }
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(SceneRecord { id, image, depth, instances })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let masks = dir.join("masks");
        fs::create_dir_all(&masks).map_err(io_err(&masks))?;
        let (w, h) = (self.image.width(), self.image.height());
        self.image.save_png(&dir.join("image.png"))?;
        save_gray16_png(&dir.join("depth.png"), w, h, &self.depth)?;
        for (m, mask) in &self.instances {
            let px: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
            save_gray8_png(&masks.join(format!("{}.png", m.id)), w, h, &px)?;
        }
        let meta = serde_json::json!({ "instances": self.instances.iter().map(|(m, _)| m).collect::<Vec<_>>() });
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(io_err(&path))
    }
}

/// Occlusion test of one instance against every other instance in the record.
pub fn occlusion_verdict(
    record: &SceneRecord,
    index: usize,
    config: &CurationConfig,
    rng: &mut impl Rng,
) -> CurationVerdict {
    let mask = &record.instances[index].1;
    let boundary = instance_boundary(mask);
    let others: Vec<Mask> = record
        .instances
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != index)
        .map(|(_, (_, m))| instance_boundary(m))
        .collect();
    let contact = contact_boundary(&boundary, &others);
    let Some((x0, y0, x1, y1)) = mask.bbox() else {
        return CurationVerdict::plain(Verdict::Drop(DropReason::DegenerateBoundary));
    };
    let s = 0.5 * ((x1 - x0 + 1) + (y1 - y0 + 1)) as f64;
    let mut diag = Diagnostics { scale: Some(s), ..Default::default() };
    // points whose 8-neighbourhood is all inside the mask are never sampled
    let pool: Vec<(usize, usize)> = (0..contact.bits.len())
        .filter(|&i| contact.bits[i])
        .map(|i| (i % mask.width, i / mask.width))
        .filter(|&(x, y)| has_outside_neighbor(mask, x as isize, y as isize))
        .collect();
    if contact.is_empty() {
        return CurationVerdict { verdict: Verdict::Keep, diagnostics: diag };
    }
    if pool.is_empty() {
        return CurationVerdict { verdict: Verdict::Drop(DropReason::DegenerateBoundary), diagnostics: diag };
    }
    let dist = config.step_frac * s;
    let mut votes = 0usize;
    let mut accepted = 0usize;
    for _ in 0..config.n_points {
        let p = pool[rng.random_range(0..pool.len())];
        diag.points.push(p);
        match boundary_normal(mask, p) {
            Ok(n) => {
                let inner = record.depth_at(p.0 as f64 - dist * n[0], p.1 as f64 - dist * n[1]);
                let outer = record.depth_at(p.0 as f64 + dist * n[0], p.1 as f64 + dist * n[1]);
                let occluded = inner / outer < config.depth_ratio;
                accepted += 1;
                votes += usize::from(occluded);
                diag.occluded.push(Some(occluded));
            }
            Err(NormalReject::NonConvex) => {
                diag.occluded.push(None);
                return CurationVerdict { verdict: Verdict::Drop(DropReason::DegenerateBoundary), diagnostics: diag };
            }
            Err(_) => diag.occluded.push(None),
        }
    }
    if accepted == 0 {
        return CurationVerdict { verdict: Verdict::Drop(DropReason::DegenerateBoundary), diagnostics: diag };
    }
    let frac = votes as f64 / accepted as f64;
    diag.vote_fraction = Some(frac);
    let verdict = if frac >= config.vote_frac { Verdict::Drop(DropReason::Occluded) } else { Verdict::Keep };
    CurationVerdict { verdict, diagnostics: diag }
}

/// All filters in order: confidence, scale/truncation, category, occlusion.
pub fn curate_instance(
    record: &SceneRecord,
    index: usize,
    denylist: &[String],
    config: &CurationConfig,
) -> CurationVerdict {
    let (meta, mask) = &record.instances[index];
    if !filter_confidence(meta.confidence, config.confidence_threshold) {
        return CurationVerdict::plain(Verdict::Drop(DropReason::LowConfidence));
    }
    if let Err(reason) = filter_small_truncated(mask, config.scale_px, config.border_px) {
        return CurationVerdict::plain(Verdict::Drop(reason));
    }
    if meta.category.as_ref().is_some_and(|c| denylist.contains(c)) {
        return CurationVerdict::plain(Verdict::Drop(DropReason::Category));
    }
    let seed = derive_seed(config.seed, &[name_seed(&record.id), name_seed(&meta.id)]);
    occlusion_verdict(record, index, config, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub scene: String,
    pub instance: String,
    #[serde(flatten)]
    pub verdict: CurationVerdict,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub input_count: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
    pub unreadable: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
}

pub fn curate_dataset(
    records: &[SceneRecord],
    denylist: &[String],
    config: &CurationConfig,
) -> (Vec<ManifestRow>, CurationReport) {
    let rows: Vec<ManifestRow> = records
        .par_iter()
        .flat_map_iter(|r| {
            (0..r.instances.len()).map(move |i| ManifestRow {
                scene: r.id.clone(),
                instance: r.instances[i].0.id.clone(),
                verdict: curate_instance(r, i, denylist, config),
            })
        })
        .collect();
    let mut report = CurationReport {
        input_count: rows.len(),
        config_hash: config_hash(&(config, denylist)),
        seed: config.seed,
        ..Default::default()
    };
    for row in &rows {
        match row.verdict.verdict {
            Verdict::Keep => report.kept += 1,
            Verdict::Drop(r) => *report.dropped.entry(r.name().to_string()).or_default() += 1,
        }
    }
    (rows, report)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const REPORT_FILE: &str = "curation_report.json";
pub const KEPT_DIR: &str = "kept";

/// Curates every scene folder under `input` into `output`: a manifest, a
/// report, and a gray-background crop per kept instance.
pub fn curate_directory(
    input: &Path,
    output: &Path,
    denylist: &[String],
    config: &CurationConfig,
) -> Result<CurationReport> {
    config.validate()?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(input)
        .map_err(io_err(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let loaded: Vec<(PathBuf, Result<SceneRecord>)> = dirs
        .into_par_iter()
        .map(|d| {
            let r = SceneRecord::load(&d);
            (d, r)
        })
        .collect();
    let mut records = Vec::new();
    let mut unreadable = Vec::new();
    for (d, r) in loaded {
        match r {
            Ok(r) => records.push(r),
            Err(e) => unreadable.push(format!("{}: {e}", d.display())),
        }
    }
    let (rows, mut report) = curate_dataset(&records, denylist, config);
    report.unreadable = unreadable;
    fs::create_dir_all(output).map_err(io_err(output))?;
    let manifest = output.join(MANIFEST_FILE);
    let mut f = fs::File::create(&manifest).map_err(io_err(&manifest))?;
    for row in &rows {
        writeln!(f, "{}", serde_json::to_string(row)?).map_err(io_err(&manifest))?;
    }
    let kept_dir = output.join(KEPT_DIR);
    for (rec, row) in records.iter().flat_map(|r| std::iter::repeat_n(r, r.instances.len())).zip(&rows) {
        if row.verdict.verdict != Verdict::Keep {
            continue;
        }
        let (meta, mask) = rec.instances.iter().find(|(m, _)| m.id == row.instance).expect("instance present");
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[name_seed(&rec.id), name_seed(&meta.id), 0xc0]));
        let name = format!("{}__{}", rec.id, meta.id);
        let crop = crop_instance(
            &rec.image,
            &mask.bits,
            sample_expand_ratio(&mut rng),
            config.crop_resolution,
            BACKGROUND_GRAY,
            &name,
        )?;
        let dir = kept_dir.join(&name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        crop.image.save_png(&dir.join("input.png"))?;
    }
    let path = output.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(io_err(&path))?;
    Ok(report)
}
