//! Evaluation suites: novel-view metrics on sealed views, semantic similarity
//! over a 7-view turntable, and the 13-pose self-consistency round trip.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataworld::{crop_instance, EvalInstance, ToyShape, EVAL_EXPAND_RATIO};
use crate::digest::config_hash;
use crate::error::{invalid, io_err, Error, Result};
use crate::geometry::{CameraPose, RelativePose, Rig};
use crate::image::{Image, BACKGROUND_GRAY};
use crate::perceptual::PerceptualBackend;
use crate::reconstructor::{reconstruct, ReconstructorParams};
use crate::renderfield::{composite_background, render, render_field, RenderSettings, RenderedView, Triplane};
use crate::selftrain::{cosine, SemanticEmbedder};

pub const PSNR_CAP_DB: f64 = 99.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w×h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = k.iter().enumerate().map(|(i, kv)| kv * rows[(yo + i) * ow + xo]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean local SSIM of the luma channel, Gaussian window (11×11, σ = 1.5).
/// Images smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return invalid(format!("ssim shape mismatch: {}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()));
    }
    let (w, h) = (a.width(), a.height());
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return invalid("ssim needs a non-empty image");
    }
    let k = gaussian_kernel(size);
    let (la, lb) = (a.luma(), b.luma());
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, ow, oh) = filter_valid(&la, w, h, &k);
    let (mu_b, _, _) = filter_valid(&lb, w, h, &k);
    let (aa, _, _) = filter_valid(&prod(&la, &la), w, h, &k);
    let (bb, _, _) = filter_valid(&prod(&lb, &lb), w, h, &k);
    let (ab, _, _) = filter_valid(&prod(&la, &lb), w, h, &k);
    let total: f64 = (0..ow * oh)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / (ow * oh) as f64)
}

/// A reconstructed 3D representation that can be rendered from any pose.
pub trait Scene: Send + Sync {
    fn render(&self, pose: &CameraPose, settings: &RenderSettings) -> Result<RenderedView>;
}

/// Anything that maps a single image to a [`Scene`].
pub trait Reconstruct: Sync {
    fn name(&self) -> &str;

    fn input_resolution(&self) -> usize;

    /// Identifies the model in report hashes.
    fn fingerprint(&self) -> String;

    /// `id` names the instance; learned models ignore it, oracles use it to
    /// look up ground truth.
    fn reconstruct(&self, id: &str, image: &Image) -> Result<Box<dyn Scene + '_>>;
}

struct TriplaneScene<'a> {
    triplane: Triplane,
    params: &'a ReconstructorParams,
}

impl Scene for TriplaneScene<'_> {
    fn render(&self, pose: &CameraPose, settings: &RenderSettings) -> Result<RenderedView> {
        render(&self.triplane, &self.params.decoder, pose, settings)
    }
}

/// The learned reconstructor. Inputs at other resolutions are resized.
pub struct TrainedModel {
    pub params: ReconstructorParams,
    pub fingerprint: String,
}

impl Reconstruct for TrainedModel {
    fn name(&self) -> &str {
        "reconstructor"
    }

    fn input_resolution(&self) -> usize {
        self.params.config.input_resolution
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn reconstruct(&self, _id: &str, image: &Image) -> Result<Box<dyn Scene + '_>> {
        let r = self.input_resolution();
        let input = if image.width() == r && image.height() == r { image.clone() } else { image.resize(r, r) };
        Ok(Box::new(TriplaneScene { triplane: reconstruct(&self.params, &input)?, params: &self.params }))
    }
}

struct FieldScene<'a>(&'a ToyShape);

impl Scene for FieldScene<'_> {
    fn render(&self, pose: &CameraPose, settings: &RenderSettings) -> Result<RenderedView> {
        render_field(&self.0.field(), pose, settings)
    }
}

/// Returns the ground-truth field of each instance regardless of the image.
pub struct OracleModel {
    pub shapes: BTreeMap<String, ToyShape>,
    pub input_resolution: usize,
}

impl Reconstruct for OracleModel {
    fn name(&self) -> &str {
        "oracle"
    }

    fn input_resolution(&self) -> usize {
        self.input_resolution
    }

    fn fingerprint(&self) -> String {
        config_hash(&self.shapes.keys().collect::<Vec<_>>())
    }

    fn reconstruct(&self, id: &str, _image: &Image) -> Result<Box<dyn Scene + '_>> {
        let shape = self.shapes.get(id).ok_or_else(|| Error::InvalidArgument(format!("oracle has no shape {id}")))?;
        Ok(Box::new(FieldScene(shape)))
    }
}

struct EmptyScene;

impl Scene for EmptyScene {
    fn render(&self, pose: &CameraPose, settings: &RenderSettings) -> Result<RenderedView> {
        render_field(&|pts| vec![(0.0, [0.0; 3]); pts.len()], pose, settings)
    }
}

/// Zero density everywhere: renders pure background.
pub struct ZeroDensityModel {
    pub input_resolution: usize,
}

impl Reconstruct for ZeroDensityModel {
    fn name(&self) -> &str {
        "zero-density"
    }

    fn input_resolution(&self) -> usize {
        self.input_resolution
    }

    fn fingerprint(&self) -> String {
        "zero-density".into()
    }

    fn reconstruct(&self, _id: &str, _image: &Image) -> Result<Box<dyn Scene + '_>> {
        Ok(Box::new(EmptyScene))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Nvs,
    Semantic,
    SelfConsistency,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Nvs, Suite::Semantic, Suite::SelfConsistency];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Nvs => "nvs",
            Suite::Semantic => "semantic",
            Suite::SelfConsistency => "self-consistency",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub render_resolution: usize,
    pub samples_per_ray: usize,
    pub rig: Rig,
    pub crop_ratio: f64,
    pub semantic_views: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            render_resolution: 224,
            samples_per_ray: 96,
            rig: Rig::default(),
            crop_ratio: EVAL_EXPAND_RATIO,
            semantic_views: 7,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.settings(self.render_resolution).validate()?;
        if !(self.crop_ratio >= 1.0) {
            return invalid(format!("crop ratio {} must be at least 1", self.crop_ratio));
        }
        if self.semantic_views == 0 {
            return invalid("semantic view count must be positive");
        }
        Ok(())
    }

    fn settings(&self, resolution: usize) -> RenderSettings {
        RenderSettings::new(resolution, self.samples_per_ray).with_rig(self.rig)
    }
}

/// Azimuths `360·k/n`, elevation 0.
pub fn semantic_schedule(n: usize) -> Vec<RelativePose> {
    (0..n).map(|k| RelativePose { azimuth_deg: 360.0 * k as f64 / n as f64, elevation_deg: 0.0 }).collect()
}

const CONSISTENCY_AZIMUTHS: [f64; 13] =
    [0.0, 30.0, 60.0, -30.0, -60.0, 30.0, 60.0, -30.0, -60.0, 30.0, 60.0, -30.0, -60.0];
const CONSISTENCY_ELEVATIONS: [f64; 13] = [0.0, 0.0, 0.0, 0.0, 0.0, 30.0, 30.0, 30.0, 30.0, 60.0, 60.0, 60.0, 60.0];

pub fn self_consistency_schedule() -> Vec<RelativePose> {
    CONSISTENCY_AZIMUTHS
        .iter()
        .zip(CONSISTENCY_ELEVATIONS)
        .map(|(&azimuth_deg, elevation_deg)| RelativePose { azimuth_deg, elevation_deg })
        .collect()
}

/// Maps azimuth into `(-180, 180]` before composing with the canonical pose.
pub fn camera_at(rig: &Rig, delta: RelativePose) -> Result<CameraPose> {
    let mut az = delta.azimuth_deg.rem_euclid(360.0);
    if az > 180.0 {
        az -= 360.0;
    }
    rig.compose_relative(RelativePose::new(az, delta.elevation_deg)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub pose: RelativePose,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub perceptual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub perceptual: Option<f64>,
    pub similarity: Option<f64>,
}

impl Scores {
    fn mean_of(rows: impl Iterator<Item = Scores> + Clone) -> Scores {
        fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
            let vals: Vec<f64> = v.flatten().collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        }
        Scores {
            psnr: mean(rows.clone().map(|r| r.psnr)),
            ssim: mean(rows.clone().map(|r| r.ssim)),
            perceptual: mean(rows.clone().map(|r| r.perceptual)),
            similarity: mean(rows.map(|r| r.similarity)),
        }
    }

    fn of_views(views: &[ViewScore]) -> Scores {
        Scores::mean_of(views.iter().map(|v| Scores {
            psnr: v.psnr,
            ssim: v.ssim,
            perceptual: Some(v.perceptual),
            similarity: v.similarity,
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub id: String,
    #[serde(flatten)]
    pub scores: Scores,
    pub views: Vec<ViewScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub suite: Suite,
    pub model: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: EvalConfig,
    pub pose_schedule: Vec<RelativePose>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_ratio: Option<f64>,
    pub rows: Vec<InstanceRow>,
    pub aggregate: Scores,
    /// Always "omitted": FID needs an external classifier network.
    pub fid: String,
}

impl MetricsReport {
    fn assemble(
        suite: Suite,
        model: &dyn Reconstruct,
        config: &EvalConfig,
        pose_schedule: Vec<RelativePose>,
        crop_ratio: Option<f64>,
        rows: Vec<InstanceRow>,
    ) -> Self {
        let aggregate = Scores::mean_of(rows.iter().map(|r| r.scores.clone()));
        let config_hash = config_hash(&(suite, model.fingerprint(), config));
        MetricsReport {
            suite,
            model: model.name().to_string(),
            config_hash,
            seed: config.seed,
            config: *config,
            pose_schedule,
            crop_ratio,
            rows,
            aggregate,
            fid: "omitted".into(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn gray_render(scene: &dyn Scene, rig: &Rig, delta: RelativePose, settings: &RenderSettings) -> Result<RenderedView> {
    scene.render(&camera_at(rig, delta)?, settings)
}

fn matched(target: &Image, res: usize) -> Image {
    if target.width() == res && target.height() == res {
        target.clone()
    } else {
        target.resize(res, res)
    }
}

fn full_score(
    pred: &Image,
    target: &Image,
    pose: RelativePose,
    perceptual: &dyn PerceptualBackend,
) -> Result<ViewScore> {
    Ok(ViewScore {
        pose,
        psnr: Some(psnr(pred, target)?),
        ssim: Some(ssim(pred, target)?),
        perceptual: perceptual.distance(pred, target)?,
        similarity: None,
    })
}

fn finish_rows(rows: Vec<Result<(String, Vec<ViewScore>)>>) -> Result<Vec<InstanceRow>> {
    rows.into_iter().map(|r| r.map(|(id, views)| InstanceRow { id, scores: Scores::of_views(&views), views })).collect()
}

/// Renders each instance at its sealed poses and scores against the sealed
/// views, rendered at `config.render_resolution`.
pub fn nvs_suite(
    model: &dyn Reconstruct,
    instances: &[EvalInstance],
    perceptual: &dyn PerceptualBackend,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    if let Some(bad) = instances.iter().find(|i| i.views.is_empty()) {
        return Err(Error::Config(format!("instance {} has no sealed evaluation views", bad.id)));
    }
    let res = config.render_resolution;
    let settings = config.settings(res);
    let rows = instances
        .par_iter()
        .map(|inst| {
            let scene = model.reconstruct(&inst.id, &inst.input)?;
            let views = inst
                .views
                .iter()
                .map(|(delta, target)| {
                    let view = gray_render(scene.as_ref(), &config.rig, *delta, &settings)?;
                    let pred = composite_background(&view, [BACKGROUND_GRAY; 3]);
                    full_score(&pred, &matched(target, res), *delta, perceptual)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((inst.id.clone(), views))
        })
        .collect();
    let schedule = instances.first().map(|i| i.views.iter().map(|v| v.0).collect()).unwrap_or_default();
    Ok(MetricsReport::assemble(Suite::Nvs, model, config, schedule, None, finish_rows(rows)?))
}

/// Turntable of `config.semantic_views` renders per input, each compared
/// with the input view by embedder similarity and perceptual distance.
pub fn semantic_similarity_suite(
    model: &dyn Reconstruct,
    instances: &[(String, Image)],
    embedder: &dyn SemanticEmbedder,
    perceptual: &dyn PerceptualBackend,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    let res = config.render_resolution;
    let settings = config.settings(res);
    let schedule = semantic_schedule(config.semantic_views);
    let rows = instances
        .par_iter()
        .map(|(id, input)| {
            let scene = model.reconstruct(id, input)?;
            let target = matched(input, res);
            let f_input = embedder.embed(&target)?;
            let views = schedule
                .iter()
                .map(|&delta| {
                    let view = gray_render(scene.as_ref(), &config.rig, delta, &settings)?;
                    let pred = composite_background(&view, [BACKGROUND_GRAY; 3]);
                    Ok(ViewScore {
                        pose: delta,
                        psnr: None,
                        ssim: None,
                        perceptual: perceptual.distance(&pred, &target)?,
                        similarity: Some(cosine(&embedder.embed(&pred)?, &f_input)),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((id.clone(), views))
        })
        .collect();
    Ok(MetricsReport::assemble(Suite::Semantic, model, config, schedule, None, finish_rows(rows)?))
}

/// Mask of the rendered object, from accumulated opacity.
fn alpha_mask(view: &RenderedView) -> Vec<bool> {
    view.alpha.iter().map(|&a| a > 0.5).collect()
}

/// Feeds each reconstruction its own render at every scheduled pose, re-cropped
/// at `config.crop_ratio`, and scores the second reconstruction's canonical
/// render against the original input (at the input's resolution).
pub fn self_consistency_suite(
    model: &dyn Reconstruct,
    instances: &[(String, Image)],
    perceptual: &dyn PerceptualBackend,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    let settings = config.settings(config.render_resolution);
    let schedule = self_consistency_schedule();
    let rows = instances
        .par_iter()
        .map(|(id, input)| {
            if input.width() != input.height() {
                return invalid(format!("input {id} is not square"));
            }
            let scene = model.reconstruct(id, input)?;
            let back = config.settings(input.width());
            let views = schedule
                .iter()
                .map(|&delta| {
                    let view = gray_render(scene.as_ref(), &config.rig, delta, &settings)?;
                    let composite = composite_background(&view, [BACKGROUND_GRAY; 3]);
                    let mask = alpha_mask(&view);
                    let side = model.input_resolution();
                    let recrop = if mask.iter().any(|&m| m) {
                        crop_instance(&composite, &mask, config.crop_ratio, side, BACKGROUND_GRAY, id)?.image
                    } else {
                        composite.resize(side, side)
                    };
                    let second = model.reconstruct(id, &recrop)?;
                    let out = gray_render(second.as_ref(), &config.rig, RelativePose::IDENTITY, &back)?;
                    full_score(&composite_background(&out, [BACKGROUND_GRAY; 3]), input, delta, perceptual)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((id.clone(), views))
        })
        .collect();
    Ok(MetricsReport::assemble(
        Suite::SelfConsistency,
        model,
        config,
        schedule,
        Some(config.crop_ratio),
        finish_rows(rows)?,
    ))
}

/// Fixed-width summary: one row per report, PSNR↑ SSIM↑ perceptual↓ similarity↑.
pub fn summary_table(reports: &[MetricsReport]) -> String {
    let cell = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:<14} {:>6} {:>9} {:>9} {:>12} {:>12}",
        "suite", "model", "n", "PSNR↑", "SSIM↑", "perceptual↓", "similarity↑"
    );
    for r in reports {
        let a = &r.aggregate;
        let _ = writeln!(
            out,
            "{:<18} {:<14} {:>6} {:>9} {:>9} {:>12} {:>12}",
            r.suite.name(),
            r.model,
            r.rows.len(),
            cell(a.psnr, 2),
            cell(a.ssim, 4),
            cell(a.perceptual, 4),
            cell(a.similarity, 4)
        );
    }
    out
}
