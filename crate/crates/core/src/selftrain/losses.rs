use std::sync::Arc;

use rand::Rng;

use super::{
    sample_cycle_pose, sample_semantic_poses, CurriculumState, CycleMode, LossWeights, SemanticEmbedder, SemanticMode,
};
use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::geometry::RelativePose;
use crate::image::{resize_map, Image, BACKGROUND_GRAY};
use crate::perceptual::PerceptualBackend;
use crate::reconstructor::{reconstruct_var, BoundParams, ModelConfig};
use crate::renderfield::{composite_background_var, render_var, BoundDecoder, RenderSettings};
use crate::tensor::Tensor;

const GRAY: [f64; 3] = [BACKGROUND_GRAY; 3];

/// Everything the loss functions need besides parameters and data.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub config: &'a ModelConfig,
    pub render: RenderSettings,
    pub weights: LossWeights,
    pub perceptual: &'a dyn PerceptualBackend,
    pub embedder: &'a dyn SemanticEmbedder,
    pub semantic_views: usize,
    pub cycle_mode: CycleMode,
    pub semantic_mode: SemanticMode,
}

impl LossContext<'_> {
    fn image_var(&self, g: &mut Graph, image: &Image) -> Result<Var> {
        let r = self.config.input_resolution;
        if image.width() != r || image.height() != r {
            return invalid(format!("expected a {r}x{r} model input, got {}x{}", image.width(), image.height()));
        }
        Ok(g.constant(image.to_tensor()))
    }

    fn target(&self, g: &mut Graph, image: &Image) -> Var {
        let r = self.render.resolution;
        g.constant(image.resize(r, r).to_tensor())
    }

    /// Gray-composited `[res², 3]` render at an offset from the canonical view.
    fn render_gray(&self, g: &mut Graph, planes: Var, decoder: &BoundDecoder, delta: RelativePose) -> Result<Var> {
        let pose = self.render.rig.compose_relative(delta)?;
        let rgba = render_var(g, planes, decoder, &pose, &self.render)?;
        Ok(composite_background_var(g, rgba, GRAY))
    }

    fn render_gray_detached(
        &self,
        g: &mut Graph,
        planes: Var,
        decoder: &BoundDecoder,
        delta: RelativePose,
    ) -> Result<Var> {
        let planes = g.detach(planes);
        let frozen = BoundDecoder { layers: decoder.layers.iter().map(|&(w, b)| (g.detach(w), g.detach(b))).collect() };
        self.render_gray(g, planes, &frozen, delta)
    }

    fn to_model_resolution(&self, g: &mut Graph, rendered: Var) -> Var {
        let (src, dst) = (self.render.resolution, self.config.input_resolution);
        if src == dst {
            rendered
        } else {
            g.sparse(rendered, Arc::new(resize_map(src, src, dst, dst)))
        }
    }
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Var {
    let mut total: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, w);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
}

/// `(1/n) Σ [MSE(pred, target) + λ · perceptual(pred, target)]` over rendered views.
pub fn multi_view_loss_var(g: &mut Graph, ctx: &LossContext, preds: &[Var], targets: &[Image]) -> Result<Var> {
    if preds.is_empty() || preds.len() != targets.len() {
        return invalid(format!("{} predictions for {} target views", preds.len(), targets.len()));
    }
    let mut terms = Vec::new();
    for (&p, t) in preds.iter().zip(targets) {
        let tv = ctx.target(g, t);
        terms.push((1.0, g.mse(p, tv)));
        if ctx.weights.lambda_perceptual > 0.0 {
            terms.push((ctx.weights.lambda_perceptual, ctx.perceptual.distance_var(g, p, tv, ctx.render.resolution)?));
        }
    }
    let sum = weighted_sum(g, &terms);
    Ok(g.scale(sum, 1.0 / preds.len() as f64))
}

/// Multi-view supervised loss of one synthetic sample.
pub fn supervised_loss_var(
    g: &mut Graph,
    ctx: &LossContext,
    params: &BoundParams,
    input: &Image,
    views: &[(RelativePose, Image)],
) -> Result<Var> {
    if views.is_empty() {
        return invalid("supervised loss needs at least one posed target view");
    }
    let x = ctx.image_var(g, input)?;
    let planes = reconstruct_var(g, ctx.config, params, x);
    let decoder = params.decoder();
    let preds = views.iter().map(|(d, _)| ctx.render_gray(g, planes, &decoder, *d)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Image> = views.iter().map(|(_, im)| im.clone()).collect();
    multi_view_loss_var(g, ctx, &preds, &targets)
}

/// MSE between the canonical-view render of `planes` and the input image.
pub fn input_view_loss_var(
    g: &mut Graph,
    ctx: &LossContext,
    planes: Var,
    decoder: &BoundDecoder,
    input: &Image,
) -> Result<Var> {
    let pred = ctx.render_gray(g, planes, decoder, RelativePose::IDENTITY)?;
    let target = ctx.target(g, input);
    Ok(g.mse(pred, target))
}

/// Intermediate cycle image: render at the offset view, gray-composite, resize
/// to the model input. Computed without any gradient path.
pub fn cycle_first_pass(
    g: &mut Graph,
    ctx: &LossContext,
    planes: Var,
    decoder: &BoundDecoder,
    delta: RelativePose,
) -> Result<Tensor> {
    let rendered = ctx.render_gray_detached(g, planes, decoder, delta)?;
    let resized = ctx.to_model_resolution(g, rendered);
    Ok(g.value(resized).clone())
}

/// Reconstruct from the intermediate view and render back at the original
/// camera; MSE against the input.
pub fn cycle_second_pass_var(
    g: &mut Graph,
    ctx: &LossContext,
    params: &BoundParams,
    intermediate: Var,
    input: &Image,
    delta: RelativePose,
) -> Result<Var> {
    let planes = reconstruct_var(g, ctx.config, params, intermediate);
    let back = ctx.render_gray(g, planes, &params.decoder(), delta.inverse())?;
    let target = ctx.target(g, input);
    Ok(g.mse(back, target))
}

pub fn cycle_loss_var(
    g: &mut Graph,
    ctx: &LossContext,
    params: &BoundParams,
    planes: Var,
    input: &Image,
    delta: RelativePose,
) -> Result<Var> {
    let intermediate = match ctx.cycle_mode {
        CycleMode::StopGradient => {
            let t = cycle_first_pass(g, ctx, planes, &params.decoder(), delta)?;
            g.constant(t)
        }
        CycleMode::EndToEnd => {
            let rendered = ctx.render_gray(g, planes, &params.decoder(), delta)?;
            ctx.to_model_resolution(g, rendered)
        }
    };
    cycle_second_pass_var(g, ctx, params, intermediate, input, delta)
}

/// Index of the least similar candidate; the lowest index wins exact ties.
pub fn select_hard_negative(similarities: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in similarities.iter().enumerate() {
        if best.is_none_or(|b| s < similarities[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticOutcome {
    pub similarities: Vec<f64>,
    /// `None` in naive mode, where every view contributes.
    pub selected: Option<usize>,
}

pub fn semantic_loss_var(
    g: &mut Graph,
    ctx: &LossContext,
    planes: Var,
    decoder: &BoundDecoder,
    input: &Image,
    poses: &[RelativePose],
) -> Result<(Var, SemanticOutcome)> {
    if poses.is_empty() {
        return invalid("semantic loss needs at least one view");
    }
    let reference = ctx.embedder.embed(input)?;
    let reference = g.constant(Tensor::new([reference.len()], reference));
    let res = ctx.render.resolution;
    let similarity_var = |g: &mut Graph, delta: RelativePose| -> Result<Var> {
        let view = ctx.render_gray(g, planes, decoder, delta)?;
        let e = ctx.embedder.embed_var(g, view, res)?;
        Ok(g.dot(e, reference))
    };
    match ctx.semantic_mode {
        SemanticMode::HardNegative => {
            let mut similarities = Vec::with_capacity(poses.len());
            for &d in poses {
                let view = ctx.render_gray_detached(g, planes, decoder, d)?;
                let e = ctx.embedder.embed_var(g, view, res)?;
                similarities.push(super::cosine(g.value(e).data(), g.value(reference).data()));
            }
            let k = select_hard_negative(&similarities).expect("non-empty");
            let s = similarity_var(g, poses[k])?;
            Ok((g.scale(s, -1.0), SemanticOutcome { similarities, selected: Some(k) }))
        }
        SemanticMode::Naive => {
            let mut terms = Vec::with_capacity(poses.len());
            let mut similarities = Vec::with_capacity(poses.len());
            for &d in poses {
                let s = similarity_var(g, d)?;
                similarities.push(g.value(s).item());
                terms.push((-1.0 / poses.len() as f64, s));
            }
            Ok((weighted_sum(g, &terms), SemanticOutcome { similarities, selected: None }))
        }
    }
}

/// Unweighted self-training loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SelfTrainComponents {
    pub input: f64,
    pub pix: f64,
    pub sem: f64,
}

pub fn combine_self_training(weights: &LossWeights, c: &SelfTrainComponents) -> f64 {
    weights.lambda_in * c.input + weights.lambda_pix * c.pix + weights.lambda_sem * c.sem
}

/// `λ_in·L_in + λ_pix·L_cycle + λ_sem·L_sem` for one single-view sample.
/// Terms with zero weight are not evaluated; their components read 0.
pub fn self_training_loss_var(
    g: &mut Graph,
    ctx: &LossContext,
    params: &BoundParams,
    input: &Image,
    state: &CurriculumState,
    rng: &mut impl Rng,
) -> Result<(Var, SelfTrainComponents)> {
    let delta = sample_cycle_pose(state, rng)?;
    let sem_poses = sample_semantic_poses(ctx.semantic_views, rng)?;
    let w = ctx.weights;
    let mut comps = SelfTrainComponents::default();
    if !w.self_training_enabled() {
        return Ok((g.constant(Tensor::scalar(0.0)), comps));
    }
    let x = ctx.image_var(g, input)?;
    let planes = reconstruct_var(g, ctx.config, params, x);
    let decoder = params.decoder();
    let mut terms = Vec::new();
    if w.lambda_in > 0.0 {
        let v = input_view_loss_var(g, ctx, planes, &decoder, input)?;
        comps.input = g.value(v).item();
        terms.push((w.lambda_in, v));
    }
    if w.lambda_pix > 0.0 {
        let v = cycle_loss_var(g, ctx, params, planes, input, delta)?;
        comps.pix = g.value(v).item();
        terms.push((w.lambda_pix, v));
    }
    if w.lambda_sem > 0.0 {
        let (v, _) = semantic_loss_var(g, ctx, planes, &decoder, input, &sem_poses)?;
        comps.sem = g.value(v).item();
        terms.push((w.lambda_sem, v));
    }
    Ok((weighted_sum(g, &terms), comps))
}
