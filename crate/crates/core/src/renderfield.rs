//! Triplane feature fields and differentiable emission–absorption rendering.
//!
//! [`render_var`] is a single tape operation over the triplane and decoder
//! parameters. Its forward pass walks the rays in chunks and keeps only the
//! composited pixels; the backward pass replays each chunk on a local tape,
//! so memory stays bounded at full resolution.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{scalar, BackwardFn, Graph, SparseMap, Var};
use crate::error::{invalid, Result};
use crate::geometry::{camera_rays, CameraPose, RayBundle, Rig, Vec3};
use crate::image::Image;
use crate::tensor::Tensor;

/// Multiplier on the softplus density head.
pub const DENSITY_SCALE: f64 = 8.0;

const POINTS_PER_CHUNK: usize = 16_384;

/// Three axis-aligned feature planes (xy, xz, yz) of shape `res × res × channels`
/// covering `[-1, 1]` on each axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplane {
    pub res: usize,
    pub channels: usize,
    /// `[3, res, res, channels]`.
    pub data: Tensor,
}

impl Triplane {
    pub fn new(res: usize, channels: usize, data: Tensor) -> Result<Self> {
        if res < 2 || channels == 0 {
            return invalid(format!("triplane needs res >= 2 and channels >= 1, got {res}x{channels}"));
        }
        if data.len() != 3 * res * res * channels {
            return invalid(format!(
                "triplane buffer has {} values, expected {}",
                data.len(),
                3 * res * res * channels
            ));
        }
        if !data.all_finite() {
            return invalid("triplane contains non-finite values");
        }
        Ok(Triplane { res, channels, data: data.reshape([3, res, res, channels]) })
    }

    pub fn constant(res: usize, channels: usize, value: f64) -> Self {
        Triplane { res, channels, data: Tensor::full([3, res, res, channels], value) }
    }

    pub fn shape(&self) -> [usize; 4] {
        [3, self.res, self.res, self.channels]
    }
}

/// In-plane coordinates of a point for the xy, xz and yz planes.
fn plane_coords(p: Vec3) -> [(f64, f64); 3] {
    [(p[0], p[1]), (p[0], p[2]), (p[1], p[2])]
}

/// Bilinear corner terms `(row index into [3·res·res], weight)` for one point.
fn triplane_terms(res: usize, p: Vec3, out: &mut Vec<(usize, f64)>) {
    let scale = (res - 1) as f64;
    for (plane, (a, b)) in plane_coords(p).into_iter().enumerate() {
        let u = ((a.clamp(-1.0, 1.0) + 1.0) * 0.5 * scale).min(scale);
        let v = ((b.clamp(-1.0, 1.0) + 1.0) * 0.5 * scale).min(scale);
        let (x0, y0) = ((u.floor() as usize).min(res - 2), (v.floor() as usize).min(res - 2));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let base = plane * res * res;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let w = wx * wy;
                if w != 0.0 {
                    out.push((base + (y0 + dy) * res + x0 + dx, w));
                }
            }
        }
    }
}

/// Sparse map from triplane rows `[3·res·res, channels]` to per-point features.
pub fn triplane_sampling_map(res: usize, points: &[Vec3]) -> SparseMap {
    let mut map = SparseMap::new(3 * res * res);
    let mut terms = Vec::with_capacity(12);
    for &p in points {
        terms.clear();
        triplane_terms(res, p, &mut terms);
        map.push_row(terms.iter().copied());
    }
    map
}

/// Sum over the three planes of the bilinearly interpolated features.
pub fn sample_triplane(triplane: &Triplane, points: &[Vec3]) -> Vec<Vec<f64>> {
    let map = triplane_sampling_map(triplane.res, points);
    map.apply(triplane.data.data(), triplane.channels).chunks(triplane.channels).map(<[f64]>::to_vec).collect()
}

/// MLP from a triplane feature to raw (density, r, g, b) logits.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldDecoder {
    /// `(weight [in, out], bias [out])` per layer; hidden layers use SiLU.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl FieldDecoder {
    pub fn init(channels: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![channels];
        dims.extend_from_slice(hidden);
        dims.push(4);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let weight = crate::reconstructor::init_weight(w[0], w[1], rng);
            layers.push((weight, Tensor::zeros([w[1]])));
        }
        // start semi-transparent: softplus(-3) * scale ~ 0.4
        if let Some((_, bias)) = layers.last_mut() {
            bias.data_mut()[0] = -3.0;
        }
        FieldDecoder { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDecoder {
        BoundDecoder {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (g.leaf(w.clone(), trainable), g.leaf(b.clone(), trainable)))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    /// Activated (density, rgb) for a batch of features, without a tape.
    pub fn decode(&self, features: &[Vec<f64>]) -> Vec<(f64, [f64; 3])> {
        let c = self.input_width();
        let x = Tensor::new([features.len(), c], features.concat());
        let raw = decoder_forward_plain(&self.layers, x);
        raw.data().chunks(4).map(activate).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BoundDecoder {
    pub layers: Vec<(Var, Var)>,
}

impl BoundDecoder {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

fn decoder_forward_plain(layers: &[(Tensor, Tensor)], mut x: Tensor) -> Tensor {
    for (i, (w, b)) in layers.iter().enumerate() {
        let mut y = x.matmul(w);
        let m = y.cols();
        for row in y.data_mut().chunks_mut(m) {
            for (r, bb) in row.iter_mut().zip(b.data()) {
                *r += bb;
            }
        }
        if i + 1 < layers.len() {
            y = y.map(|v| v * scalar::sigmoid(v));
        }
        x = y;
    }
    x
}

fn decoder_forward_graph(g: &mut Graph, layers: &[(Var, Var)], mut x: Var) -> Var {
    for (i, &(w, b)) in layers.iter().enumerate() {
        x = g.linear(x, w, b);
        if i + 1 < layers.len() {
            x = g.silu(x);
        }
    }
    x
}

fn activate(raw: &[f64]) -> (f64, [f64; 3]) {
    (
        DENSITY_SCALE * scalar::softplus(raw[0]),
        [scalar::sigmoid(raw[1]), scalar::sigmoid(raw[2]), scalar::sigmoid(raw[3])],
    )
}

/// Front-to-back compositing of one ray. Returns (rgb, alpha).
pub fn composite_ray(sigmas: &[f64], colors: &[[f64; 3]], deltas: &[f64]) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    for ((&s, c), &d) in sigmas.iter().zip(colors).zip(deltas) {
        let next = t * (-s * d).exp();
        let w = t - next;
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        t = next;
    }
    (rgb, 1.0 - t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub resolution: usize,
    pub samples_per_ray: usize,
    pub rig: Rig,
    /// Stratified jitter of sample depths, seeded; `None` samples bin centres.
    pub jitter: Option<u64>,
}

impl RenderSettings {
    pub fn new(resolution: usize, samples_per_ray: usize) -> Self {
        RenderSettings { resolution, samples_per_ray, rig: Rig::default(), jitter: None }
    }

    pub fn with_jitter(mut self, seed: Option<u64>) -> Self {
        self.jitter = seed;
        self
    }

    pub fn with_rig(mut self, rig: Rig) -> Self {
        self.rig = rig;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return invalid(format!("samples_per_ray must be >= 2, got {}", self.samples_per_ray));
        }
        if self.resolution < 8 {
            return invalid(format!("render resolution must be >= 8, got {}", self.resolution));
        }
        self.rig.validate()
    }
}

/// Sample positions along every ray of a view.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub rays: RayBundle,
    pub samples: usize,
    pub delta: f64,
    /// Depth offset of each sample within its bin, in `[0, 1)`.
    offsets: Option<Vec<f64>>,
}

impl RaySamples {
    pub fn new(pose: &CameraPose, settings: &RenderSettings) -> Result<Self> {
        settings.validate()?;
        let (near, far) = settings.rig.near_far();
        let rays = camera_rays(pose, settings.resolution, near, far)?;
        let s = settings.samples_per_ray;
        let offsets = settings.jitter.map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..rays.len() * s).map(|_| rng.random::<f64>()).collect()
        });
        Ok(RaySamples { delta: (far - near) / s as f64, rays, samples: s, offsets })
    }

    pub fn n_rays(&self) -> usize {
        self.rays.len()
    }

    pub fn point(&self, ray: usize, k: usize) -> Vec3 {
        let off = self.offsets.as_ref().map_or(0.5, |o| o[ray * self.samples + k]);
        let t = self.rays.near + (k as f64 + off) * self.delta;
        let (o, d) = (self.rays.origins[ray], self.rays.directions[ray]);
        [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
    }

    pub fn points(&self, rays: std::ops::Range<usize>) -> Vec<Vec3> {
        rays.flat_map(|r| (0..self.samples).map(move |k| (r, k))).map(|(r, k)| self.point(r, k)).collect()
    }
}

fn inside_unit_cube(p: &Vec3) -> bool {
    p.iter().all(|c| c.abs() <= 1.0)
}

/// Rendered pixels: row-major rgb and alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub resolution: usize,
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    pub pose: CameraPose,
}

impl RenderedView {
    fn from_rgba(resolution: usize, rgba: &[f64], pose: CameraPose) -> Self {
        let mut rgb = Vec::with_capacity(rgba.len() / 4 * 3);
        let mut alpha = Vec::with_capacity(rgba.len() / 4);
        for px in rgba.chunks(4) {
            rgb.extend_from_slice(&px[..3]);
            alpha.push(px[3]);
        }
        RenderedView { resolution, rgb, alpha, pose }
    }

    pub fn rgb_image(&self) -> Image {
        Image::new(self.resolution, self.resolution, self.rgb.clone())
    }
}

/// `rgb + (1 − alpha) · color` per pixel.
pub fn composite_background(view: &RenderedView, color: [f64; 3]) -> Image {
    let data = view
        .rgb
        .chunks(3)
        .zip(&view.alpha)
        .flat_map(|(c, &a)| [c[0] + (1.0 - a) * color[0], c[1] + (1.0 - a) * color[1], c[2] + (1.0 - a) * color[2]])
        .collect();
    Image::new(view.resolution, view.resolution, data)
}

/// Tape version of [`composite_background`] over a `[pixels, 4]` rgba variable.
pub fn composite_background_var(g: &mut Graph, rgba: Var, color: [f64; 3]) -> Var {
    let x = g.value(rgba);
    let n = x.len() / 4;
    let data = x
        .data()
        .chunks(4)
        .flat_map(|p| [p[0] + (1.0 - p[3]) * color[0], p[1] + (1.0 - p[3]) * color[1], p[2] + (1.0 - p[3]) * color[2]])
        .collect();
    g.custom(
        &[rgba],
        Tensor::new([n, 3], data),
        Box::new(move |args| {
            let gd = args
                .grad
                .data()
                .chunks(3)
                .flat_map(|q| [q[0], q[1], q[2], -(q[0] * color[0] + q[1] * color[1] + q[2] * color[2])])
                .collect();
            vec![Some(Tensor::new([n, 4], gd))]
        }),
    )
}

/// Renders any analytic field `points -> (density, rgb)`.
pub fn render_field(
    field: &dyn Fn(&[Vec3]) -> Vec<(f64, [f64; 3])>,
    pose: &CameraPose,
    settings: &RenderSettings,
) -> Result<RenderedView> {
    let samples = RaySamples::new(pose, settings)?;
    let s = samples.samples;
    let deltas = vec![samples.delta; s];
    let rays_per_chunk = (POINTS_PER_CHUNK / s).max(1);
    let mut rgba = Vec::with_capacity(samples.n_rays() * 4);
    let mut start = 0;
    while start < samples.n_rays() {
        let end = (start + rays_per_chunk).min(samples.n_rays());
        let pts = samples.points(start..end);
        let values = field(&pts);
        for ray in values.chunks(s) {
            let sig: Vec<f64> = ray.iter().map(|v| v.0).collect();
            let col: Vec<[f64; 3]> = ray.iter().map(|v| v.1).collect();
            let (c, a) = composite_ray(&sig, &col, &deltas);
            rgba.extend_from_slice(&[c[0], c[1], c[2], a]);
        }
        start = end;
    }
    Ok(RenderedView::from_rgba(settings.resolution, &rgba, *pose))
}

/// Tape op: raw decoder logits `[rays·S, 4]` → composited `[rays, 4]`.
fn composite_logits_var(g: &mut Graph, raw: Var, samples: usize, delta: f64, mask: Arc<Vec<bool>>) -> Var {
    let x = g.value(raw).data();
    let n_rays = x.len() / 4 / samples;
    let mut out = Vec::with_capacity(n_rays * 4);
    for r in 0..n_rays {
        let mut t = 1.0;
        let mut rgb = [0.0; 3];
        for k in 0..samples {
            let i = r * samples + k;
            let (mut sigma, c) = activate(&x[i * 4..i * 4 + 4]);
            if !mask[i] {
                sigma = 0.0;
            }
            let next = t * (-sigma * delta).exp();
            let w = t - next;
            for j in 0..3 {
                rgb[j] += w * c[j];
            }
            t = next;
        }
        out.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 1.0 - t]);
    }
    let backward: BackwardFn = Box::new(move |args| {
        let x = args.inputs[0].data();
        let gout = args.grad.data();
        let mut gx = vec![0.0; x.len()];
        let mut sig = vec![0.0; samples];
        let mut col = vec![[0.0; 3]; samples];
        let mut trans = vec![0.0; samples + 1];
        let mut w = vec![0.0; samples];
        for r in 0..n_rays {
            let g_rgb = [gout[r * 4], gout[r * 4 + 1], gout[r * 4 + 2]];
            let g_alpha = gout[r * 4 + 3];
            trans[0] = 1.0;
            for k in 0..samples {
                let i = r * samples + k;
                let (s, c) = activate(&x[i * 4..i * 4 + 4]);
                sig[k] = if mask[i] { s } else { 0.0 };
                col[k] = c;
                trans[k + 1] = trans[k] * (-sig[k] * delta).exp();
                w[k] = trans[k] - trans[k + 1];
            }
            let t_final = trans[samples];
            // suffix[k] = Σ_{u>k} w_u (g · c_u)
            let mut suffix = 0.0;
            for k in (0..samples).rev() {
                let i = r * samples + k;
                let gc = g_rgb[0] * col[k][0] + g_rgb[1] * col[k][1] + g_rgb[2] * col[k][2];
                let d_tau = trans[k + 1] * gc - suffix + g_alpha * t_final;
                suffix += w[k] * gc;
                if mask[i] {
                    gx[i * 4] = d_tau * delta * DENSITY_SCALE * scalar::sigmoid(x[i * 4]);
                }
                for j in 0..3 {
                    gx[i * 4 + 1 + j] = w[k] * g_rgb[j] * col[k][j] * (1.0 - col[k][j]);
                }
            }
        }
        vec![Some(Tensor::new(args.inputs[0].shape(), gx))]
    });
    g.custom(&[raw], Tensor::new([n_rays, 4], out), backward)
}

/// Builds one chunk of the render on `g`: triplane sampling, decoding, compositing.
fn render_chunk(
    g: &mut Graph,
    planes: Var,
    decoder: &[(Var, Var)],
    res: usize,
    samples: &RaySamples,
    rays: std::ops::Range<usize>,
) -> Var {
    let pts = samples.points(rays);
    let mask = Arc::new(pts.iter().map(inside_unit_cube).collect::<Vec<_>>());
    let map = Arc::new(triplane_sampling_map(res, &pts));
    let feats = g.sparse(planes, map);
    let raw = decoder_forward_graph(g, decoder, feats);
    composite_logits_var(g, raw, samples.samples, samples.delta, mask)
}

/// Differentiable render of `planes` (`[3, res, res, c]`) through `decoder`.
/// Output is `[resolution², 4]` rgba; the pose is a constant.
pub fn render_var(
    g: &mut Graph,
    planes: Var,
    decoder: &BoundDecoder,
    pose: &CameraPose,
    settings: &RenderSettings,
) -> Result<Var> {
    let samples = Arc::new(RaySamples::new(pose, settings)?);
    let shape = g.value(planes).shape().to_vec();
    if shape.len() != 4 || shape[0] != 3 || shape[1] != shape[2] {
        return invalid(format!("triplane variable has shape {shape:?}"));
    }
    let (res, channels) = (shape[1], shape[3]);
    let rows_shape = [3 * res * res, channels];
    let rays_per_chunk = (POINTS_PER_CHUNK / samples.samples).max(1);
    let n_rays = samples.n_rays();
    let chunks: Arc<Vec<std::ops::Range<usize>>> =
        Arc::new((0..n_rays).step_by(rays_per_chunk).map(|s| s..(s + rays_per_chunk).min(n_rays)).collect());

    let mut inputs = vec![planes];
    inputs.extend(decoder.vars());
    let n_layers = decoder.layers.len();

    // forward without a persistent tape
    let mut out = Vec::with_capacity(n_rays * 4);
    {
        for range in chunks.iter() {
            let mut local = Graph::new();
            let p = local.constant(g.value(planes).clone().reshape(rows_shape));
            let dec: Vec<(Var, Var)> = decoder
                .layers
                .iter()
                .map(|&(w, b)| (local.constant(g.value(w).clone()), local.constant(g.value(b).clone())))
                .collect();
            let v = render_chunk(&mut local, p, &dec, res, &samples, range.clone());
            out.extend_from_slice(local.value(v).data());
        }
    }

    let backward: BackwardFn = Box::new(move |args| {
        let mut acc: Vec<Option<Tensor>> = args.inputs.iter().map(|_| None).collect();
        let gout = args.grad.data();
        for range in chunks.iter() {
            let mut local = Graph::new();
            let p = local.leaf(args.inputs[0].clone().reshape(rows_shape), args.needs[0]);
            let dec: Vec<(Var, Var)> = (0..n_layers)
                .map(|l| {
                    let (iw, ib) = (1 + 2 * l, 2 + 2 * l);
                    (
                        local.leaf(args.inputs[iw].clone(), args.needs[iw]),
                        local.leaf(args.inputs[ib].clone(), args.needs[ib]),
                    )
                })
                .collect();
            let v = render_chunk(&mut local, p, &dec, res, &samples, range.clone());
            let seed = local.constant(Tensor::new([range.len(), 4], gout[range.start * 4..range.end * 4].to_vec()));
            let loss = local.dot(v, seed);
            let mut grads = local.backward(loss);
            let leaves: Vec<Var> = std::iter::once(p).chain(dec.iter().flat_map(|&(w, b)| [w, b])).collect();
            for (slot, (&leaf, input)) in acc.iter_mut().zip(leaves.iter().zip(args.inputs)) {
                if !local.requires_grad(leaf) {
                    continue;
                }
                let gr = grads.take_or_zeros(leaf, input);
                match slot {
                    Some(a) => a.add_assign(&gr),
                    None => *slot = Some(gr.reshape(input.shape().to_vec())),
                }
            }
        }
        acc
    });
    Ok(g.custom(&inputs, Tensor::new([n_rays, 4], out), backward))
}

/// Plain render of a triplane.
pub fn render(
    triplane: &Triplane,
    decoder: &FieldDecoder,
    pose: &CameraPose,
    settings: &RenderSettings,
) -> Result<RenderedView> {
    if decoder.input_width() != triplane.channels {
        return invalid(format!(
            "decoder expects {} channels, triplane has {}",
            decoder.input_width(),
            triplane.channels
        ));
    }
    let mut g = Graph::new();
    let planes = g.constant(triplane.data.clone());
    let dec = decoder.bind(&mut g, false);
    let v = render_var(&mut g, planes, &dec, pose, settings)?;
    Ok(RenderedView::from_rgba(settings.resolution, g.value(v).data(), *pose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{canonical_pose, RelativePose};

    fn small_model(seed: u64) -> (Triplane, FieldDecoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * 6 * 6 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tri = Triplane::new(6, 4, Tensor::new([3, 6, 6, 4], data)).unwrap();
        let mut dec = FieldDecoder::init(4, &[8, 8], &mut rng);
        dec.layers.last_mut().unwrap().1.data_mut()[0] = 0.5;
        (tri, dec)
    }

    /// Reference bilinear lookup written out corner by corner.
    fn reference_sample(tri: &Triplane, p: Vec3) -> Vec<f64> {
        let r = tri.res;
        let mut out = vec![0.0; tri.channels];
        for (plane, (a, b)) in [(p[0], p[1]), (p[0], p[2]), (p[1], p[2])].into_iter().enumerate() {
            let u = (a.clamp(-1.0, 1.0) + 1.0) / 2.0 * (r - 1) as f64;
            let v = (b.clamp(-1.0, 1.0) + 1.0) / 2.0 * (r - 1) as f64;
            let x0 = (u.floor() as usize).min(r - 2);
            let y0 = (v.floor() as usize).min(r - 2);
            let fx = u - x0 as f64;
            let fy = v - y0 as f64;
            let at = |x: usize, y: usize, ch: usize| tri.data.data()[((plane * r + y) * r + x) * tri.channels + ch];
            for ch in 0..tri.channels {
                out[ch] += at(x0, y0, ch) * (1.0 - fx) * (1.0 - fy)
                    + at(x0 + 1, y0, ch) * fx * (1.0 - fy)
                    + at(x0, y0 + 1, ch) * (1.0 - fx) * fy
                    + at(x0 + 1, y0 + 1, ch) * fx * fy;
            }
        }
        out
    }

    #[test]
    fn constant_planes_give_three_times_value() {
        let tri = Triplane::constant(5, 3, 0.7);
        for f in sample_triplane(&tri, &[[0.1, -0.3, 0.9], [-1.0, 1.0, 0.0], [2.0, -5.0, 0.4]]) {
            assert!(f.iter().all(|v| (v - 2.1).abs() < 1e-12));
        }
    }

    #[test]
    fn grid_nodes_are_exact() {
        let (tri, _) = small_model(1);
        // res 6: node k sits at -1 + 2k/5
        let node = |k: usize| -1.0 + 2.0 * k as f64 / 5.0;
        let p = [node(1), node(4), node(2)];
        let got = &sample_triplane(&tri, &[p])[0];
        let at = |plane: usize, y: usize, x: usize, ch: usize| tri.data.data()[((plane * 6 + y) * 6 + x) * 4 + ch];
        for ch in 0..4 {
            let expect = at(0, 4, 1, ch) + at(1, 2, 1, ch) + at(2, 2, 4, ch);
            assert!((got[ch] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_matches_reference() {
        let (tri, _) = small_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..200).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.2..1.2))).collect();
        let got = sample_triplane(&tri, &pts);
        for (p, g) in pts.iter().zip(&got) {
            let r = reference_sample(&tri, *p);
            for (a, b) in g.iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_density_renders_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tri = Triplane::constant(4, 2, 0.0);
        let mut dec = FieldDecoder::init(2, &[4], &mut rng);
        dec.layers.last_mut().unwrap().1.data_mut()[0] = -800.0;
        let view = render(&tri, &dec, &canonical_pose(1.8, 40.0).unwrap(), &RenderSettings::new(8, 8)).unwrap();
        assert!(view.alpha.iter().all(|&a| a.abs() < 1e-12));
        assert!(view.rgb.iter().all(|&c| c.abs() < 1e-12));
    }

    #[test]
    fn sphere_silhouette_matches_projection() {
        let radius = 1.0;
        let rig = Rig { radius: 4.0, fov_deg: 40.0 };
        let settings = RenderSettings::new(64, 256).with_rig(rig);
        let sphere = |pts: &[Vec3]| -> Vec<(f64, [f64; 3])> {
            pts.iter().map(|p| (if crate::geometry::norm(*p) <= radius { 1e3 } else { 0.0 }, [1.0, 0.5, 0.2])).collect()
        };
        let pose = rig.canonical();
        let view = render_field(&sphere, &pose, &settings).unwrap();
        let area = view.alpha.iter().filter(|&&a| a > 0.5).count() as f64;
        let measured = (area / std::f64::consts::PI).sqrt();
        let expected = pose.focal_px(64) * (radius / rig.radius).asin().tan();
        assert!((measured - expected).abs() < 1.0, "{measured} vs {expected}");
        // centred: alpha symmetric under flips
        let a = |x: usize, y: usize| view.alpha[y * 64 + x];
        for y in 0..64 {
            for x in 0..64 {
                assert!((a(x, y) - a(63 - x, y)).abs() < 1e-9 && (a(x, y) - a(x, 63 - y)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn background_blend() {
        let pose = canonical_pose(1.8, 40.0).unwrap();
        let n = 4;
        let mk =
            |rgb: f64, alpha: f64| RenderedView { resolution: 2, rgb: vec![rgb; n * 3], alpha: vec![alpha; n], pose };
        let gray = [0.5; 3];
        assert!(composite_background(&mk(0.0, 0.0), gray).data().iter().all(|&v| v == 0.5));
        assert!(composite_background(&mk(0.3, 1.0), gray).data().iter().all(|&v| v == 0.3));
        assert!(composite_background(&mk(0.25, 0.5), gray).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn compositing_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = 12;
            let sig: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
            let col: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random::<f64>())).collect();
            let d = vec![0.1; n];
            let (rgb, alpha) = composite_ray(&sig, &col, &d);
            let cmax = col.iter().flatten().cloned().fold(0.0, f64::max);
            assert!((0.0..=1.0).contains(&alpha));
            assert!(rgb.iter().all(|&c| c <= alpha * cmax + 1e-6));
            // more density at sample k cannot raise transmittance past it
            let k = rng.random_range(0..n);
            let mut denser = sig.clone();
            denser[k] += rng.random_range(0.01..3.0);
            let t_before = (-sig[..=k].iter().sum::<f64>() * 0.1).exp();
            let t_after = (-denser[..=k].iter().sum::<f64>() * 0.1).exp();
            assert!(t_after < t_before);
            let (_, a2) = composite_ray(&denser, &col, &d);
            assert!(a2 >= alpha);
        }
    }

    #[test]
    fn graph_render_matches_plain_and_decoder_path() {
        let (tri, dec) = small_model(3);
        let pose = crate::geometry::compose_relative(RelativePose::new(20.0, 10.0).unwrap()).unwrap();
        let settings = RenderSettings::new(8, 6);
        let view = render(&tri, &dec, &pose, &settings).unwrap();
        let decoded = |pts: &[Vec3]| -> Vec<(f64, [f64; 3])> {
            let feats = sample_triplane(&tri, pts);
            dec.decode(&feats)
                .into_iter()
                .zip(pts)
                .map(|((s, c), p)| (if inside_unit_cube(p) { s } else { 0.0 }, c))
                .collect()
        };
        let reference = render_field(&decoded, &pose, &settings).unwrap();
        for (a, b) in view.rgb.iter().zip(&reference.rgb) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in view.alpha.iter().zip(&reference.alpha) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    #[test]
    fn pixel_gradient_matches_finite_difference() {
        let (tri, dec) = small_model(11);
        let pose = crate::geometry::compose_relative(RelativePose::new(25.0, -15.0).unwrap()).unwrap();
        let settings = RenderSettings::new(8, 8);
        let pixel_value =
            |t: &Triplane, px: usize, ch: usize| render(t, &dec, &pose, &settings).unwrap().rgb[px * 3 + ch];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut checked = 0;
        while checked < 20 {
            let (px, ch) = (rng.random_range(0..64), rng.random_range(0..3));
            let mut g = Graph::new();
            let planes = g.param(tri.data.clone());
            let bound = dec.bind(&mut g, false);
            let out = render_var(&mut g, planes, &bound, &pose, &settings).unwrap();
            let mut pick = Tensor::zeros([64, 4]);
            pick.data_mut()[px * 4 + ch] = 1.0;
            let w = g.constant(pick);
            let prod = g.mul(out, w);
            let loss = g.sum(prod);
            let grads = g.backward(loss);
            let grad = grads.get(planes).unwrap();
            let live: Vec<usize> = (0..grad.len()).filter(|&i| grad.data()[i].abs() > 1e-4).collect();
            if live.is_empty() {
                continue;
            }
            let entry = live[rng.random_range(0..live.len())];
            let h = 1e-3;
            let mut plus = tri.clone();
            plus.data.data_mut()[entry] += h;
            let mut minus = tri.clone();
            minus.data.data_mut()[entry] -= h;
            let fd = (pixel_value(&plus, px, ch) - pixel_value(&minus, px, ch)) / (2.0 * h);
            let a = grad.data()[entry];
            assert!((a - fd).abs() / a.abs().max(fd.abs()) < 1e-3, "pixel {px}/{ch} entry {entry}: {a} vs {fd}");
            checked += 1;
        }
    }
}
