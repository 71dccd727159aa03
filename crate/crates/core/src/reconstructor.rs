//! Image → triplane reconstructor: patch tokens, learned plane queries with
//! cross-attention, and an upsampler that unpacks tokens into feature planes.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::image::Image;
use crate::renderfield::{BoundDecoder, FieldDecoder, Triplane};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_resolution: usize,
    pub patch_size: usize,
    pub token_width: usize,
    pub blocks: usize,
    /// Triplane side length `h = w`.
    pub triplane_res: usize,
    pub triplane_channels: usize,
    /// Query tokens per plane side; each token unpacks to a
    /// `(triplane_res / plane_tokens)²` patch of the plane.
    pub plane_tokens: usize,
    pub decoder_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_resolution: 128,
            patch_size: 8,
            token_width: 256,
            blocks: 4,
            triplane_res: 32,
            triplane_channels: 16,
            plane_tokens: 8,
            decoder_hidden: vec![64, 64, 64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_resolution == 0 || !self.input_resolution.is_multiple_of(self.patch_size)
        {
            return invalid(format!(
                "input resolution {} must be a positive multiple of patch size {}",
                self.input_resolution, self.patch_size
            ));
        }
        if !self.triplane_res.is_power_of_two() || self.triplane_res < 2 {
            return invalid(format!("triplane resolution {} must be a power of two >= 2", self.triplane_res));
        }
        if self.plane_tokens == 0 || !self.triplane_res.is_multiple_of(self.plane_tokens) {
            return invalid(format!(
                "plane_tokens {} must divide triplane resolution {}",
                self.plane_tokens, self.triplane_res
            ));
        }
        if self.token_width == 0 || self.triplane_channels == 0 {
            return invalid("token width and triplane channels must be positive");
        }
        Ok(())
    }

    fn upsample(&self) -> usize {
        self.triplane_res / self.plane_tokens
    }

    fn n_image_tokens(&self) -> usize {
        (self.input_resolution / self.patch_size).pow(2)
    }

    fn n_queries(&self) -> usize {
        3 * self.plane_tokens * self.plane_tokens
    }
}

pub(crate) fn init_weight(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
    Tensor::new([fan_in, fan_out], (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect())
}

fn init_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructorParams {
    pub config: ModelConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub image_pos: Tensor,
    pub queries: Tensor,
    pub blocks: Vec<BlockParams>,
    pub up_w: Tensor,
    pub up_b: Tensor,
    pub plane_bias: Tensor,
    pub decoder: FieldDecoder,
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ReconstructorParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.token_width;
    let p = config.patch_size;
    let out = config.upsample().pow(2) * config.triplane_channels;
    let patch_w = init_weight(p * p * 3, d, &mut rng);
    let image_pos = init_normal(&[config.n_image_tokens(), d], 0.1, &mut rng);
    let queries = init_normal(&[config.n_queries(), d], 1.0, &mut rng);
    let blocks = (0..config.blocks)
        .map(|_| BlockParams {
            wq: init_weight(d, d, &mut rng),
            wk: init_weight(d, d, &mut rng),
            wv: init_weight(d, d, &mut rng),
            wo: init_weight(d, d, &mut rng).map(|v| v * 0.5),
            mlp_w1: init_weight(d, 2 * d, &mut rng),
            mlp_b1: Tensor::zeros([2 * d]),
            mlp_w2: init_weight(2 * d, d, &mut rng).map(|v| v * 0.5),
            mlp_b2: Tensor::zeros([d]),
        })
        .collect();
    let up_w = init_weight(d, out, &mut rng).map(|v| v * 0.5);
    let h = config.triplane_res;
    let decoder = FieldDecoder::init(config.triplane_channels, &config.decoder_hidden, &mut rng);
    Ok(ReconstructorParams {
        config: config.clone(),
        patch_w,
        patch_b: Tensor::zeros([d]),
        image_pos,
        queries,
        blocks,
        up_w,
        up_b: Tensor::zeros([out]),
        plane_bias: Tensor::zeros([3, h, h, config.triplane_channels]),
        decoder,
    })
}

/// Parameters bound as leaves of a tape, mirroring [`ReconstructorParams::tensors`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    n_blocks: usize,
    n_decoder: usize,
}

const BLOCK_TENSORS: usize = 8;

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn at(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn block(&self, b: usize, k: usize) -> Var {
        self.vars[4 + b * BLOCK_TENSORS + k]
    }

    fn after_blocks(&self, k: usize) -> Var {
        self.vars[4 + self.n_blocks * BLOCK_TENSORS + k]
    }

    pub fn decoder(&self) -> BoundDecoder {
        let start = 4 + self.n_blocks * BLOCK_TENSORS + 3;
        let d = &self.vars[start..start + self.n_decoder];
        BoundDecoder { layers: d.chunks(2).map(|c| (c[0], c[1])).collect() }
    }
}

impl ReconstructorParams {
    /// All tensors in a fixed order shared by binding, optimizers and checkpoints.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.image_pos, &self.queries];
        for b in &self.blocks {
            v.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.mlp_w1, &b.mlp_b1, &b.mlp_w2, &b.mlp_b2]);
        }
        v.extend([&self.up_w, &self.up_b, &self.plane_bias]);
        v.extend(self.decoder.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.patch_w, &mut self.patch_b, &mut self.image_pos, &mut self.queries];
        for b in &mut self.blocks {
            v.extend([
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.mlp_w1,
                &mut b.mlp_b1,
                &mut b.mlp_w2,
                &mut b.mlp_b2,
            ]);
        }
        v.extend([&mut self.up_w, &mut self.up_b, &mut self.plane_bias]);
        v.extend(self.decoder.tensors_mut());
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["patch_w", "patch_b", "image_pos", "queries"].map(String::from).to_vec();
        for i in 0..self.blocks.len() {
            for n in ["wq", "wk", "wv", "wo", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"] {
                v.push(format!("block{i}.{n}"));
            }
        }
        v.extend(["up_w", "up_b", "plane_bias"].map(String::from));
        for i in 0..self.decoder.layers.len() {
            v.push(format!("decoder{i}.w"));
            v.push(format!("decoder{i}.b"));
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self.tensors().into_iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        BoundParams { vars, n_blocks: self.blocks.len(), n_decoder: 2 * self.decoder.layers.len() }
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let r = self.config.input_resolution;
        if image.width() != r || image.height() != r {
            return invalid(format!("expected a {r}x{r} input image, got {}x{}", image.width(), image.height()));
        }
        Ok(())
    }
}

/// Index map from a row-major `[r·r, 3]` image to `[patches, p·p·3]`.
fn patchify_index(resolution: usize, patch: usize) -> Vec<usize> {
    let per_side = resolution / patch;
    let mut idx = Vec::with_capacity(resolution * resolution * 3);
    for py in 0..per_side {
        for px in 0..per_side {
            for dy in 0..patch {
                for dx in 0..patch {
                    let pixel = (py * patch + dy) * resolution + px * patch + dx;
                    idx.extend([pixel * 3, pixel * 3 + 1, pixel * 3 + 2]);
                }
            }
        }
    }
    idx
}

/// Index map from upsampler output `[queries, u·u·c]` to planes `[3, h, h, c]`.
fn unpack_index(config: &ModelConfig) -> Vec<usize> {
    let (h, s, u, c) = (config.triplane_res, config.plane_tokens, config.upsample(), config.triplane_channels);
    let row = u * u * c;
    let mut idx = Vec::with_capacity(3 * h * h * c);
    for plane in 0..3 {
        for y in 0..h {
            for x in 0..h {
                let token = plane * s * s + (y / u) * s + x / u;
                let sub = (y % u) * u + x % u;
                for ch in 0..c {
                    idx.push(token * row + sub * c + ch);
                }
            }
        }
    }
    idx
}

/// Tape forward pass. `image` is a `[r·r, 3]` variable; returns `[3, h, h, c]`.
pub fn reconstruct_var(g: &mut Graph, config: &ModelConfig, params: &BoundParams, image: Var) -> Var {
    let d = config.token_width;
    let p = config.patch_size;
    let patches =
        g.gather(image, Arc::new(patchify_index(config.input_resolution, p)), &[config.n_image_tokens(), p * p * 3]);
    let tokens = g.linear(patches, params.at(0), params.at(1));
    let tokens = g.add(tokens, params.at(2));
    let memory = g.layer_norm_rows(tokens);
    let mut x = params.at(3);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    for b in 0..config.blocks {
        let xn = g.layer_norm_rows(x);
        let q = g.matmul(xn, params.block(b, 0));
        let k = g.matmul(memory, params.block(b, 1));
        let v = g.matmul(memory, params.block(b, 2));
        let kt = g.transpose(k);
        let logits = g.matmul(q, kt);
        let logits = g.scale(logits, inv_sqrt_d);
        let attn = g.softmax_rows(logits);
        let mixed = g.matmul(attn, v);
        let out = g.matmul(mixed, params.block(b, 3));
        x = g.add(x, out);
        let xn = g.layer_norm_rows(x);
        let hdn = g.linear(xn, params.block(b, 4), params.block(b, 5));
        let hdn = g.silu(hdn);
        let out = g.linear(hdn, params.block(b, 6), params.block(b, 7));
        x = g.add(x, out);
    }
    let xn = g.layer_norm_rows(x);
    let up = g.linear(xn, params.after_blocks(0), params.after_blocks(1));
    let h = config.triplane_res;
    let planes = g.gather(up, Arc::new(unpack_index(config)), &[3, h, h, config.triplane_channels]);
    g.add(planes, params.after_blocks(2))
}

/// Reconstructs the triplane for one gray-background image.
pub fn reconstruct(params: &ReconstructorParams, image: &Image) -> Result<Triplane> {
    params.check_image(image)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let img = g.constant(image.to_tensor());
    let planes = reconstruct_var(&mut g, &params.config, &bound, img);
    Triplane::new(params.config.triplane_res, params.config.triplane_channels, g.value(planes).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_resolution: 16,
            patch_size: 4,
            token_width: 8,
            blocks: 2,
            triplane_res: 8,
            triplane_channels: 4,
            plane_tokens: 4,
            decoder_hidden: vec![8],
        }
    }

    fn random_image(res: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(res, res, (0..res * res * 3).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        assert_eq!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 3).unwrap());
        assert_ne!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 4).unwrap());
        let p = init_params(&cfg, 3).unwrap();
        assert_eq!(p.tensors().len(), p.tensor_names().len());
        assert!(p.parameter_count() > 0 && p.all_finite());
    }

    #[test]
    fn output_shape_contract() {
        let cfg = ModelConfig { triplane_res: 32, triplane_channels: 16, plane_tokens: 8, ..tiny_config() };
        let p = init_params(&cfg, 0).unwrap();
        let tri = reconstruct(&p, &random_image(16, 1)).unwrap();
        assert_eq!(tri.shape(), [3, 32, 32, 16]);
        assert!(tri.data.all_finite());
    }

    #[test]
    fn reconstruct_is_deterministic_and_checks_resolution() {
        let p = init_params(&tiny_config(), 5).unwrap();
        let img = random_image(16, 2);
        assert_eq!(reconstruct(&p, &img).unwrap(), reconstruct(&p, &img).unwrap());
        assert!(reconstruct(&p, &random_image(20, 2)).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ModelConfig { patch_size: 5, ..tiny_config() }.validate().is_err());
        assert!(ModelConfig { triplane_res: 12, ..tiny_config() }.validate().is_err());
        assert!(ModelConfig { plane_tokens: 3, ..tiny_config() }.validate().is_err());
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn unpack_index_is_permutation() {
        let cfg = tiny_config();
        let mut idx = unpack_index(&cfg);
        idx.sort_unstable();
        assert!(idx.iter().enumerate().all(|(i, &v)| i == v));
        let mut idx = patchify_index(16, 4);
        idx.sort_unstable();
        assert!(idx.iter().enumerate().all(|(i, &v)| i == v));
    }
    #[test]
    fn pixel_gradient_matches_finite_difference() {
        let cfg = tiny_config();
        let p = init_params(&cfg, 9).unwrap();
        let img = random_image(16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 3 * 8 * 8 * 4;
        let weights = Tensor::new([3, 8, 8, 4], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let scalar = |image: &Image| -> f64 {
            let t = reconstruct(&p, image).unwrap();
            t.data.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.param(img.to_tensor());
        let planes = reconstruct_var(&mut g, &cfg, &bound, x);
        let w = g.constant(weights.clone());
        let prod = g.mul(planes, w);
        let loss = g.sum(prod);
        let grad = g.backward(loss).get(x).unwrap().clone();
        for _ in 0..10 {
            let i = rng.random_range(0..img.data().len());
            let h = 1e-4;
            let mut plus = img.clone();
            plus.data_mut()[i] += h;
            let mut minus = img.clone();
            minus.data_mut()[i] -= h;
            let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
            let a = grad.data()[i];
            assert!((a - fd).abs() <= 1e-2 * a.abs().max(fd.abs()).max(1e-6), "pixel {i}: {a} vs {fd}");
        }
    }
}
