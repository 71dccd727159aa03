//! Perceptual image distance: a seeded random-weight convolutional pyramid.
//!
//! Each level applies a fixed 3×3 convolution and `tanh`, then 2× average
//! pooling feeds the next level. The distance sums, over levels, the mean
//! squared difference of channel-normalized features, plus a pixel MSE term
//! so that only identical images score zero. External networks plug in
//! through [`PerceptualBackend`].

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, SparseMap, Var};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

pub trait PerceptualBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Distance between two `[res·res, 3]` image variables.
    fn distance_var(&self, g: &mut Graph, a: Var, b: Var, resolution: usize) -> Result<Var>;

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        if !a.same_shape(b) || a.width() != a.height() {
            return invalid("perceptual distance needs two square images of equal size");
        }
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.to_tensor()), g.constant(b.to_tensor()));
        let d = self.distance_var(&mut g, va, vb, a.width())?;
        Ok(g.value(d).item())
    }
}

/// Distance under an optional backend; a missing backend is a configuration error.
pub fn perceptual_distance(a: &Image, b: &Image, backend: Option<&dyn PerceptualBackend>) -> Result<f64> {
    let backend = backend.ok_or_else(|| Error::Config("no perceptual backend initialized".into()))?;
    backend.distance(a, b)
}

const LEVEL_CHANNELS: [usize; 3] = [8, 12, 16];
const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct RandomConvPyramid {
    seed: u64,
    /// `[9·c_in, c_out]` per level.
    weights: Vec<Arc<Tensor>>,
}

impl RandomConvPyramid {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let mut weights = Vec::new();
        for &c_out in &LEVEL_CHANNELS {
            let fan_in = 9 * c_in;
            let normal = Normal::new(0.0, 1.5 / (fan_in as f64).sqrt()).expect("valid std");
            let w = (0..fan_in * c_out).map(|_| normal.sample(&mut rng)).collect();
            weights.push(Arc::new(Tensor::new([fan_in, c_out], w)));
            c_in = c_out;
        }
        RandomConvPyramid { seed, weights }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn features(&self, g: &mut Graph, image: Var, resolution: usize) -> Vec<Var> {
        let mut x = image;
        let mut res = resolution;
        let mut out = Vec::new();
        for w in &self.weights {
            if res < 2 {
                break;
            }
            let c_in = w.rows() / 9;
            let cols = g.sparse(x, Arc::new(im2col_map(res)));
            let cols = g.reshape(cols, &[res * res, 9 * c_in]);
            let wv = g.constant((**w).clone());
            let f = g.matmul(cols, wv);
            let f = g.tanh(f);
            out.push(f);
            if res / 2 < 2 {
                break;
            }
            x = g.sparse(f, Arc::new(avg_pool_map(res)));
            res /= 2;
        }
        out
    }
}

impl Default for RandomConvPyramid {
    fn default() -> Self {
        RandomConvPyramid::new(0x5eed)
    }
}

impl PerceptualBackend for RandomConvPyramid {
    fn name(&self) -> &str {
        "random-conv-pyramid"
    }

    fn distance_var(&self, g: &mut Graph, a: Var, b: Var, resolution: usize) -> Result<Var> {
        let n = resolution * resolution;
        if g.value(a).len() != n * 3 || g.value(b).len() != n * 3 {
            return invalid(format!("perceptual inputs must be {resolution}x{resolution} RGB"));
        }
        let mut total = g.mse(a, b);
        let fa = self.features(g, a, resolution);
        let fb = self.features(g, b, resolution);
        for (x, y) in fa.into_iter().zip(fb) {
            let rows = g.value(x).rows() as f64;
            let nx = g.normalize_rows(x, NORM_EPS);
            let ny = g.normalize_rows(y, NORM_EPS);
            let d = g.sub(nx, ny);
            let sq = g.square(d);
            let s = g.sum(sq);
            let level = g.scale(s, 1.0 / rows);
            total = g.add(total, level);
        }
        Ok(total)
    }
}

/// `[res², c] → [res²·9, c]`, zero-padded 3×3 neighbourhoods.
fn im2col_map(res: usize) -> SparseMap {
    let mut map = SparseMap::new(res * res);
    for y in 0..res as isize {
        for x in 0..res as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (sy, sx) = (y + dy, x + dx);
                    if (0..res as isize).contains(&sy) && (0..res as isize).contains(&sx) {
                        map.push_row([((sy as usize) * res + sx as usize, 1.0)]);
                    } else {
                        map.push_row([]);
                    }
                }
            }
        }
    }
    map
}

/// `[res², c] → [(res/2)², c]` 2×2 mean pooling.
pub(crate) fn avg_pool_map(res: usize) -> SparseMap {
    let half = res / 2;
    let mut map = SparseMap::new(res * res);
    for y in 0..half {
        for x in 0..half {
            map.push_row([(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| ((2 * y + dy) * res + 2 * x + dx, 0.25)));
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(res: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::new(res, res, (0..res * res * 3).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn identity_and_symmetry() {
        let p = RandomConvPyramid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let a = random_image(16, &mut rng);
            let b = random_image(16, &mut rng);
            assert_eq!(p.distance(&a, &a).unwrap(), 0.0);
            let (ab, ba) = (p.distance(&a, &b).unwrap(), p.distance(&b, &a).unwrap());
            assert!(ab > 0.0);
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn grows_with_noise() {
        let p = RandomConvPyramid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_image(32, &mut rng);
        let noise: Vec<f64> = (0..base.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = [0.02, 0.08, 0.3]
            .iter()
            .map(|amp| {
                let data = base.data().iter().zip(&noise).map(|(v, n)| v + amp * n).collect();
                p.distance(&base, &Image::new(32, 32, data)).unwrap()
            })
            .collect();
        assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
    }

    #[test]
    fn missing_backend_is_config_error() {
        let img = Image::filled(8, 8, [0.5; 3]);
        assert!(matches!(perceptual_distance(&img, &img, None), Err(Error::Config(_))));
    }
}
