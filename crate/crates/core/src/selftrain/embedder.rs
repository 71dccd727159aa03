//! Image → unit-vector embeddings used by the semantic loss.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::autodiff::{Graph, SparseMap, Var};
use crate::error::{invalid, Result};
use crate::image::{resize_map, Image};
use crate::tensor::Tensor;

pub trait SemanticEmbedder: Send + Sync {
    fn name(&self) -> &str;

    /// Unit-norm embedding of a `[res·res, 3]` image variable.
    fn embed_var(&self, g: &mut Graph, image: Var, resolution: usize) -> Result<Var>;

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        if image.width() != image.height() {
            return invalid("embedder expects a square image");
        }
        let mut g = Graph::new();
        let v = g.constant(image.to_tensor());
        let e = self.embed_var(&mut g, v, image.width())?;
        Ok(g.value(e).data().to_vec())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GRID: usize = 32;
const CELL: usize = 4;
const BINS: usize = 8;
const HIST_GAIN: f64 = 4.0;
const BIAS: f64 = 1e-3;

/// Built-in embedder: at 32×32, oriented-gradient histograms and mean colour
/// (offset from mid-gray) per 4×4 cell, concatenated and L2-normalized.
///
/// Orientation bins are half-wave rectified projections of the luma gradient
/// onto eight directions, so the whole map stays differentiable.
#[derive(Clone, Debug, Default)]
pub struct GradientHistogramEmbedder;

fn oriented_gradient_map() -> SparseMap {
    let mut map = SparseMap::new(GRID * GRID);
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, GRID as isize - 1) as usize;
        let cy = y.clamp(0, GRID as isize - 1) as usize;
        cy * GRID + cx
    };
    for y in 0..GRID as isize {
        for x in 0..GRID as isize {
            for k in 0..BINS {
                let theta = 2.0 * PI * k as f64 / BINS as f64;
                let (c, s) = (0.5 * theta.cos(), 0.5 * theta.sin());
                // central differences; image rows grow downward so +y is up
                map.push_row([(at(x + 1, y), c), (at(x - 1, y), -c), (at(x, y - 1), s), (at(x, y + 1), -s)]);
            }
        }
    }
    map
}

fn cell_mean_map() -> SparseMap {
    let cells = GRID / CELL;
    let mut map = SparseMap::new(GRID * GRID);
    let w = 1.0 / (CELL * CELL) as f64;
    for cy in 0..cells {
        for cx in 0..cells {
            map.push_row(
                (0..CELL).flat_map(|dy| (0..CELL).map(move |dx| ((cy * CELL + dy) * GRID + cx * CELL + dx, w))),
            );
        }
    }
    map
}

impl SemanticEmbedder for GradientHistogramEmbedder {
    fn name(&self) -> &str {
        "gradient-histogram"
    }

    fn embed_var(&self, g: &mut Graph, image: Var, resolution: usize) -> Result<Var> {
        if g.value(image).len() != resolution * resolution * 3 {
            return invalid(format!("embedder input is not {resolution}x{resolution} RGB"));
        }
        let small = if resolution == GRID {
            image
        } else {
            g.sparse(image, Arc::new(resize_map(resolution, resolution, GRID, GRID)))
        };
        let luma_w = g.constant(Tensor::new([3, 1], vec![0.299, 0.587, 0.114]));
        let luma = g.matmul(small, luma_w);
        let resp = g.sparse(luma, Arc::new(oriented_gradient_map()));
        let resp = g.relu(resp);
        let resp = g.reshape(resp, &[GRID * GRID, BINS]);
        let cell = Arc::new(cell_mean_map());
        let hist = g.sparse(resp, cell.clone());
        let hist = g.scale(hist, HIST_GAIN);
        let color = g.sparse(small, cell);
        let color = g.add_scalar(color, -0.5);
        let bias = g.constant(Tensor::scalar(BIAS));
        let feat = g.concat(&[hist, color, bias]);
        Ok(g.normalize_rows(feat, 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_norm_and_deterministic() {
        let e = GradientHistogramEmbedder;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for res in [16, 32, 48] {
            let img = Image::new(res, res, (0..res * res * 3).map(|_| rng.random::<f64>()).collect());
            let v = e.embed(&img).unwrap();
            assert!((cosine(&v, &v) - 1.0).abs() < 1e-6);
            assert_eq!(v, e.embed(&img).unwrap());
        }
        let gray = e.embed(&Image::filled(16, 16, [0.5; 3])).unwrap();
        assert!((cosine(&gray, &gray) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similar_images_score_higher() {
        let e = GradientHistogramEmbedder;
        let mut disc = Image::filled(32, 32, [0.5; 3]);
        for y in 0..32 {
            for x in 0..32 {
                if (x as f64 - 15.5).powi(2) + (y as f64 - 15.5).powi(2) < 64.0 {
                    disc.set(x, y, [0.9, 0.2, 0.1]);
                }
            }
        }
        let shifted = {
            let mut s = Image::filled(32, 32, [0.5; 3]);
            for y in 0..32 {
                for x in 1..32 {
                    s.set(x, y, disc.get(x - 1, y));
                }
            }
            s
        };
        let mut bar = Image::filled(32, 32, [0.5; 3]);
        for y in 2..30 {
            for x in 14..18 {
                bar.set(x, y, [0.1, 0.3, 0.9]);
            }
        }
        let (a, b, c) = (e.embed(&disc).unwrap(), e.embed(&shifted).unwrap(), e.embed(&bar).unwrap());
        assert!(cosine(&a, &b) > cosine(&a, &c));
    }
}
