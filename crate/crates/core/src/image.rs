//! RGB float images, PNG IO and resampling maps.

use std::path::Path;

use crate::autodiff::SparseMap;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Mid-gray background used for every composited image.
pub const BACKGROUND_GRAY: f64 = 0.5;

/// Interleaved RGB image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3, "image buffer size");
        Image { width, height, data }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[height * width, 3]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.width * self.height, 3], self.data.clone())
    }

    pub fn from_tensor(width: usize, height: usize, t: &Tensor) -> Self {
        Image::new(width, height, t.data().to_vec())
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if !self.same_shape(other) {
            return invalid(format!(
                "image shapes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / self.data.len() as f64)
    }

    /// Resamples to `width × height` with a triangle filter (bilinear when upsampling).
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let map = resize_map(self.width, self.height, width, height);
        Image::new(width, height, map.apply(&self.data, 3))
    }

    /// Luma in `[0, 1]` per pixel (Rec. 601 weights).
    pub fn luma(&self) -> Vec<f64> {
        self.data.chunks(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let buf = self.data.iter().map(|&v| to_u8(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer size")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Image::new(img.width() as usize, img.height() as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a single-channel PNG as values in `[0, 1]` (8- or 16-bit).
pub fn load_gray_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let g = img.to_luma16();
    let data = g.as_raw().iter().map(|&v| v as f64 / 65535.0).collect();
    Ok((g.width() as usize, g.height() as usize, data))
}

pub fn save_gray16_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let buf: Vec<u16> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(width as u32, height as u32, buf)
        .expect("buffer size")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn save_gray8_png(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    image::GrayImage::from_raw(width as u32, height as u32, values.to_vec())
        .expect("buffer size")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// One-dimensional triangle-filter weights from `src` samples to `dst` samples.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor().max(0.0) as usize;
            let hi = ((center + support).ceil() as usize).min(src - 1);
            let mut w: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|j| {
                    let t = 1.0 - (j as f64 - center).abs() / support;
                    (t > 0.0).then_some((j, t))
                })
                .collect();
            if w.is_empty() {
                w.push((center.round().clamp(0.0, (src - 1) as f64) as usize, 1.0));
            }
            let total: f64 = w.iter().map(|p| p.1).sum();
            w.iter_mut().for_each(|p| p.1 /= total);
            w
        })
        .collect()
}

/// Pixel-row map resampling a `src_w × src_h` grid to `dst_w × dst_h`.
pub fn resize_map(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> SparseMap {
    let wx = axis_weights(src_w, dst_w);
    let wy = axis_weights(src_h, dst_h);
    let mut map = SparseMap::new(src_w * src_h);
    for ry in &wy {
        for rx in &wx {
            map.push_row(ry.iter().flat_map(|&(y, a)| rx.iter().map(move |&(x, b)| (y * src_w + x, a * b))));
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_preserves_constants_and_identity() {
        let img = Image::filled(7, 5, [0.2, 0.4, 0.6]);
        for (w, h) in [(3, 2), (14, 10), (32, 32)] {
            let r = img.resize(w, h);
            assert!(r.data().iter().zip([0.2, 0.4, 0.6].iter().cycle()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let map = resize_map(4, 4, 4, 4);
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(map.apply(&x, 1), x);
    }

    #[test]
    fn downsample_by_two_averages_blocks() {
        let data: Vec<f64> = (0..16).flat_map(|i| [i as f64; 3]).collect();
        let img = Image::new(4, 4, data);
        let r = img.resize(2, 2);
        // triangle filter of support 2 centred between pixels 0,1 covers 0..=2 with weights .25,.75,.75,.25
        assert!(r.get(0, 0)[0] > 2.0 && r.get(0, 0)[0] < 8.0);
        let mean_in: f64 = img.data().iter().sum::<f64>() / 48.0;
        let mean_out: f64 = r.data().iter().sum::<f64>() / 12.0;
        assert!((mean_in - mean_out).abs() < 1.0);
    }
}
