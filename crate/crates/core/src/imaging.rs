//! Image loading and the conversions between 8-bit images, grayscale
//! arrays and network input tensors.

use std::path::Path;

use crate::datamodel::{DatasetManifest, SampleRecord};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Grayscale image with intensities on the 0..=255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Clamps to `[0, 255]` and rounds, as when storing 8-bit pixels.
    pub fn quantized(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn mirrored(&self) -> Self {
        GrayImage::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        GrayImage::from_fn(width, height, |x, y| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
            let bot = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
            top * (1.0 - ty) + bot * ty
        })
    }
}

/// Reads any supported image and converts to luma.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(GrayImage {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(f64::from).collect(),
    })
}

/// Writes the image as 8-bit grayscale replicated into three channels.
pub fn save_gray_as_rgb(img: &GrayImage, path: &Path) -> Result<()> {
    let rgb: Vec<u8> = img.quantized().into_iter().flat_map(|v| [v, v, v]).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, rgb)
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Network input normalization: `(v / 255 - 0.5) / 0.25`.
pub fn normalize_pixel(v: f64) -> f64 {
    (v / 255.0 - 0.5) * 4.0
}

pub fn read_tensor(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes: Vec<Vec<u8>> = match channels {
        1 => vec![img.to_luma8().into_raw()],
        3 => {
            let raw = img.to_rgb8().into_raw();
            (0..3).map(|c| raw.iter().skip(c).step_by(3).copied().collect()).collect()
        }
        n => {
            return Err(Error::InvalidInput(format!(
                "unsupported input channel count {n}"
            )))
        }
    };
    let data = planes
        .into_iter()
        .flatten()
        .map(|v| normalize_pixel(f64::from(v)))
        .collect();
    Tensor::from_vec(channels, h, w, data)
}

pub fn gray_to_tensor(img: &GrayImage, channels: usize) -> Tensor {
    let plane: Vec<f64> = img.data.iter().map(|&v| normalize_pixel(v)).collect();
    let mut data = Vec::with_capacity(plane.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Tensor {
        channels,
        height: img.height,
        width: img.width,
        data,
    }
}

/// Inverse of [`gray_to_tensor`]: channel mean, denormalized and rounded to
/// whole intensity levels.
pub fn tensor_to_gray(t: &Tensor) -> GrayImage {
    let plane = t.height * t.width;
    let data = (0..plane)
        .map(|i| {
            let mean = (0..t.channels).map(|c| t.data[c * plane + i]).sum::<f64>() / t.channels as f64;
            ((mean / 4.0 + 0.5) * 255.0).round().clamp(0.0, 255.0)
        })
        .collect();
    GrayImage {
        width: t.width,
        height: t.height,
        data,
    }
}

/// A manifest record together with its decoded input tensor.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub record: SampleRecord,
    pub tensor: Tensor,
}

/// Decodes every record of a manifest into network input tensors.
pub fn load_images(manifest: &DatasetManifest, channels: usize) -> Result<Vec<LabeledImage>> {
    manifest
        .records
        .iter()
        .map(|r| {
            Ok(LabeledImage {
                record: r.clone(),
                tensor: read_tensor(&manifest.resolve(r), channels)?,
            })
        })
        .collect()
}

/// Decodes every record into grayscale images (for the handcrafted features).
pub fn load_gray_images(manifest: &DatasetManifest) -> Result<Vec<(SampleRecord, GrayImage)>> {
    manifest
        .records
        .iter()
        .map(|r| Ok((r.clone(), load_gray(&manifest.resolve(r))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_and_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(8, 6, |x, y| (x * 30 + y) as f64);
        let p = dir.path().join("a.png");
        save_gray_as_rgb(&img, &p).unwrap();
        assert_eq!(load_gray(&p).unwrap(), img);
        let t = read_tensor(&p, 3).unwrap();
        assert_eq!(t.shape(), (3, 6, 8));
        assert_eq!(t.plane(0), t.plane(2));
        assert_eq!(t.at(1, 2, 3), normalize_pixel(img.get(3, 2)));
        assert_eq!(gray_to_tensor(&img, 3), t);
        assert_eq!(tensor_to_gray(&t), img);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = GrayImage::from_fn(10, 10, |x, _| x as f64);
        assert_eq!(img.resized(10, 10), img);
        let c = GrayImage::from_fn(7, 9, |_, _| 42.0).resized(20, 3);
        assert!(c.data.iter().all(|v| (*v - 42.0).abs() < 1e-12));
    }
}
