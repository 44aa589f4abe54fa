use std::path::Path;

use herbs_tensor::Tensor;

use crate::error::{HerbsError, Result};

/// Three-channel image, channel-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(HerbsError::Image(format!("{} values for a 3x{height}x{width} image", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; Self::CHANNELS * height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
            let scale = src as f64 / out as f64;
            (0..out)
                .map(|i| {
                    let p = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (p.floor() as usize).min(src - 1);
                    let i1 = (i0 + 1).min(src - 1);
                    (i0, i1, p - i0 as f64)
                })
                .collect()
        };
        let ys = axis(height, self.height);
        let xs = axis(width, self.width);
        Image::from_fn(height, width, |c, y, x| {
            let (y0, y1, fy) = ys[y];
            let (x0, x1, fx) = xs[x];
            let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
            let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(HerbsError::Image(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    pub fn center_crop(&self, size: usize) -> Result<Image> {
        if size > self.height || size > self.width {
            return Err(HerbsError::Image(format!("cannot crop {size} from {}x{}", self.height, self.width)));
        }
        self.crop((self.height - size) / 2, (self.width - size) / 2, size, size)
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    /// Separable Gaussian blur with an odd `kernel` size; borders replicate.
    pub fn gaussian_blur(&self, kernel: usize, sigma: f64) -> Image {
        let r = (kernel / 2) as isize;
        let mut weights: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let horizontal = Image::from_fn(self.height, self.width, |c, y, x| {
            (-r..=r).zip(&weights).map(|(d, w)| w * self.get(c, y, clamp(x as isize + d, self.width))).sum()
        });
        Image::from_fn(self.height, self.width, |c, y, x| {
            (-r..=r).zip(&weights).map(|(d, w)| w * horizontal.get(c, clamp(y as isize + d, self.height), x)).sum()
        })
    }

    /// `(x - mean[c]) / std[c]` as a `[3, h, w]` tensor.
    pub fn normalize(&self, mean: [f64; 3], std: [f64; 3]) -> Tensor {
        let plane = self.height * self.width;
        let data = self.data.iter().enumerate().map(|(i, v)| (v - mean[i / plane]) / std[i / plane]).collect();
        Tensor::new([3, self.height, self.width], data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        Image::from_fn(img.height() as usize, img.width() as usize, |c, y, x| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Image> {
        Ok(Image::from_rgb8(&image::open(path)?.to_rgb8()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(7, 5, 0.3).resize(11, 13);
        assert_eq!((img.height, img.width), (11, 13));
        assert!(img.data.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn resize_downsample_by_two_averages_pairs() {
        let img = Image::from_fn(2, 4, |_, _, x| x as f64);
        let half = img.resize(2, 2);
        assert_eq!(&half.data[..2], &[0.5, 2.5]);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = Image::from_fn(3, 4, |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(1, 2, 0), img.get(1, 2, 3));
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let flat = Image::filled(6, 6, 0.7).gaussian_blur(5, 1.3);
        assert!(flat.data.iter().all(|v| (v - 0.7).abs() < 1e-12));
        let mut dot = Image::filled(9, 9, 0.0);
        dot.set(0, 4, 4, 1.0);
        let b = dot.gaussian_blur(5, 1.0);
        let plane: f64 = b.data[..81].iter().sum();
        assert!((plane - 1.0).abs() < 1e-12);
        assert!(b.get(0, 4, 4) < 1.0 && b.get(0, 4, 6) > 0.0 && b.get(0, 4, 7) == 0.0);
    }

    #[test]
    fn crop_bounds() {
        let img = Image::filled(8, 8, 0.0);
        assert!(img.crop(4, 4, 4, 4).is_ok());
        assert!(img.crop(5, 4, 4, 4).is_err());
        assert!(img.center_crop(9).is_err());
    }

    #[test]
    fn normalize_half_half() {
        let t = Image::filled(2, 2, 1.0).normalize([0.5; 3], [0.5; 3]);
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }
}
