use std::path::{Path, PathBuf};

use herbs_tensor::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageBatch;
use crate::data::{augment, AugmentConfig, Image, Phase};
use crate::error::{HerbsError, Result};
use crate::net::{HerbsNet, LocationMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeatSource {
    /// Stage-averaged maximum softmax score.
    #[default]
    MaxScore,
    /// Stage-averaged softmax score of the predicted class.
    TargetClass,
}

impl HeatSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max_score" | "max-score" => Ok(Self::MaxScore),
            "target_class" | "target-class" => Ok(Self::TargetClass),
            other => Err(HerbsError::InvalidConfig(format!("unknown heat-map source `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeatSource::MaxScore => "max_score",
            HeatSource::TargetClass => "target_class",
        }
    }
}

/// Response in `[0, 1]` over the network input, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub response: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub source: HeatSource,
}

impl HeatMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.response[y * self.width + x]
    }

    /// Means inside and outside `mask`.
    pub fn region_means(&self, mask: &[bool]) -> (f64, f64) {
        let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0, 0.0, 0);
        for (v, &m) in self.response.iter().zip(mask) {
            if m {
                sin += v;
                nin += 1;
            } else {
                sout += v;
                nout += 1;
            }
        }
        (sin / nin.max(1) as f64, sout / nout.max(1) as f64)
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Averages per-stage score maps of image `b`, each bilinearly upsampled to
/// `height x width`, then min-max normalises. Constant maps become all zeros.
pub fn heatmap_from_maps(
    maps: &[LocationMap],
    b: usize,
    source: HeatSource,
    class: usize,
    height: usize,
    width: usize,
) -> Result<HeatMap> {
    if maps.is_empty() {
        return Err(HerbsError::MissingHeads("network exposes no classification maps".into()));
    }
    let mut acc = vec![0.0; height * width];
    for map in maps {
        let (hw, c) = (map.height * map.width, map.logits.dim(2));
        let data = &map.logits.data()[b * hw * c..(b + 1) * hw * c];
        let scores: Vec<f64> = data
            .chunks(c)
            .map(|row| {
                let p = softmax(row);
                match source {
                    HeatSource::MaxScore => p.iter().fold(0.0f64, |a, &v| a.max(v)),
                    HeatSource::TargetClass => p[class],
                }
            })
            .collect();
        let small = Image::from_fn(map.height, map.width, |_, y, x| scores[y * map.width + x]);
        let up = small.resize(height, width);
        for (i, a) in acc.iter_mut().enumerate() {
            *a += up.get(0, i / width, i % width);
        }
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let response = if span > 1e-12 { acc.iter().map(|v| (v - lo) / span).collect() } else { vec![0.0; acc.len()] };
    Ok(HeatMap { response, height, width, source })
}

/// Heat map of one image under the test-time transform, plus the transformed
/// view it is aligned with.
pub fn render_heatmap(
    net: &HerbsNet,
    image: &Image,
    aug: &AugmentConfig,
    source: HeatSource,
) -> Result<(HeatMap, Image)> {
    if !net.store.all_finite() {
        return Err(HerbsError::NonFiniteParams);
    }
    let s = aug.input_size;
    let view = image.resize(aug.resize_size, aug.resize_size).center_crop(s)?;
    let pixels = augment(image, Phase::Test, aug, &mut ChaCha8Rng::seed_from_u64(0))?.reshape([1, 3, s, s]);
    let batch = ImageBatch::new(pixels, vec!["image".into()], None)?;
    let out = net.predict(&batch)?;
    let class = out.bundle.predictions()[0];
    let hm = heatmap_from_maps(&out.maps, 0, source, class, s, s)?;
    Ok((hm, view))
}

fn jet(v: f64) -> [f64; 3] {
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Writes `<id>_<source>.png` (grayscale) and `<id>_<source>_overlay.png`.
pub fn save_heatmap(hm: &HeatMap, view: &Image, dir: &Path, id: &str) -> Result<[PathBuf; 2]> {
    if view.height != hm.height || view.width != hm.width {
        return Err(HerbsError::ShapeMismatch(format!(
            "heat map {}x{} vs image {}x{}",
            hm.height, hm.width, view.height, view.width
        )));
    }
    let gray_path = dir.join(format!("{id}_{}.png", hm.source.as_str()));
    let overlay_path = dir.join(format!("{id}_{}_overlay.png", hm.source.as_str()));
    let gray = image::GrayImage::from_fn(hm.width as u32, hm.height as u32, |x, y| {
        image::Luma([(hm.get(y as usize, x as usize) * 255.0).round() as u8])
    });
    gray.save_with_format(&gray_path, image::ImageFormat::Png)?;
    let overlay = Image::from_fn(hm.height, hm.width, |c, y, x| 0.5 * view.get(c, y, x) + 0.5 * jet(hm.get(y, x))[c]);
    overlay.save_png(&overlay_path)?;
    Ok([gray_path, overlay_path])
}

/// Maps a row-major `height x width` mask through the test-time resize and
/// centre crop by nearest neighbour.
pub fn mask_for_input(mask: &[bool], height: usize, width: usize, aug: &AugmentConfig) -> Vec<bool> {
    let (r, s) = (aug.resize_size, aug.input_size);
    let off = (r - s) / 2;
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        let sy = (((y + off) as f64 + 0.5) * height as f64 / r as f64) as usize;
        for x in 0..s {
            let sx = (((x + off) as f64 + 0.5) * width as f64 / r as f64) as usize;
            out.push(mask[sy.min(height - 1) * width + sx.min(width - 1)]);
        }
    }
    out
}

/// Mean `|tanh(y)|` over every class logit of every map cell whose pixel
/// block holds no foreground, for image `b`. `None` without background cells.
pub fn background_tanh(maps: &[LocationMap], b: usize, mask: &[bool], height: usize, width: usize) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for map in maps {
        let (hw, c, s) = (map.height * map.width, map.logits.dim(2), map.stride);
        let data = &map.logits.data()[b * hw * c..(b + 1) * hw * c];
        for i in 0..map.height {
            for j in 0..map.width {
                let (y0, x0) = (i * s, j * s);
                if y0 >= height || x0 >= width {
                    continue;
                }
                let fg = (y0..(y0 + s).min(height)).any(|y| (x0..(x0 + s).min(width)).any(|x| mask[y * width + x]));
                if !fg {
                    let row = &data[(i * map.width + j) * c..(i * map.width + j + 1) * c];
                    sum += row.iter().map(|v| v.tanh().abs()).sum::<f64>();
                    count += c;
                }
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use herbs_tensor::Tensor;

    fn map(h: usize, w: usize, c: usize, stride: usize, f: impl Fn(usize) -> f64) -> LocationMap {
        LocationMap { logits: Tensor::from_fn([1, h * w, c], &f), height: h, width: w, stride }
    }

    #[test]
    fn constant_maps_normalise_to_zero() {
        let hm = heatmap_from_maps(&[map(2, 2, 3, 4, |_| 1.0)], 0, HeatSource::MaxScore, 0, 8, 8).unwrap();
        assert_eq!((hm.height, hm.width), (8, 8));
        assert!(hm.response.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn range_is_unit_interval() {
        let maps = [map(2, 2, 3, 8, |i| (i as f64 * 0.7).sin() * 3.0), map(1, 1, 3, 16, |i| i as f64)];
        let hm = heatmap_from_maps(&maps, 0, HeatSource::TargetClass, 1, 16, 16).unwrap();
        let lo = hm.response.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = hm.response.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn background_cells_only() {
        // 2x2 map of stride 2 over a 4x4 image; foreground in the top-left pixel.
        let m = map(2, 2, 1, 2, |i| [9.0, 0.5, 0.5, 0.5][i]);
        let mut mask = vec![false; 16];
        mask[0] = true;
        let v = background_tanh(&[m], 0, &mask, 4, 4).unwrap();
        assert!((v - 0.5f64.tanh()).abs() < 1e-15);
        assert!(background_tanh(&[map(1, 1, 1, 4, |_| 0.0)], 0, &[true; 16], 4, 4).is_none());
    }

    #[test]
    fn identity_mask_transform() {
        let aug = AugmentConfig::synthetic(4);
        let mask: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
        assert_eq!(mask_for_input(&mask, 4, 4, &aug), mask);
    }
}
