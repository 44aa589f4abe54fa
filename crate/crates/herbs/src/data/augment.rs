use herbs_tensor::{ChaCha8Rng, Tensor};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{HerbsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

/// Per-channel statistics of natural images.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Resize edge for a crop size: 384 -> 510, 448 -> 600, otherwise `round(input * 510 / 384)`.
pub fn resize_for_input(input_size: usize) -> usize {
    match input_size {
        384 => 510,
        448 => 600,
        n => ((n * 510) as f64 / 384.0).round() as usize,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub input_size: usize,
    pub resize_size: usize,
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl AugmentConfig {
    pub fn new(input_size: usize) -> Self {
        Self {
            input_size,
            resize_size: resize_for_input(input_size),
            flip_prob: 0.5,
            blur_prob: 0.5,
            blur_kernel: 5,
            blur_sigma: (0.1, 2.0),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// Settings for generated data: no rescaling, `(0.5, 0.5)` normalisation.
    pub fn synthetic(input_size: usize) -> Self {
        Self { resize_size: input_size, mean: [0.5; 3], std: [0.5; 3], ..Self::new(input_size) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.resize_size < self.input_size {
            return Err(HerbsError::InvalidConfig(format!(
                "resize_size {} must be at least input_size {} (> 0)",
                self.resize_size, self.input_size
            )));
        }
        if self.blur_kernel.is_multiple_of(2)
            || !(0.0..=1.0).contains(&self.flip_prob)
            || !(0.0..=1.0).contains(&self.blur_prob)
        {
            return Err(HerbsError::InvalidConfig("blur kernel must be odd and probabilities in [0, 1]".into()));
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(HerbsError::InvalidConfig("normalisation std must be positive".into()));
        }
        Ok(())
    }
}

/// Train: resize, random crop, flip, blur, normalise. Test: resize, centre
/// crop, normalise. Returns `[3, input_size, input_size]`.
pub fn augment(image: &Image, phase: Phase, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    cfg.validate()?;
    let s = cfg.input_size;
    let resized = image.resize(cfg.resize_size, cfg.resize_size);
    let out = match phase {
        Phase::Test => resized.center_crop(s)?,
        Phase::Train => {
            let slack = cfg.resize_size - s;
            let (top, left) = (rng.gen_range(0..=slack), rng.gen_range(0..=slack));
            let mut img = resized.crop(top, left, s, s)?;
            if rng.gen_bool(cfg.flip_prob) {
                img = img.flip_horizontal();
            }
            if rng.gen_bool(cfg.blur_prob) {
                let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
                img = img.gaussian_blur(cfg.blur_kernel, sigma);
            }
            img
        }
    };
    Ok(out.normalize(cfg.mean, cfg.std))
}

/// Independent stream for one sample in one epoch; the same triple always
/// yields the same draws, whatever the worker count.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}
