//! Generated fine-grained data: every fine class shares its generic class's
//! background texture and differs only in a small planted patch.

use herbs_tensor::ChaCha8Rng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::{Dataset, Sample, Split};
use crate::error::{HerbsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_generic: usize,
    pub fine_per_generic: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise_level: f64,
    pub samples_per_class: usize,
    /// Share of each class held out for testing.
    pub test_fraction: f64,
    /// Random-colour squares scattered over the background.
    pub distractors: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_generic: 5,
            fine_per_generic: 2,
            image_size: 32,
            patch_size: 8,
            noise_level: 0.05,
            samples_per_class: 30,
            test_fraction: 1.0 / 3.0,
            distractors: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.num_generic * self.fine_per_generic
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_generic == 0 || self.fine_per_generic == 0 || self.samples_per_class == 0 {
            return Err(HerbsError::InvalidConfig("synthetic class and sample counts must be positive".into()));
        }
        if self.patch_size == 0 || self.patch_size + 2 > self.image_size {
            return Err(HerbsError::InvalidConfig(format!(
                "patch {} does not fit strictly inside a {} image",
                self.patch_size, self.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(HerbsError::InvalidConfig("test_fraction must be in [0, 1) and noise_level >= 0".into()));
        }
        Ok(())
    }

    pub fn train_per_class(&self) -> usize {
        self.samples_per_class - (self.samples_per_class as f64 * self.test_fraction).round() as usize
    }
}

struct Texture {
    base: [f64; 3],
    amp: [f64; 3],
    phase: [f64; 3],
    freq: (f64, f64),
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let f = rng.gen_range(1.5..4.0);
        Self {
            base: [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)],
            amp: [rng.gen_range(0.1..0.25), rng.gen_range(0.1..0.25), rng.gen_range(0.1..0.25)],
            phase: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
            freq: (f * angle.cos(), f * angle.sin()),
        }
    }

    fn at(&self, c: usize, y: usize, x: usize, size: usize) -> f64 {
        let t = std::f64::consts::TAU * (self.freq.0 * x as f64 + self.freq.1 * y as f64) / size as f64;
        self.base[c] + self.amp[c] * (t + self.phase[c]).sin()
    }
}

/// A 2x2 grid of colours stretched over the patch.
#[derive(Clone)]
struct PatchPattern([[f64; 3]; 4]);

impl PatchPattern {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut cells = [[0.0; 3]; 4];
        for cell in &mut cells {
            for v in cell.iter_mut() {
                *v = if rng.gen_bool(0.5) { rng.gen_range(0.0..0.2) } else { rng.gen_range(0.8..1.0) };
            }
        }
        Self(cells)
    }

    fn at(&self, c: usize, py: usize, px: usize, size: usize) -> f64 {
        let cell = 2 * (2 * py / size) + 2 * px / size;
        self.0[cell][c]
    }
}

fn paint(img: &mut Image, pattern: &PatchPattern, top: usize, left: usize, size: usize) {
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                img.set(c, top + y, left + x, pattern.at(c, y, x, size));
            }
        }
    }
}

/// Generates the full set and splits every class into train and test by
/// sample order.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Split> {
    spec.validate()?;
    let mut design = ChaCha8Rng::seed_from_u64(seed ^ 0xD15C_0DE5);
    let textures: Vec<Texture> = (0..spec.num_generic).map(|_| Texture::new(&mut design)).collect();
    let patterns: Vec<PatchPattern> = (0..spec.num_classes()).map(|_| PatchPattern::new(&mut design)).collect();
    let fine_to_generic: Vec<usize> = (0..spec.num_classes()).map(|k| k / spec.fine_per_generic).collect();
    let class_names: Vec<String> =
        (0..spec.num_classes()).map(|k| format!("g{}.f{}", fine_to_generic[k], k % spec.fine_per_generic)).collect();
    let generic_names: Vec<String> = (0..spec.num_generic).map(|g| format!("g{g}")).collect();

    let (size, patch) = (spec.image_size, spec.patch_size);
    let noise = Normal::new(0.0, spec.noise_level.max(f64::MIN_POSITIVE)).expect("valid std");
    let n_train = spec.train_per_class();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for k in 0..spec.num_classes() {
        let texture = &textures[fine_to_generic[k]];
        for n in 0..spec.samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((k as u64) << 32) | n as u64);
            let mut img = Image::from_fn(size, size, |c, y, x| texture.at(c, y, x, size));
            for _ in 0..spec.distractors {
                let d = PatchPattern::new(&mut rng);
                let (t, l) = (rng.gen_range(0..=size - patch), rng.gen_range(0..=size - patch));
                paint(&mut img, &d, t, l, patch);
            }
            let (top, left) = (rng.gen_range(1..size - patch), rng.gen_range(1..size - patch));
            paint(&mut img, &patterns[k], top, left, patch);
            if spec.noise_level > 0.0 {
                for v in &mut img.data {
                    *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            let mut mask = vec![false; size * size];
            for y in top..top + patch {
                mask[y * size + left..y * size + left + patch].iter_mut().for_each(|m| *m = true);
            }
            let sample = Sample {
                id: format!("syn-{k:03}-{n:04}"),
                image: img,
                label: k,
                generic: fine_to_generic[k],
                mask: Some(mask),
            };
            if n < n_train {
                train.push(sample)
            } else {
                test.push(sample)
            }
        }
    }
    let dataset = |samples| Dataset {
        samples,
        class_names: class_names.clone(),
        generic_names: generic_names.clone(),
        fine_to_generic: fine_to_generic.clone(),
    };
    Ok(Split { train: dataset(train), test: dataset(test) })
}
