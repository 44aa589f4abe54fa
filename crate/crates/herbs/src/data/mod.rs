//! Images, augmentation, datasets and batch assembly.

mod augment;
mod folder;
mod image;
mod synthetic;

pub use augment::{augment, resize_for_input, sample_rng, AugmentConfig, Phase, IMAGENET_MEAN, IMAGENET_STD};
pub use folder::load_folder;
pub use image::Image;
pub use synthetic::{make_synthetic_dataset, SyntheticSpec};

use herbs_tensor::{ChaCha8Rng, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::backbone::ImageBatch;
use crate::error::{HerbsError, Result};

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    /// Fine class.
    pub label: usize,
    pub generic: usize,
    /// Ground-truth foreground, row-major over the image, when known.
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub generic_names: Vec<String>,
    pub fine_to_generic: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Augments `indices` and stacks them into a batch.
    ///
    /// Every sample draws from its own `(seed, epoch, index)` stream and
    /// results are gathered in input order, so the worker count never
    /// changes the output.
    pub fn batch(
        &self,
        indices: &[usize],
        phase: Phase,
        aug: &AugmentConfig,
        seed: u64,
        epoch: u64,
    ) -> Result<ImageBatch> {
        if indices.is_empty() {
            return Err(HerbsError::Empty("batch of zero samples".into()));
        }
        let s = aug.input_size;
        let tensors: Vec<Tensor> = indices
            .par_iter()
            .map(|&i| {
                let sample = self.samples.get(i).ok_or_else(|| HerbsError::Dataset(format!("no sample {i}")))?;
                augment(&sample.image, phase, aug, &mut sample_rng(seed, epoch, i as u64))
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for t in tensors {
            data.extend_from_slice(t.data());
        }
        let ids = indices.iter().map(|&i| self.samples[i].id.clone()).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        ImageBatch::new(Tensor::new([indices.len(), 3, s, s], data), ids, Some(labels))
    }
}

/// Sample order of one training epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
