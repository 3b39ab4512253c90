use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{read_idx_file, DataError, Dataset, FeatureShape};

/// Training images held out for validation.
pub const MNIST_VALIDATION_COUNT: usize = 1200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binarization {
    /// Pixel `>= t` becomes 1.
    Threshold(u8),
    /// Pixel becomes 1 with probability `value / 255`.
    Stochastic { seed: u64 },
}

impl Default for Binarization {
    fn default() -> Self {
        Binarization::Threshold(128)
    }
}

pub fn binarize(pixels: &[u8], mode: Binarization) -> Vec<u8> {
    binarize_stream(pixels, mode, 0)
}

fn binarize_stream(pixels: &[u8], mode: Binarization, stream: u64) -> Vec<u8> {
    match mode {
        Binarization::Threshold(t) => pixels.iter().map(|&p| u8::from(p >= t)).collect(),
        Binarization::Stochastic { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            pixels.iter().map(|&p| u8::from(rng.gen::<f64>() * 255.0 < f64::from(p))).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Loads IDX image files, binarizes them and holds out validation images from the training file.
///
/// With `validation_seed = None` the last [`MNIST_VALIDATION_COUNT`] training images (file order)
/// form the validation set; otherwise they are chosen by a seeded shuffle.
pub fn load_mnist_split(
    train_images: &Path,
    test_images: &Path,
    mode: Binarization,
    validation_seed: Option<u64>,
) -> Result<ImageSplits, DataError> {
    let load = |path: &Path, stream: u64| -> Result<Dataset, DataError> {
        let arr = read_idx_file(path)?;
        let &[_, height, width] = arr.dims() else {
            return Err(DataError::Format(format!("{}: expected a rank-3 image file", path.display())));
        };
        Dataset::discrete(FeatureShape::Pixels { height, width }, binarize_stream(arr.data(), mode, stream))
    };
    let full = load(train_images, 0)?;
    let test = load(test_images, 1)?;
    if full.shape() != test.shape() {
        return Err(DataError::Format(format!("train images are {:?} but test images are {:?}", full.shape(), test.shape())));
    }
    if full.len() <= MNIST_VALIDATION_COUNT {
        return Err(DataError::Format(format!("need more than {MNIST_VALIDATION_COUNT} training images, got {}", full.len())));
    }
    let mut order: Vec<usize> = (0..full.len()).collect();
    if let Some(seed) = validation_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let cut = full.len() - MNIST_VALIDATION_COUNT;
    let (train_idx, val_idx) = order.split_at(cut);
    let (mut train_idx, mut val_idx) = (train_idx.to_vec(), val_idx.to_vec());
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok(ImageSplits {
        train: full.subset(&train_idx),
        validation: full.subset(&val_idx),
        test,
    })
}
