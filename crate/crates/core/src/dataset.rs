//! Dataset handles: CIFAR binary files and a seeded synthetic generator.
//!
//! CIFAR binary records are `1 label byte + 3072 pixel bytes` (CIFAR-10) or
//! `2 label bytes + 3072 pixel bytes` (CIFAR-100, coarse label ignored),
//! pixels stored channel-planar (all R, all G, all B) row-major. Images
//! load as `[32, 32, 3]` tensors scaled to `[0, 1]`.
//!
//! The synthetic source generates class-patterned images with per-pixel
//! noise and optional label noise, deterministically from its seed. Label
//! noise is what makes a small target net trained on it overfit hard: the
//! noisy labels can only be memorized, never generalized, which is exactly
//! the regime a membership-inference attacker exploits.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::InitRng;
use crate::tensor::{Shape, Tensor};

pub const CIFAR_DIM: usize = 32;
pub const CIFAR_PIXELS: usize = 32 * 32 * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Parameters of the synthetic source.
///
/// Each class `c` gets a base pattern `P_c` of uniform pixels; an image is
/// `mix * P_c + (1 - mix) * noise`. With probability `label_noise` a
/// record's label is resampled uniformly (its pixels keep the original
/// class pattern), so that fraction of the data is learnable only by
/// memorization.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub train_count: usize,
    pub test_count: usize,
    pub classes: usize,
    pub seed: u64,
    pub mix: f32,
    pub label_noise: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_count: 2000,
            test_count: 2000,
            classes: 10,
            seed: 7,
            mix: 0.35,
            label_noise: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
enum Source {
    /// One binary file per split.
    CifarFiles {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        label_bytes: usize,
    },
    Synthetic(SyntheticSpec),
}

/// A loadable dataset with declared shape and class count.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    source: Source,
    image_shape: Shape,
    class_count: usize,
}

impl DatasetHandle {
    pub fn synthetic(spec: SyntheticSpec) -> Result<Self> {
        if spec.classes == 0 || spec.train_count == 0 || spec.test_count == 0 {
            return Err(Error::validation(
                "synthetic spec needs positive classes and counts",
            ));
        }
        if !(0.0..=1.0).contains(&spec.label_noise) || !(0.0..=1.0).contains(&spec.mix) {
            return Err(Error::validation(
                "synthetic mix and label_noise must be in [0, 1]",
            ));
        }
        Ok(DatasetHandle {
            class_count: spec.classes,
            source: Source::Synthetic(spec),
            image_shape: Shape::new(vec![CIFAR_DIM, CIFAR_DIM, 3])?,
        })
    }

    /// CIFAR-10 binary batches: one or more train files plus test files.
    pub fn cifar10(train: Vec<PathBuf>, test: Vec<PathBuf>) -> Result<Self> {
        Ok(DatasetHandle {
            source: Source::CifarFiles {
                train,
                test,
                label_bytes: 1,
            },
            image_shape: Shape::new(vec![CIFAR_DIM, CIFAR_DIM, 3])?,
            class_count: 10,
        })
    }

    /// CIFAR-100 binary batches (2 label bytes; the coarse label is ignored).
    pub fn cifar100(train: Vec<PathBuf>, test: Vec<PathBuf>) -> Result<Self> {
        Ok(DatasetHandle {
            source: Source::CifarFiles {
                train,
                test,
                label_bytes: 2,
            },
            image_shape: Shape::new(vec![CIFAR_DIM, CIFAR_DIM, 3])?,
            class_count: 100,
        })
    }

    pub fn image_shape(&self) -> &Shape {
        &self.image_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Load a split as `(image, label)` pairs in deterministic order.
    pub fn load(&self, split: Split) -> Result<Vec<(Tensor, usize)>> {
        match &self.source {
            Source::Synthetic(spec) => Ok(generate_synthetic(spec, split)),
            Source::CifarFiles {
                train,
                test,
                label_bytes,
            } => {
                let paths = match split {
                    Split::Train => train,
                    Split::Test => test,
                };
                let mut out = Vec::new();
                for path in paths {
                    load_cifar_file(path, *label_bytes, self.class_count, &mut out)?;
                }
                Ok(out)
            }
        }
    }
}

fn load_cifar_file(
    path: &Path,
    label_bytes: usize,
    class_count: usize,
    out: &mut Vec<(Tensor, usize)>,
) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let record_len = label_bytes + CIFAR_PIXELS;
    if bytes.len() % record_len != 0 {
        return Err(Error::Truncated(format!(
            "{}: length {} is not a multiple of the {record_len}-byte record size",
            path.display(),
            bytes.len()
        )));
    }
    let shape = Shape::new(vec![CIFAR_DIM, CIFAR_DIM, 3])?;
    for (index, record) in bytes.chunks_exact(record_len).enumerate() {
        // CIFAR-100 records are [coarse, fine]; the fine label is last.
        let label = record[label_bytes - 1] as usize;
        if label >= class_count {
            return Err(Error::Record {
                index,
                message: format!("label {label} out of range for {class_count} classes"),
            });
        }
        let planes = &record[label_bytes..];
        let mut data = vec![0.0f32; CIFAR_PIXELS];
        // channel-planar u8 -> [H, W, C] f32 in [0, 1]
        for c in 0..3 {
            let plane = &planes[c * 1024..(c + 1) * 1024];
            for (px, &v) in plane.iter().enumerate() {
                data[px * 3 + c] = v as f32 / 255.0;
            }
        }
        out.push((Tensor::new(shape.clone(), data)?, label));
    }
    Ok(())
}

fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Vec<(Tensor, usize)> {
    let shape = Shape::new(vec![CIFAR_DIM, CIFAR_DIM, 3]).unwrap();
    let pixels = shape.count();

    // Class patterns come from the spec seed alone so train and test share them.
    let mut pattern_rng = InitRng::from_seed(spec.seed ^ 0xC1A5_5E5E);
    let patterns: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| (0..pixels).map(|_| pattern_rng.next_unit()).collect())
        .collect();

    let (count, stream) = match split {
        Split::Train => (spec.train_count, spec.seed ^ 0x7821_11AA),
        Split::Test => (spec.test_count, spec.seed ^ 0x3344_F0F0),
    };
    let mut rng = InitRng::from_seed(stream);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pattern_class = (rng.next_unit() * spec.classes as f32) as usize % spec.classes;
        let mut data = vec![0.0f32; pixels];
        let pattern = &patterns[pattern_class];
        for (d, p) in data.iter_mut().zip(pattern) {
            let noise = rng.next_unit();
            *d = spec.mix * p + (1.0 - spec.mix) * noise;
        }
        let label = if rng.next_unit() < spec.label_noise {
            (rng.next_unit() * spec.classes as f32) as usize % spec.classes
        } else {
            pattern_class
        };
        out.push((Tensor::new(shape.clone(), data).unwrap(), label));
    }
    out
}
