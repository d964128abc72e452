//! Synthetic stage-partitioned segmentation data.
//!
//! Scenes are two textured background bands overlaid with flat-coloured
//! geometric shapes and additive Gaussian noise. Every image keeps its full
//! label map; the label map a training stage sees is the full map restricted
//! to that stage's classes, everything else IGNORE.

mod augment;
mod disk;
mod memory;
mod scene;

pub use augment::{augment, AugmentConfig};
pub use disk::{read_dataset, read_scene, write_dataset, SPLIT_NAMES};
pub use memory::{memory_score, select_memory, MemoryStore};
pub use scene::{ClassRender, RenderKind, SceneSpec, ShapeKind, Texture};

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LabelMap, IGNORE};
use crate::model::ClassId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 8-bit RGB image, pixel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "{}×{} RGB image with {} bytes",
                height,
                width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }
}

/// One image with its stage-visible labels and its complete labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
    pub full_labels: LabelMap,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Training subsets `D1..Dk` plus the fully labeled test set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Dataset>,
    pub test: Dataset,
}

/// Class partition `S1..Sk` and the subset sizes `|D1|..|Dk|, |test|`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePlan {
    pub class_partition: Vec<Vec<ClassId>>,
    pub sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            class_partition: vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]],
            sizes: vec![120, 120, 120, 60],
            seed: 0,
        }
    }
}

impl StagePlan {
    pub fn stages(&self) -> usize {
        self.class_partition.len()
    }

    /// Classes of all stages, in stage order.
    pub fn all_classes(&self) -> Vec<ClassId> {
        self.class_partition.iter().flatten().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_partition.len();
        if !(1..=3).contains(&k) {
            return Err(Error::Config(format!("plans have 1 to 3 stages, got {k}")));
        }
        if self.sizes.len() != k + 1 {
            return Err(Error::Config(format!(
                "{k} stages need {} subset sizes (train subsets + test), got {}",
                k + 1,
                self.sizes.len()
            )));
        }
        if self.sizes.contains(&0) {
            return Err(Error::Config("subset sizes must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.class_partition.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Config(format!("stage {} has no classes", i + 1)));
            }
            for &c in s {
                if c == IGNORE {
                    return Err(Error::Config(format!("class id {IGNORE} is reserved for IGNORE")));
                }
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {c} assigned to more than one stage")));
                }
            }
        }
        Ok(())
    }

    /// Checks the plan against the classes a scene can render.
    pub fn validate_for(&self, spec: &SceneSpec) -> Result<()> {
        self.validate()?;
        let known: BTreeSet<ClassId> = spec.classes.iter().map(|c| c.id).collect();
        if let Some(c) = self.all_classes().iter().find(|c| !known.contains(c)) {
            return Err(Error::Config(format!("class {c} is not rendered by the scene spec")));
        }
        Ok(())
    }
}

/// Labels outside `stage_classes` become IGNORE.
pub fn relabel_for_stage(full: &LabelMap, stage_classes: &[ClassId]) -> LabelMap {
    full.restrict(stage_classes)
}

/// Minimum mean pixel share of each stage class within its training subset.
pub const MIN_CLASS_SHARE: f64 = 0.05;

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Mean share of pixels labeled `class` over the images of a subset.
pub fn class_share(samples: &[Sample], class: ClassId) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let n = s.labels.values().iter().filter(|&&v| v == class).count();
            n as f64 / s.labels.len() as f64
        })
        .sum();
    total / samples.len() as f64
}

const MAX_ATTEMPTS: u64 = 16;

/// Renders `D1..Dk` and the test set. Fully determined by `(spec, plan)`.
pub fn generate(spec: &SceneSpec, plan: &StagePlan) -> Result<Splits> {
    spec.validate()?;
    plan.validate_for(spec)?;
    let all = plan.all_classes();
    let mut train = Vec::with_capacity(plan.stages());
    for (k, classes) in plan.class_partition.iter().enumerate() {
        let mut accepted = None;
        for attempt in 0..MAX_ATTEMPTS {
            let samples = render_subset(spec, plan.seed, k as u64, attempt, plan.sizes[k], classes);
            if classes
                .iter()
                .all(|&c| class_share(&samples, c) >= MIN_CLASS_SHARE)
            {
                accepted = Some(samples);
                break;
            }
        }
        let samples = accepted.ok_or_else(|| {
            Error::Data(format!(
                "stage {} classes {classes:?} stay below {:.0}% pixel share after {MAX_ATTEMPTS} attempts",
                k + 1,
                MIN_CLASS_SHARE * 100.0
            ))
        })?;
        train.push(Dataset { samples });
    }
    let test_size = plan.sizes[plan.stages()];
    let test = render_subset(spec, plan.seed, 1000, 0, test_size, &all);
    Ok(Splits {
        train,
        test: Dataset { samples: test },
    })
}

fn render_subset(
    spec: &SceneSpec,
    seed: u64,
    subset: u64,
    attempt: u64,
    size: usize,
    visible: &[ClassId],
) -> Vec<Sample> {
    (0..size)
        .into_par_iter()
        .map(|idx| {
            let s = mix_seed(&[seed, subset, attempt, idx as u64]);
            let (image, full) = spec.render(s);
            let visible_full = full.restrict(&spec.class_ids());
            Sample {
                labels: relabel_for_stage(&full, visible),
                full_labels: visible_full,
                image,
            }
        })
        .collect()
}

impl Splits {
    /// Union of all training subsets with complete labels over `classes`,
    /// as used by single-stage upper-bound training.
    pub fn fully_labeled_union(&self, classes: &[ClassId]) -> Dataset {
        let samples = self
            .train
            .iter()
            .flat_map(|d| &d.samples)
            .map(|s| Sample {
                labels: s.full_labels.restrict(classes),
                ..s.clone()
            })
            .collect();
        Dataset { samples }
    }
}

/// Converts images to a `[N, 3, H, W]` tensor with values in `[-0.5, 0.5]`.
pub fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    if images.iter().any(|i| i.height != h || i.width != w) {
        return Err(Error::Data("images in a batch differ in size".into()));
    }
    let plane = h * w;
    let mut data = vec![T::zero(); images.len() * 3 * plane];
    let scale = T::of(1.0 / 255.0);
    let half = T::of(0.5);
    for (n, img) in images.iter().enumerate() {
        for p in 0..plane {
            for c in 0..3 {
                data[(n * 3 + c) * plane + p] = T::of(img.pixels[p * 3 + c] as f64) * scale - half;
            }
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}
