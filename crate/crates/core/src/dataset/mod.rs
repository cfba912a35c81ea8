//! Synthetic saliency data: generation, splitting and file formats.

pub mod generator;
pub mod io;
pub mod layout;
pub mod split;

pub use generator::{generate, oracle_category, Attribute, Blob, DatasetSpec, Layout};
pub use layout::{load_dataset, read_manifest, write_dataset, Manifest, ManifestEntry, MANIFEST_FILE};
pub use split::{split_folds, split_holdout, Fold};

use crate::tensor::Tensor;

/// One image with its continuous ground truth, fixations and category label.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencySample {
    pub id: String,
    pub category: usize,
    /// `[C,H,W]` with values in `[0,1]`.
    pub image: Tensor,
    /// `[1,H,W]`, nonnegative with maximum exactly 1.
    pub density: Tensor,
    /// `[1,H,W]` binary map with at least one fixated pixel.
    pub fixations: Tensor,
    /// Generator ground truth; empty for data from other sources.
    pub blobs: Vec<Blob>,
}

impl SaliencySample {
    /// Mirrors image, density and fixations about the vertical axis.
    pub fn flipped(&self) -> SaliencySample {
        SaliencySample {
            id: self.id.clone(),
            category: self.category,
            image: self.image.flip_horizontal(),
            density: self.density.flip_horizontal(),
            fixations: self.fixations.flip_horizontal(),
            blobs: self.blobs.clone(),
        }
    }

    pub fn fixation_count(&self) -> usize {
        self.fixations.data().iter().filter(|&&v| v > 0.0).count()
    }
}

/// A set of samples with category names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: Option<DatasetSpec>,
    pub category_names: Vec<String>,
    pub samples: Vec<SaliencySample>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> crate::Result<Self> {
        Ok(Self {
            spec: Some(spec.clone()),
            category_names: spec.category_names(),
            samples: generate(spec)?,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.category).collect()
    }

    /// Clones the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Vec<SaliencySample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }
}
