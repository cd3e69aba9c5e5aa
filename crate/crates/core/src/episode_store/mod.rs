//! Image/mask records, dataset ingestion, episode sampling and the
//! synthetic episode generator.

mod augment;
mod io;
mod synthetic;
mod transform;

use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::Rng;

pub use augment::{apply_cutout, augment_support, AugmentConfig, AugmentRecord, CutoutRect};
pub use io::{load_dataset, DatasetLayout};
pub use synthetic::{generate_synthetic_episode, synthetic_dataset, ShapeFamily, SyntheticSpec};
pub(crate) use transform::bilinear2;
pub use transform::{resize, tile_image};

use crate::error::{DarnetError, Result};

/// An RGB image in [0,1] with a binary foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// H×W×3.
    pub image: Array3<f64>,
    /// H×W with values in {0, 1}.
    pub mask: Array2<u8>,
    pub class_id: usize,
    pub source_id: String,
}

impl LabeledImage {
    pub fn new(
        image: Array3<f64>,
        mask: Array2<u8>,
        class_id: usize,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(DarnetError::ShapeMismatch(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if mask.dim() != (h, w) {
            return Err(DarnetError::ShapeMismatch(format!(
                "image {h}x{w} vs mask {}x{}",
                mask.dim().0,
                mask.dim().1
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(DarnetError::ShapeMismatch(
                "mask values must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            image,
            mask,
            class_id,
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.mask.dim().0
    }

    pub fn width(&self) -> usize {
        self.mask.dim().1
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().map(|&m| m as f64).sum::<f64>() / self.mask.len() as f64
    }
}

/// A 1-way K-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<LabeledImage>,
    pub query: Vec<LabeledImage>,
    pub n_way: usize,
    pub k_shot: usize,
}

impl Episode {
    pub fn is_disjoint(&self) -> bool {
        self.support
            .iter()
            .all(|s| self.query.iter().all(|q| q.source_id != s.source_id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecords {
    pub name: String,
    pub records: Vec<LabeledImage>,
}

/// Immutable collection of records grouped by class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    classes: Vec<ClassRecords>,
}

impl Dataset {
    pub fn new(classes: Vec<ClassRecords>) -> Self {
        Self { classes }
    }

    pub fn classes(&self) -> &[ClassRecords] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_records(&self) -> usize {
        self.classes.iter().map(|c| c.records.len()).sum()
    }
}

/// Samples a 1-way episode: one class uniformly, then `k_shot + q_size`
/// distinct records of it.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    k_shot: usize,
    q_size: usize,
    rng: &mut R,
) -> Result<Episode> {
    if dataset.classes.is_empty() {
        return Err(DarnetError::DegenerateEpisode(
            "dataset has no classes".into(),
        ));
    }
    let class = &dataset.classes[rng.random_range(0..dataset.classes.len())];
    let needed = k_shot + q_size;
    if class.records.len() < needed {
        return Err(DarnetError::InsufficientRecords {
            class: class.name.clone(),
            available: class.records.len(),
            needed,
        });
    }
    let picks = sample(rng, class.records.len(), needed).into_vec();
    let mut chosen = picks.into_iter().map(|i| class.records[i].clone());
    let support = chosen.by_ref().take(k_shot).collect();
    let query = chosen.collect();
    Ok(Episode {
        support,
        query,
        n_way: 1,
        k_shot,
    })
}
