//! Datasets, class spaces, class statistics and the procedural toy benchmark.

mod frequency;
mod manifest;
mod rcs;
pub mod toy;

pub use frequency::{compute_class_frequencies, ClassFrequencyTable};
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestFile};
pub use rcs::{build_rare_class_index, sample_source, RareClassIndex};
pub use toy::{generate_toy_domains, ToyBenchmark, ToyConfig};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from every loss and metric unless configured otherwise.
pub const DEFAULT_IGNORE_INDEX: u8 = 255;

/// Ordered class names plus the ignore label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpace {
    names: Vec<String>,
    ignore_index: u8,
}

impl ClassSpace {
    pub fn new(names: Vec<String>, ignore_index: u8) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::param("class space needs at least one class"));
        }
        if names.len() > 255 {
            return Err(Error::param("at most 255 classes fit 8-bit label maps"));
        }
        if (ignore_index as usize) < names.len() {
            return Err(Error::param(format!(
                "ignore index {ignore_index} collides with class id range 0..{}",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::param(format!("class {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::param(format!("duplicate class name `{n}`")));
            }
        }
        Ok(ClassSpace { names, ignore_index })
    }

    pub fn from_names<I, T>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        Self::new(names.into_iter().map(Into::into).collect(), DEFAULT_IGNORE_INDEX)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    /// True for class ids and the ignore label.
    pub fn is_valid_label(&self, v: u8) -> bool {
        (v as usize) < self.names.len() || v == self.ignore_index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

/// One image with an optional dense label map.
///
/// `image` is stored channel-first as `[3, h, w]` with values in `[0, 1]`;
/// `label` is `[h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Array3<f32>,
    pub label: Option<Array2<u8>>,
    pub domain: Domain,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Array3<f32>, label: Option<Array2<u8>>, domain: Domain) -> Result<Self> {
        let id = id.into();
        if image.dim().0 != 3 {
            return Err(Error::data(&id, "image must have 3 channels"));
        }
        if let Some(l) = &label {
            if l.dim() != (image.dim().1, image.dim().2) {
                return Err(Error::data(&id, "label size differs from image size"));
            }
        }
        Ok(SegmentationSample {
            id,
            image,
            label,
            domain,
        })
    }

    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }
}
