use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{ClassSpace, DatasetManifest};
use crate::error::{Error, Result};
use crate::par;

/// Per-class pixel and image counts over a labelled dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFrequencyTable {
    pub pixel_count: Vec<u64>,
    /// Number of images containing at least one pixel of the class.
    pub image_count: Vec<u64>,
    pub num_images: u64,
}

impl ClassFrequencyTable {
    fn empty(classes: usize) -> Self {
        ClassFrequencyTable {
            pixel_count: vec![0; classes],
            image_count: vec![0; classes],
            num_images: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.pixel_count.len()
    }

    pub fn total_pixels(&self) -> u64 {
        self.pixel_count.iter().sum()
    }

    /// Pixel frequency of every class; sums to one.
    pub fn frequency(&self) -> Vec<f64> {
        let total = self.total_pixels() as f64;
        self.pixel_count.iter().map(|&c| c as f64 / total).collect()
    }

    /// Count-weighted union of two tables over the same class space.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.num_classes() != other.num_classes() {
            return Err(Error::param("cannot merge frequency tables of different class counts"));
        }
        Ok(ClassFrequencyTable {
            pixel_count: self
                .pixel_count
                .iter()
                .zip(&other.pixel_count)
                .map(|(a, b)| a + b)
                .collect(),
            image_count: self
                .image_count
                .iter()
                .zip(&other.image_count)
                .map(|(a, b)| a + b)
                .collect(),
            num_images: self.num_images + other.num_images,
        })
    }

    /// CSV with header `class,pixel_count,image_count,frequency`.
    pub fn write_csv<W: Write>(&self, classes: &ClassSpace, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| Error::param(format!("csv: {e}"));
        w.write_record(["class", "pixel_count", "image_count", "frequency"])
            .map_err(to_err)?;
        for ((name, (&p, &i)), f) in classes
            .names()
            .iter()
            .zip(self.pixel_count.iter().zip(&self.image_count))
            .zip(self.frequency())
        {
            w.write_record([name.clone(), p.to_string(), i.to_string(), format!("{f:.9}")])
                .map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::param(format!("csv: {e}")))?;
        Ok(())
    }
}

/// Counts labelled pixels per class, excluding the ignore label.
pub fn compute_class_frequencies(manifest: &DatasetManifest) -> Result<ClassFrequencyTable> {
    let classes = manifest.class_space.num_classes();
    let ignore = manifest.class_space.ignore_index();
    if manifest.is_empty() {
        return Err(Error::NoLabeledPixels);
    }
    let per_image = par::map_slice(&manifest.samples, |s| -> Result<ClassFrequencyTable> {
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| Error::data(&s.id, "sample has no label map"))?;
        let mut t = ClassFrequencyTable::empty(classes);
        t.num_images = 1;
        for &v in label.iter() {
            if v != ignore {
                t.pixel_count[v as usize] += 1;
            }
        }
        for (img, &px) in t.image_count.iter_mut().zip(&t.pixel_count) {
            *img = u64::from(px > 0);
        }
        Ok(t)
    });
    let mut total = ClassFrequencyTable::empty(classes);
    for t in per_image {
        total = total.merge(&t?)?;
    }
    if total.total_pixels() == 0 {
        return Err(Error::NoLabeledPixels);
    }
    Ok(total)
}
