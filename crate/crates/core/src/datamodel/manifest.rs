use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{ClassSpace, Domain, SegmentationSample};
use crate::error::{Error, Result};
use crate::par;

/// `manifest.json` at the root of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub domain: Domain,
    pub class_names: Vec<String>,
    pub ignore_index: u8,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
}

/// A loaded dataset: samples in memory, ordered by id.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: Option<PathBuf>,
    pub domain: Domain,
    pub class_space: ClassSpace,
    pub samples: Vec<SegmentationSample>,
}

impl DatasetManifest {
    /// Builds an in-memory dataset, sorting samples by id.
    pub fn from_samples(domain: Domain, class_space: ClassSpace, mut samples: Vec<SegmentationSample>) -> Result<Self> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        for w in samples.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::data(&w[0].id, "duplicate sample id"));
            }
        }
        for s in &samples {
            if s.domain != domain {
                return Err(Error::data(
                    &s.id,
                    format!("sample domain {} in {domain} dataset", s.domain),
                ));
            }
            if let Some(label) = &s.label {
                if let Some(bad) = label.iter().find(|&&v| !class_space.is_valid_label(v)) {
                    return Err(Error::data(&s.id, format!("label value {bad} outside class space")));
                }
            }
        }
        Ok(DatasetManifest {
            root: None,
            domain,
            class_space,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn has_labels(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.label.is_some())
    }

    /// Copy of this dataset with labels removed, as used for target-domain training.
    pub fn without_labels(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.label = None;
        }
        out
    }
}

fn read_rgb(path: &Path, id: &str) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::data(id, format!("cannot read image {}: {e}", path.display())))?;
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = rgb.into_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        raw[(y * w + x) * 3 + c] as f32 / 255.0
    }))
}

fn read_label(path: &Path, id: &str) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::data(id, format!("cannot read label {}: {e}", path.display())))?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::data(
                id,
                format!("label must be 8-bit single-channel, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = gray.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), gray.into_raw()).map_err(|e| Error::data(id, e.to_string()))
}

/// Loads `<root>/manifest.json` and every image/label it references.
///
/// Source datasets must provide a label for every entry. Target datasets may
/// provide labels; they are kept for evaluation only.
pub fn load_manifest(root: &Path, domain: Domain, class_space: &ClassSpace) -> Result<DatasetManifest> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::data("manifest.json", format!("malformed manifest: {e}")))?;
    if file.domain != domain {
        return Err(Error::data(
            "manifest.json",
            format!("expected a {domain} dataset, manifest declares {}", file.domain),
        ));
    }
    if file.class_names != class_space.names() || file.ignore_index != class_space.ignore_index() {
        return Err(Error::data(
            "manifest.json",
            "class names or ignore index differ from the class space",
        ));
    }
    let mut entries = file.entries;
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let loaded = par::map_slice(&entries, |entry| -> Result<SegmentationSample> {
        let id = entry.id.as_str();
        let image_path = root.join("images").join(format!("{id}.png"));
        if !image_path.is_file() {
            return Err(Error::data(id, format!("missing image {}", image_path.display())));
        }
        let image = read_rgb(&image_path, id)?;
        let label_path = root.join("labels").join(format!("{id}.png"));
        let label = if label_path.is_file() {
            let label = read_label(&label_path, id)?;
            if let Some(bad) = label.iter().find(|&&v| !class_space.is_valid_label(v)) {
                return Err(Error::data(id, format!("label value {bad} outside class space")));
            }
            Some(label)
        } else if domain == Domain::Source {
            return Err(Error::data(id, format!("missing label {}", label_path.display())));
        } else {
            None
        };
        SegmentationSample::new(id, image, label, domain)
    });
    let samples = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::from_samples(domain, class_space.clone(), samples)?;
    manifest.root = Some(root.to_path_buf());
    Ok(manifest)
}

/// Writes a dataset in the layout read by [`load_manifest`].
pub fn write_manifest(root: &Path, dataset: &DatasetManifest) -> Result<()> {
    let images = root.join("images");
    let labels = root.join("labels");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    if dataset.samples.iter().any(|s| s.label.is_some()) {
        fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    }
    let written = par::map_slice(&dataset.samples, |s| -> Result<()> {
        let (_, h, w) = s.image.dim();
        let mut raw = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    raw.push((s.image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        let path = images.join(format!("{}.png", s.id));
        RgbImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer sized to image")
            .save(&path)
            .map_err(|e| Error::data(&s.id, format!("cannot write {}: {e}", path.display())))?;
        if let Some(label) = &s.label {
            let path = labels.join(format!("{}.png", s.id));
            let raw = label.as_standard_layout().iter().copied().collect();
            GrayImage::from_raw(w as u32, h as u32, raw)
                .expect("buffer sized to label")
                .save(&path)
                .map_err(|e| Error::data(&s.id, format!("cannot write {}: {e}", path.display())))?;
        }
        Ok(())
    });
    written.into_iter().collect::<Result<Vec<_>>>()?;
    let file = ManifestFile {
        domain: dataset.domain,
        class_names: dataset.class_space.names().to_vec(),
        ignore_index: dataset.class_space.ignore_index(),
        entries: dataset
            .samples
            .iter()
            .map(|s| ManifestEntry { id: s.id.clone() })
            .collect(),
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
