use std::fmt;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::datamodel::ClassSpace;
use crate::error::{Error, Result};

/// `counts[g * C + p]` is the number of pixels with ground truth `g`
/// predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore_index: u8,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_index: u8) -> Self {
        ConfusionMatrix {
            num_classes,
            ignore_index,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn for_classes(space: &ClassSpace) -> Self {
        Self::new(space.num_classes(), space.ignore_index())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair, skipping ignored pixels.
    pub fn update(&mut self, pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::shape(format!(
                "prediction {:?} and label {:?} differ in shape",
                pred.dim(),
                gt.dim()
            )));
        }
        let c = self.num_classes;
        if let Some(&bad) = pred.iter().find(|&&p| p as usize >= c) {
            return Err(Error::param(format!(
                "prediction contains {bad}, which is not a class id (0..{c})"
            )));
        }
        if let Some(&bad) = gt.iter().find(|&&g| g != self.ignore_index && g as usize >= c) {
            return Err(Error::param(format!("label value {bad} outside the class space")));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g != self.ignore_index {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion matrices have different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    /// `None` when the class is absent from both ground truth and prediction.
    pub iou: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub per_class: Vec<ClassIou>,
    /// Mean over classes with a defined IoU.
    pub miou: f64,
    pub labeled_pixels: u64,
}

/// Per-class IoU and their mean; classes with an empty union are flagged and
/// left out of the mean.
pub fn compute_iou(cm: &ConfusionMatrix, class_names: &[String], dataset: &str) -> Result<EvalReport> {
    let c = cm.num_classes();
    if class_names.len() != c {
        return Err(Error::shape("class names do not match the confusion matrix"));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::NoLabeledPixels);
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.get(k, k);
        let row: u64 = (0..c).map(|p| cm.get(k, p)).sum();
        let col: u64 = (0..c).map(|g| cm.get(g, k)).sum();
        let (fp, fn_) = (col - tp, row - tp);
        let denom = tp + fp + fn_;
        per_class.push(ClassIou {
            class: class_names[k].clone(),
            iou: (denom > 0).then(|| tp as f64 / denom as f64),
            tp,
            fp,
            fn_,
        });
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|r| r.iou).collect();
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(EvalReport {
        dataset: dataset.to_string(),
        per_class,
        miou,
        labeled_pixels: total,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let to_err = |e: csv::Error| Error::data(path.display().to_string(), e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        w.write_record(["class", "iou", "tp", "fp", "fn"]).map_err(to_err)?;
        for r in &self.per_class {
            let iou = r.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            w.write_record([
                r.class.clone(),
                iou,
                r.tp.to_string(),
                r.fp.to_string(),
                r.fn_.to_string(),
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.per_class.iter().map(|r| r.class.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>6}", "Class", "IoU")?;
        for r in &self.per_class {
            match r.iou {
                Some(v) => writeln!(f, "{:<width$}  {:>6.1}", r.class, 100.0 * v)?,
                None => writeln!(f, "{:<width$}  {:>6}", r.class, "n/a")?,
            }
        }
        write!(f, "{:<width$}  {:>6.1}  ({})", "mIoU", 100.0 * self.miou, self.dataset)
    }
}
