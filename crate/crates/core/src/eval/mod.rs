//! Confusion-matrix metrics, sliding-window inference and evaluation reports.

mod inference;
mod metrics;

pub use inference::{flip_aggregated_probs, predict_probs, sliding_window_infer, tiles, InferConfig, Tile};
pub use metrics::{compute_iou, ClassIou, ConfusionMatrix, EvalReport};

use crate::datamodel::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::ops::argmax_channels;
use crate::nn::Real;
use crate::par;

/// Runs sliding-window inference over every labelled sample and scores it.
/// Images are processed in parallel; each produces its own matrix and the
/// matrices are summed in manifest order.
pub fn evaluate<S: Real>(
    model: &ModelBundle<S>,
    manifest: &DatasetManifest,
    cfg: &InferConfig,
    dataset: &str,
) -> Result<EvalReport> {
    cfg.validate(model.min_input())?;
    if manifest.is_empty() {
        return Err(Error::data(dataset, "manifest is empty"));
    }
    if let Some(s) = manifest.samples.iter().find(|s| s.label.is_none()) {
        return Err(Error::data(&s.id, "evaluation needs labelled samples"));
    }
    let space = &manifest.class_space;
    if space.num_classes() != model.num_classes() {
        return Err(Error::config(
            "model.num_classes",
            format!(
                "model predicts {} classes but the dataset has {}",
                model.num_classes(),
                space.num_classes()
            ),
        ));
    }
    let parts = par::map_slice(&manifest.samples, |sample| -> Result<ConfusionMatrix> {
        let image = sample.image.mapv(|v| S::lit(v as f64));
        let probs = sliding_window_infer(model, image.view(), cfg)?;
        let pred = argmax_channels(probs.view());
        let mut cm = ConfusionMatrix::for_classes(space);
        cm.update(pred.view(), sample.label.as_ref().expect("checked").view())?;
        Ok(cm)
    });
    let mut cm = ConfusionMatrix::for_classes(space);
    for part in parts {
        cm.merge(&part?)?;
    }
    compute_iou(&cm, space.names(), dataset)
}
