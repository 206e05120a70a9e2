use ndarray::{Array2, Array3, ArrayView4, Axis};

use crate::error::{Error, Result};
use crate::eval::{flip_aggregated_probs, predict_probs};
use crate::model::ModelBundle;
use crate::nn::ops::argmax_channels;
use crate::nn::Real;

/// Teacher pseudo-labels for a batch of target images.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch<S> {
    /// `[batch, h, w]` class ids.
    pub labels: Array3<u8>,
    /// `[batch, h, w]` maximum class probability.
    pub confidence: Array3<S>,
    /// Per image, the fraction of pixels with confidence at least `tau`.
    pub q: Vec<f64>,
}

impl<S: Real> PseudoLabelBatch<S> {
    /// The per-pixel weight map of image `i` (its `q` everywhere).
    pub fn weight_map(&self, i: usize) -> Array2<S> {
        let (_, h, w) = self.labels.dim();
        Array2::from_elem((h, w), S::lit(self.q[i]))
    }

    pub fn q_mean(&self) -> f64 {
        self.q.iter().sum::<f64>() / self.q.len() as f64
    }
}

/// Fraction of confidences at or above `tau`.
pub fn confident_fraction<S: Real>(confidence: &Array2<S>, tau: f64) -> f64 {
    let n = confidence.iter().filter(|c| c.as_f64() >= tau).count();
    n as f64 / confidence.len() as f64
}

/// Runs the (evaluation-mode) teacher on `images`, optionally averaging with
/// its mirrored prediction on the mirrored images, and turns the result into
/// hard labels with a per-image confidence weight.
pub fn generate_pseudo_labels<S: Real>(
    teacher: &ModelBundle<S>,
    images: ArrayView4<'_, S>,
    tau: f64,
    flip: bool,
) -> Result<PseudoLabelBatch<S>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::param(format!(
            "pseudo-label threshold must be in (0, 1), got {tau}"
        )));
    }
    let probs = if flip {
        flip_aggregated_probs(teacher, images)?
    } else {
        predict_probs(teacher, images)?
    };
    let (n, _, h, w) = probs.dim();
    let mut labels = Array3::zeros((n, h, w));
    let mut confidence = Array3::zeros((n, h, w));
    let mut q = Vec::with_capacity(n);
    for (b, p) in probs.outer_iter().enumerate() {
        labels.index_axis_mut(Axis(0), b).assign(&argmax_channels(p));
        let conf = p.fold_axis(Axis(0), S::neg_infinity(), |a, &v| a.max(v));
        q.push(confident_fraction(&conf, tau));
        confidence.index_axis_mut(Axis(0), b).assign(&conf);
    }
    Ok(PseudoLabelBatch { labels, confidence, q })
}
