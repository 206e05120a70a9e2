use ndarray::{Array4, ArrayView4, Zip};

use crate::error::{Error, Result};
use crate::model::{Encoder, EncoderConfig, EncoderKind, TensorArchive};
use crate::nn::loss::cosine_distance;
use crate::nn::ops::reflect_pad;
use crate::nn::Real;
use crate::rng::{stream_rng, tag};

/// Mean `1 - cos` between projected student features and reference
/// features, plus `smooth_l1_weight` times a smooth-L1 term (zero by default).
/// Returns the loss and its gradient with respect to `student`.
pub fn feature_distance_loss<S: Real>(
    student: ArrayView4<'_, S>,
    reference: ArrayView4<'_, S>,
    smooth_l1_weight: f64,
) -> Result<(S, Array4<S>)> {
    if student.dim() != reference.dim() {
        return Err(Error::shape(format!(
            "projected features {:?} and reference features {:?} differ",
            student.dim(),
            reference.dim()
        )));
    }
    let (mut loss, mut grad) = cosine_distance(student, reference);
    if smooth_l1_weight > 0.0 {
        let n = S::lit(student.len() as f64);
        let wt = S::lit(smooth_l1_weight);
        let half = S::lit(0.5);
        let mut total = S::zero();
        Zip::from(&mut grad)
            .and(&student)
            .and(&reference)
            .for_each(|g, &s, &r| {
                let d = s - r;
                let (v, dv) = if d.abs() < S::one() {
                    (half * d * d, d)
                } else {
                    (d.abs() - half, d.signum())
                };
                total += v;
                *g += wt * dv / n;
            });
        loss += wt * total / n;
    }
    Ok((loss, grad))
}

/// Frozen feature extractor that the projected student tokens are pulled
/// towards. It is never trained; its weights come from a fixed seed or a
/// user-supplied archive.
#[derive(Debug, Clone)]
pub struct ReferenceExtractor<S: Real> {
    pub encoder: Encoder<S>,
}

impl<S: Real> ReferenceExtractor<S> {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, tag::REFERENCE_INIT);
        let mut encoder = Encoder::new(config, &mut rng)?;
        if config.kind == EncoderKind::ExternalPretrained {
            let path = config.weights.as_ref().expect("validated");
            TensorArchive::load(path)?.load_module("", &mut encoder)?;
        }
        Ok(ReferenceExtractor { encoder })
    }

    pub fn dim(&self) -> usize {
        self.encoder.embed_dim()
    }

    /// Token grid for `x`, reflection-padded to the patch size like the student.
    pub fn features(&self, x: ArrayView4<'_, S>) -> Result<Array4<S>> {
        let (_, _, h, w) = x.dim();
        let p = self.encoder.config.patch_size;
        let padded = reflect_pad(x, h.next_multiple_of(p) - h, w.next_multiple_of(p) - w);
        self.encoder.infer(padded.view())
    }
}
