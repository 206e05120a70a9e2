use ndarray::{Array4, ArrayView4};
use rand::Rng;

use super::layers::{crop_backward, ConvBnRelu};
use super::{DecoderConfig, MultiScaleFeatures};
use crate::error::Result;
use crate::nn::ops::{
    crop, resize_bilinear, resize_bilinear_backward, upsample_nearest2x, upsample_nearest2x_backward,
};
use crate::nn::{Conv2d, Parameters, Real, TensorMut, TensorRef};

/// A segmentation head over four-level features.
pub trait SegmentationDecoder<S: Real>: Parameters<S> {
    /// Logits at `out_h` x `out_w`, evaluation mode.
    fn infer(&self, features: &MultiScaleFeatures<S>, out_h: usize, out_w: usize) -> Array4<S>;

    /// Logits at `out_h` x `out_w`, training mode.
    fn forward(&mut self, features: &MultiScaleFeatures<S>, out_h: usize, out_w: usize) -> Array4<S>;

    /// Gradients with respect to each feature level, finest first.
    fn backward(&mut self, dlogits: ArrayView4<'_, S>) -> [Array4<S>; 4];
}

/// Convolution-only pyramid decoder.
///
/// Starting from the stride-32 level, each stage upsamples 2x (nearest),
/// applies a 3x3 convolution, batch norm and ReLU at the next, narrower
/// width, then adds a pointwise projection of the matching skip level.
/// A pointwise classifier at stride 4 is bilinearly resized to the output.
#[derive(Debug, Clone)]
pub struct PyramidDecoder<S: Real> {
    pub stem: ConvBnRelu<S>,
    pub stages: Vec<ConvBnRelu<S>>,
    pub skips: Vec<Conv2d<S>>,
    pub classifier: Conv2d<S>,
    cache: Option<DecoderCache>,
}

#[derive(Debug, Clone)]
struct DecoderCache {
    /// Pre-crop upsampled size and post-crop size for each stage.
    stage_sizes: Vec<((usize, usize), (usize, usize))>,
    head_hw: (usize, usize),
}

impl<S: Real> PyramidDecoder<S> {
    pub fn new<R: Rng + ?Sized>(
        config: &DecoderConfig,
        in_channels: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let w = &config.channel_schedule;
        let stem = ConvBnRelu::new("decoder.stem.0", in_channels, w[0], 1, 1, rng);
        let stages = (0..3)
            .map(|i| ConvBnRelu::new(&format!("decoder.stage.{i}"), w[i], w[i + 1], 3, 1, rng))
            .collect();
        let skips = (0..3)
            .map(|i| Conv2d::pointwise(&format!("decoder.skip.{i}"), in_channels, w[i + 1], rng))
            .collect();
        let classifier = Conv2d::pointwise("decoder.classifier.0", w[3], num_classes, rng);
        Ok(PyramidDecoder {
            stem,
            stages,
            skips,
            classifier,
            cache: None,
        })
    }

    /// Per-stage output widths, coarsest first.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.stem.conv.out_channels)
            .chain(self.stages.iter().map(|s| s.conv.out_channels))
            .collect()
    }
}

impl<S: Real> SegmentationDecoder<S> for PyramidDecoder<S> {
    fn infer(&self, f: &MultiScaleFeatures<S>, out_h: usize, out_w: usize) -> Array4<S> {
        let mut x = self.stem.infer(f.levels[3].view());
        for i in 0..3 {
            let skip = &f.levels[2 - i];
            let (_, _, h, w) = skip.dim();
            let up = crop(upsample_nearest2x(x.view()).view(), h, w);
            x = self.stages[i].infer(up.view());
            x += &self.skips[i].infer(skip.view());
        }
        let logits = self.classifier.infer(x.view());
        resize_bilinear(logits.view(), out_h, out_w)
    }

    fn forward(&mut self, f: &MultiScaleFeatures<S>, out_h: usize, out_w: usize) -> Array4<S> {
        let mut x = self.stem.forward(f.levels[3].view());
        let mut stage_sizes = Vec::with_capacity(3);
        for i in 0..3 {
            let skip = &f.levels[2 - i];
            let (_, _, h, w) = skip.dim();
            let up = upsample_nearest2x(x.view());
            let (_, _, uh, uw) = up.dim();
            stage_sizes.push(((uh, uw), (h, w)));
            let up = crop(up.view(), h, w);
            x = self.stages[i].forward(up.view());
            x += &self.skips[i].forward(skip.view());
        }
        let logits = self.classifier.forward(x.view());
        let (_, _, hh, hw) = logits.dim();
        self.cache = Some(DecoderCache {
            stage_sizes,
            head_hw: (hh, hw),
        });
        resize_bilinear(logits.view(), out_h, out_w)
    }

    fn backward(&mut self, dlogits: ArrayView4<'_, S>) -> [Array4<S>; 4] {
        let cache = self.cache.take().expect("PyramidDecoder::backward without forward");
        let (hh, hw) = cache.head_hw;
        let d = resize_bilinear_backward(dlogits, hh, hw);
        let mut dx = self.classifier.backward(d.view()).expect("classifier input gradient");
        let mut dlevels: [Option<Array4<S>>; 4] = [None, None, None, None];
        for i in (0..3).rev() {
            dlevels[2 - i] = self.skips[i].backward(dx.view());
            let dup = self.stages[i].backward(dx.view()).expect("stage input gradient");
            let ((uh, uw), _) = cache.stage_sizes[i];
            dx = upsample_nearest2x_backward(crop_backward(dup.view(), uh, uw).view());
        }
        dlevels[3] = self.stem.backward(dx.view());
        dlevels.map(|d| d.expect("level gradient"))
    }
}

impl<S: Real> Parameters<S> for PyramidDecoder<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        self.stem.visit(f);
        for (stage, skip) in self.stages.iter().zip(&self.skips) {
            stage.visit(f);
            skip.visit(f);
        }
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        self.stem.visit_mut(f);
        for (stage, skip) in self.stages.iter_mut().zip(&mut self.skips) {
            stage.visit_mut(f);
            skip.visit_mut(f);
        }
        self.classifier.visit_mut(f);
    }
}
