//! Segmentation network: patch-token encoder, multi-scale adapter, pyramid
//! decoder and feature projector.

mod adapter;
pub mod checkpoint;
mod decoder;
mod encoder;
mod layers;
mod projector;

pub use adapter::Adapter;
pub use checkpoint::TensorArchive;
pub use decoder::{PyramidDecoder, SegmentationDecoder};
pub use encoder::{Encoder, TransformerBlock};
pub use layers::ConvBnRelu;
pub use projector::Projector;

use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{crop, reflect_pad, resize_bilinear, resize_bilinear_backward};
use crate::nn::{Parameters, Real, TensorMut, TensorRef};
use crate::rng::{stream_rng, tag};
use layers::crop_backward;

/// Strides of the four feature levels, finest first.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Randomly initialised small transformer.
    ToyTransformer,
    /// Same architecture, weights loaded from a user-supplied archive.
    ExternalPretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Weight archive for `external-pretrained`; tensors named `encoder.*`.
    pub weights: Option<PathBuf>,
    /// Keep encoder weights fixed during training.
    pub frozen: bool,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Reflection-pad inputs up to a multiple of the patch size instead of
    /// rejecting them.
    pub pad_input: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::ToyTransformer,
            weights: None,
            frozen: false,
            patch_size: 16,
            embed_dim: 96,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 2,
            pad_input: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("model.encoder.{key}"), msg));
        if self.patch_size == 0 {
            return bad("patch_size", "must be positive");
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(4) {
            return bad("embed_dim", "must be a positive multiple of 4");
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad("num_heads", "must divide embed_dim");
        }
        if self.depth == 0 {
            return bad("depth", "must be positive");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive");
        }
        if self.kind == EncoderKind::ExternalPretrained && self.weights.is_none() {
            return bad("weights", "external-pretrained encoder needs a weights path");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub enabled: bool,
    /// Spatial-prior widths at strides 4, 8, 16 and 32.
    pub prior_channels: Vec<usize>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            enabled: true,
            prior_channels: vec![16, 32, 48, 64],
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prior_channels.len() != 4 || self.prior_channels.contains(&0) {
            return Err(Error::config(
                "model.adapter.prior_channels",
                "needs four positive widths",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Stage widths from stride 32 down to stride 4.
    pub channel_schedule: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channel_schedule: vec![256, 128, 64, 32],
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.channel_schedule;
        if w.len() != 4 {
            return Err(Error::config(
                "model.decoder.channel_schedule",
                format!("needs exactly 4 widths, got {}", w.len()),
            ));
        }
        if w[3] == 0 || w.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::config(
                "model.decoder.channel_schedule",
                format!("widths must be positive and strictly decreasing, got {w:?}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub teacher_dim: usize,
    /// 1 for a single pointwise map, 2 for linear-GELU-linear.
    pub layers: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            teacher_dim: 128,
            layers: 1,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.teacher_dim == 0 {
            return Err(Error::config("model.projector.teacher_dim", "must be positive"));
        }
        if !(1..=2).contains(&self.layers) {
            return Err(Error::config("model.projector.layers", "must be 1 or 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
    pub projector: ProjectorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 6,
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            decoder: DecoderConfig::default(),
            projector: ProjectorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::config("model.num_classes", "must be in 1..=255"));
        }
        self.encoder.validate()?;
        self.adapter.validate()?;
        self.decoder.validate()?;
        self.projector.validate()
    }
}

/// Feature maps at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures<S> {
    pub levels: [Array4<S>; 4],
}

impl<S: Real> MultiScaleFeatures<S> {
    pub fn new(levels: Vec<Array4<S>>) -> Result<Self> {
        let levels: [Array4<S>; 4] = levels
            .try_into()
            .map_err(|v: Vec<_>| Error::shape(format!("expected 4 feature levels, got {}", v.len())))?;
        for l in 0..3 {
            let (n, _, h, w) = levels[l].dim();
            let (n2, _, h2, w2) = levels[l + 1].dim();
            if n != n2 || h2 != h.div_ceil(2) || w2 != w.div_ceil(2) {
                return Err(Error::shape(format!(
                    "level {} is {h2}x{w2}, expected half of {h}x{w}",
                    l + 1
                )));
            }
        }
        Ok(MultiScaleFeatures { levels })
    }

    pub fn strides(&self) -> [usize; 4] {
        LEVEL_STRIDES
    }
}

/// Logits at input resolution plus the encoder token grid.
#[derive(Debug, Clone)]
pub struct ModelOutput<S> {
    pub logits: Array4<S>,
    pub tokens: Array4<S>,
}

/// Which learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    PatchEmbed,
    EncoderBlock(usize),
    EncoderNorm,
    Adapter,
    Decoder,
    Projector,
}

impl ParamGroup {
    pub fn of(name: &str) -> Result<Self> {
        let mut parts = name.split('.');
        let group = match (parts.next(), parts.next(), parts.next()) {
            (Some("encoder"), Some("patch_embed"), _) => ParamGroup::PatchEmbed,
            (Some("encoder"), Some("norm"), _) => ParamGroup::EncoderNorm,
            (Some("encoder"), Some("block"), Some(i)) => ParamGroup::EncoderBlock(
                i.parse()
                    .map_err(|_| Error::param(format!("bad block index in {name}")))?,
            ),
            (Some("adapter"), ..) => ParamGroup::Adapter,
            (Some("decoder"), ..) => ParamGroup::Decoder,
            (Some("projector"), ..) => ParamGroup::Projector,
            _ => return Err(Error::param(format!("parameter {name} has no learning-rate group"))),
        };
        Ok(group)
    }

    pub fn is_encoder(self) -> bool {
        matches!(
            self,
            ParamGroup::PatchEmbed | ParamGroup::EncoderBlock(_) | ParamGroup::EncoderNorm
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    orig: (usize, usize),
    padded: (usize, usize),
}

/// The full student (or teacher) network.
#[derive(Debug, Clone)]
pub struct ModelBundle<S: Real> {
    pub config: ModelConfig,
    pub encoder: Encoder<S>,
    pub adapter: Option<Adapter<S>>,
    pub decoder: PyramidDecoder<S>,
    pub projector: Projector<S>,
    geometry: Option<Geometry>,
    encode_geometry: Option<Geometry>,
}

impl<S: Real> ModelBundle<S> {
    /// Builds a model with weights drawn from the `seed` initialisation stream.
    /// An `external-pretrained` encoder is then overwritten from its archive.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, tag::MODEL_INIT);
        let d = config.encoder.embed_dim;
        let mut encoder = Encoder::new(&config.encoder, &mut rng)?;
        if config.encoder.kind == EncoderKind::ExternalPretrained {
            let path = config.encoder.weights.as_ref().expect("validated");
            TensorArchive::load(path)?.load_module("", &mut encoder)?;
        }
        let adapter = config
            .adapter
            .enabled
            .then(|| Adapter::new(&config.adapter, d, config.encoder.patch_size, &mut rng))
            .transpose()?;
        let decoder = PyramidDecoder::new(&config.decoder, d, config.num_classes, &mut rng)?;
        let projector = Projector::new(&config.projector, d, &mut rng)?;
        Ok(ModelBundle {
            config: config.clone(),
            encoder,
            adapter,
            decoder,
            projector,
            geometry: None,
            encode_geometry: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn patch_size(&self) -> usize {
        self.config.encoder.patch_size
    }

    /// Smallest input side the network accepts.
    pub fn min_input(&self) -> usize {
        self.patch_size()
    }

    fn pad(&self, x: ArrayView4<'_, S>) -> Result<(Array4<S>, Geometry)> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::shape(format!("expected 3-channel images, got {c}")));
        }
        let p = self.patch_size();
        let (ph, pw) = (h.next_multiple_of(p), w.next_multiple_of(p));
        if (ph, pw) != (h, w) {
            if !self.config.encoder.pad_input {
                return Err(Error::shape(format!(
                    "input {h}x{w} is not divisible by patch size {p} and padding is disabled"
                )));
            }
            if ph - h >= h || pw - w >= w {
                return Err(Error::shape(format!("input {h}x{w} is too small to pad to {ph}x{pw}")));
            }
        }
        let geometry = Geometry {
            orig: (h, w),
            padded: (ph, pw),
        };
        Ok((reflect_pad(x, ph - h, pw - w), geometry))
    }

    fn token_levels(tokens: ArrayView4<'_, S>, h: usize, w: usize) -> Result<MultiScaleFeatures<S>> {
        let levels = Adapter::<S>::level_sizes(h, w)
            .iter()
            .map(|&(lh, lw)| resize_bilinear(tokens, lh, lw))
            .collect();
        MultiScaleFeatures::new(levels)
    }

    /// Token grid only, evaluation mode.
    pub fn encode(&self, x: ArrayView4<'_, S>) -> Result<Array4<S>> {
        let (x, _) = self.pad(x)?;
        self.encoder.infer(x.view())
    }

    /// Multi-scale features, evaluation mode.
    pub fn features(&self, x: ArrayView4<'_, S>) -> Result<MultiScaleFeatures<S>> {
        let (x, g) = self.pad(x)?;
        let tokens = self.encoder.infer(x.view())?;
        match &self.adapter {
            Some(a) => a.infer(tokens.view(), x.view()),
            None => Self::token_levels(tokens.view(), g.padded.0, g.padded.1),
        }
    }

    /// Evaluation-mode forward pass; running statistics are used and nothing
    /// is cached.
    pub fn infer(&self, x: ArrayView4<'_, S>) -> Result<ModelOutput<S>> {
        let (x, g) = self.pad(x)?;
        let tokens = self.encoder.infer(x.view())?;
        let features = match &self.adapter {
            Some(a) => a.infer(tokens.view(), x.view())?,
            None => Self::token_levels(tokens.view(), g.padded.0, g.padded.1)?,
        };
        let logits = self.decoder.infer(&features, g.padded.0, g.padded.1);
        Ok(ModelOutput {
            logits: crop(logits.view(), g.orig.0, g.orig.1),
            tokens,
        })
    }

    /// Training-mode forward pass; batch statistics are used and updated.
    pub fn forward(&mut self, x: ArrayView4<'_, S>) -> Result<ModelOutput<S>> {
        let (x, g) = self.pad(x)?;
        let tokens = self.encoder.forward(x.view())?;
        let features = match &mut self.adapter {
            Some(a) => a.forward(tokens.view(), x.view())?,
            None => Self::token_levels(tokens.view(), g.padded.0, g.padded.1)?,
        };
        let logits = self.decoder.forward(&features, g.padded.0, g.padded.1);
        self.geometry = Some(g);
        Ok(ModelOutput {
            logits: crop(logits.view(), g.orig.0, g.orig.1),
            tokens,
        })
    }

    /// Accumulates gradients from the logits and, optionally, from an extra
    /// loss on the token grid.
    pub fn backward(&mut self, dlogits: ArrayView4<'_, S>, dtokens: Option<ArrayView4<'_, S>>) {
        let g = self.geometry.take().expect("ModelBundle::backward without forward");
        let d = crop_backward(dlogits, g.padded.0, g.padded.1);
        let dlevels = self.decoder.backward(d.view());
        let (hp, wp) = (g.padded.0 / self.patch_size(), g.padded.1 / self.patch_size());
        let mut dtok = match &mut self.adapter {
            Some(a) => a.backward(&dlevels),
            None => dlevels
                .iter()
                .map(|dl| resize_bilinear_backward(dl.view(), hp, wp))
                .reduce(|a, b| a + b)
                .expect("four levels"),
        };
        if let Some(extra) = dtokens {
            dtok += &extra;
        }
        self.encoder.backward(dtok.view());
    }

    /// Training-mode encoder pass on its own, for feature losses.
    pub fn encode_forward(&mut self, x: ArrayView4<'_, S>) -> Result<Array4<S>> {
        let (x, g) = self.pad(x)?;
        self.encode_geometry = Some(g);
        self.encoder.forward(x.view())
    }

    pub fn encode_backward(&mut self, dtokens: ArrayView4<'_, S>) {
        self.encode_geometry
            .take()
            .expect("encode_backward without encode_forward");
        self.encoder.backward(dtokens);
    }

    /// Writes config and every tensor to one archive.
    pub fn to_archive(&self, prefix: &str) -> Result<TensorArchive> {
        let mut archive = TensorArchive::new();
        archive
            .metadata
            .insert(format!("{prefix}model_config"), serde_json::to_string(&self.config)?);
        archive.metadata.insert("dtype".into(), S::DTYPE.into());
        archive.insert_module(prefix, self);
        Ok(archive)
    }

    /// Rebuilds a model from [`ModelBundle::to_archive`] output.
    pub fn from_archive(archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let key = format!("{prefix}model_config");
        let json = archive
            .metadata
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("archive lacks {key}")))?;
        let mut config: ModelConfig = serde_json::from_str(json)?;
        // The archive already holds the encoder weights.
        config.encoder.kind = EncoderKind::ToyTransformer;
        let mut model = ModelBundle::new(&config, 0)?;
        model.config = serde_json::from_str(json)?;
        archive.load_module(prefix, &mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive("")?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?, "")
    }

    /// Whether training-mode passes update batch-norm running statistics.
    pub fn set_stat_tracking(&mut self, on: bool) {
        let adapter = self.adapter.iter_mut().flat_map(|a| a.prior.iter_mut());
        let decoder = std::iter::once(&mut self.decoder.stem).chain(self.decoder.stages.iter_mut());
        for layer in adapter.chain(decoder) {
            layer.bn.track_running_stats = on;
        }
    }

    /// Copies all tensor values (parameters and buffers) from `other`.
    pub fn copy_from(&mut self, other: &ModelBundle<S>) -> Result<()> {
        let mut src = Vec::new();
        other.visit(&mut |t| src.push((t.name.to_string(), t.value.to_vec())));
        let mut i = 0;
        let mut err = None;
        self.visit_mut(&mut |t| {
            match src.get(i) {
                Some((name, v)) if name == t.name && v.len() == t.value.len() => t.value.copy_from_slice(v),
                _ => {
                    err.get_or_insert_with(|| Error::Structure(format!("tensor {} does not match", t.name)));
                }
            }
            i += 1;
        });
        if i != src.len() {
            err.get_or_insert_with(|| Error::Structure("models have different tensor counts".into()));
        }
        err.map_or(Ok(()), Err)
    }
}

impl<S: Real> Parameters<S> for ModelBundle<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a, S>)) {
        self.encoder.visit(f);
        self.adapter.visit(f);
        self.decoder.visit(f);
        self.projector.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_, S>)) {
        self.encoder.visit_mut(f);
        self.adapter.visit_mut(f);
        self.decoder.visit_mut(f);
        self.projector.visit_mut(f);
    }
}

#[cfg(test)]
mod tests;
