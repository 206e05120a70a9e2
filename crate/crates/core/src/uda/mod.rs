//! Self-training domain adaptation: EMA teacher, pseudo-labels, cross-domain
//! mixing, masked consistency, feature distance and the optimiser schedule.

mod ema;
mod fd;
mod mix;
mod optim;
mod pseudo;
mod schedule;
mod trainer;

pub use ema::{ema_update, TeacherState};
pub use fd::{feature_distance_loss, ReferenceExtractor};
pub use mix::{dacs_mix, mask_image, MixResult};
pub use optim::{clip_grad_norm, AdamW};
pub use pseudo::{confident_fraction, generate_pseudo_labels, PseudoLabelBatch};
pub use schedule::{lr_at, LrPolicy, ScheduleConfig};
pub use trainer::{StepRecord, TrainData, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Labelled source plus unlabelled target.
    Uda,
    /// Labelled source only.
    SourceOnly,
    /// Labelled target only; the supervised upper bound.
    Oracle,
}

/// Switches for each adaptation component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Off: the teacher is replaced by a copy of the student every step.
    pub ema: bool,
    /// Off: pseudo-labelled pixels get weight 1 instead of `q`.
    pub pseudo_weight: bool,
    /// Off: adapter, decoder and projector train at the encoder base rate.
    pub lr_multiplier: bool,
    pub dacs: bool,
    pub rcs: bool,
    pub mic: bool,
    pub fd_loss: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            ema: true,
            pseudo_weight: true,
            lr_multiplier: true,
            dacs: true,
            rcs: true,
            mic: true,
            fd_loss: true,
        }
    }
}

impl Toggles {
    pub const NAMES: [&'static str; 7] = ["ema", "pseudo_weight", "lr_multiplier", "dacs", "rcs", "mic", "fd_loss"];

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "ema" => &mut self.ema,
            "pseudo_weight" => &mut self.pseudo_weight,
            "lr_multiplier" => &mut self.lr_multiplier,
            "dacs" => &mut self.dacs,
            "rcs" => &mut self.rcs,
            "mic" => &mut self.mic,
            "fd_loss" => &mut self.fd_loss,
            _ => return Err(Error::config(format!("toggles.{name}"), "unknown toggle")),
        };
        *slot = on;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Constants {
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    /// Fraction of masked patches in the consistency stream.
    pub mask_ratio: f64,
    pub mask_patch: usize,
    /// EMA momentum.
    pub alpha: f64,
    /// Rare-class sampling temperature.
    pub rcs_temperature: f64,
    pub lambda_fd: f64,
    pub lambda_mask: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Constants {
            tau: 0.968,
            mask_ratio: 0.7,
            mask_patch: 8,
            alpha: 0.999,
            rcs_temperature: 0.01,
            lambda_fd: 0.5,
            lambda_mask: 1.0,
        }
    }
}

impl Constants {
    /// Toy-benchmark constants. A 0.999 teacher barely moves within a few
    /// thousand steps, so the EMA horizon is shortened to about 100 steps.
    pub fn toy() -> Self {
        Constants {
            alpha: 0.99,
            ..Self::default()
        }
    }
}

/// Feature-distance settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdConfig {
    /// Frozen reference encoder; its width must equal the projector output.
    pub reference: EncoderConfig,
    /// Initialisation seed of the reference, independent of the run seed so
    /// every run distils towards the same features.
    pub reference_seed: u64,
    /// Weight of an additional smooth-L1 term (0 keeps the loss cosine-only).
    pub smooth_l1_weight: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            reference: EncoderConfig {
                embed_dim: 128,
                depth: 2,
                ..EncoderConfig::default()
            },
            reference_seed: 0,
            smooth_l1_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub toggles: Toggles,
    pub constants: Constants,
    pub schedule: ScheduleConfig,
    pub crop_size: usize,
    /// Random horizontal flips of training crops.
    pub flip_augment: bool,
    /// Average teacher predictions over the image and its mirror.
    pub flip_pseudo_labels: bool,
    /// Mask the mixed image instead of the raw target image.
    pub mic_on_mixed: bool,
    pub fd: FdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Uda,
            toggles: Toggles::default(),
            constants: Constants::toy(),
            schedule: ScheduleConfig::toy(),
            crop_size: 64,
            flip_augment: true,
            flip_pseudo_labels: true,
            mic_on_mixed: false,
            fd: FdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.schedule.validate()?;
        let c = &self.constants;
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if !(c.tau > 0.0 && c.tau < 1.0) {
            return bad("constants.tau", format!("must be in (0, 1), got {}", c.tau));
        }
        if !(0.0..=1.0).contains(&c.mask_ratio) {
            return bad(
                "constants.mask_ratio",
                format!("must be in [0, 1], got {}", c.mask_ratio),
            );
        }
        if c.mask_patch == 0 {
            return bad("constants.mask_patch", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&c.alpha) {
            return bad("constants.alpha", format!("must be in [0, 1], got {}", c.alpha));
        }
        if !(c.rcs_temperature > 0.0) {
            return bad("constants.rcs_temperature", "must be positive".into());
        }
        if !(c.lambda_fd >= 0.0 && c.lambda_mask >= 0.0) {
            return bad("constants.lambda_fd", "loss weights must be non-negative".into());
        }
        if self.crop_size < model.encoder.patch_size {
            return bad(
                "crop_size",
                format!("must be at least the patch size {}", model.encoder.patch_size),
            );
        }
        if self.uses_fd() {
            let r = &self.fd.reference;
            r.validate().map_err(|e| Error::config("fd.reference", e.to_string()))?;
            if r.embed_dim != model.projector.teacher_dim {
                return bad(
                    "fd.reference.embed_dim",
                    format!(
                        "must equal model.projector.teacher_dim ({})",
                        model.projector.teacher_dim
                    ),
                );
            }
            if r.patch_size != model.encoder.patch_size {
                return bad("fd.reference.patch_size", "must equal the student patch size".into());
            }
        }
        Ok(())
    }

    pub fn uses_fd(&self) -> bool {
        self.mode == TrainMode::Uda && self.toggles.fd_loss
    }

    pub fn uses_teacher(&self) -> bool {
        self.mode == TrainMode::Uda && (self.toggles.dacs || self.toggles.mic)
    }

    pub fn uses_rcs(&self) -> bool {
        self.mode != TrainMode::Oracle && self.toggles.rcs
    }
}

/// Loss components of one step; disabled components are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    /// Supervised cross-entropy (on target labels in oracle mode).
    pub ce_source: Option<f64>,
    pub ce_mixed: Option<f64>,
    pub ce_masked: Option<f64>,
    pub fd_source: Option<f64>,
    pub fd_target: Option<f64>,
    pub total: f64,
    /// Mean pseudo-label weight over the target batch.
    pub q_mean: Option<f64>,
}

impl LossReport {
    /// `ce_source + ce_mixed + lambda_mask * ce_masked + lambda_fd * (fd_source + fd_target)`
    /// over the present components.
    pub fn weighted_total(&self, c: &Constants) -> f64 {
        let v = |x: Option<f64>| x.unwrap_or(0.0);
        v(self.ce_source)
            + v(self.ce_mixed)
            + c.lambda_mask * v(self.ce_masked)
            + c.lambda_fd * (v(self.fd_source) + v(self.fd_target))
    }
}
