use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamGroup;

/// Optimiser schedule. `Default` holds the full-scale values; [`ScheduleConfig::toy`]
/// the desk-scale ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr_decoder: f64,
    pub base_lr_encoder: f64,
    pub layerwise_decay: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr_decoder: 1.4e-4,
            base_lr_encoder: 1.4e-5,
            layerwise_decay: 0.9,
            warmup_iters: 1500,
            total_iters: 40_000,
            batch_size: 8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

impl ScheduleConfig {
    /// Desk-scale schedule for the toy benchmark: a randomly initialised
    /// encoder needs larger steps than a pretrained one.
    pub fn toy() -> Self {
        ScheduleConfig {
            base_lr_decoder: 1e-3,
            base_lr_encoder: 1e-4,
            warmup_iters: 150,
            total_iters: 4000,
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("schedule.{key}"), msg));
        if !(self.warmup_iters > 0 && self.warmup_iters < self.total_iters) {
            return bad("warmup_iters", "must satisfy 0 < warmup_iters < total_iters");
        }
        if !(self.layerwise_decay > 0.0 && self.layerwise_decay <= 1.0) {
            return bad("layerwise_decay", "must be in (0, 1]");
        }
        if !(self.base_lr_decoder >= 0.0 && self.base_lr_encoder >= 0.0) {
            return bad("base_lr_decoder", "learning rates must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        Ok(())
    }

    /// Warm-up or decay factor in [0, 1].
    pub fn factor(&self, step: usize) -> Result<f64> {
        if step > self.total_iters {
            return Err(Error::param(format!(
                "step {step} is past the end of the schedule ({})",
                self.total_iters
            )));
        }
        let (w, t) = (self.warmup_iters as f64, self.total_iters as f64);
        let s = step as f64;
        Ok(if step < self.warmup_iters {
            s / w
        } else {
            (t - s) / (t - w)
        })
    }
}

/// Learning rate of a parameter group at `step`, for an encoder of
/// `depth` blocks. Block `i` gets `base_lr_encoder * decay^(depth-1-i)`, the
/// patch embedding sits one level below block 0 and the final norm shares the
/// top block's rate. Adapter, decoder and projector use `base_lr_decoder`.
pub fn lr_at(schedule: &ScheduleConfig, step: usize, group: ParamGroup, depth: usize) -> Result<f64> {
    LrPolicy {
        schedule: schedule.clone(),
        depth,
        multiplier: true,
        frozen_encoder: false,
    }
    .lr(step, group)
}

/// [`lr_at`] plus the training toggles that change it.
#[derive(Debug, Clone, PartialEq)]
pub struct LrPolicy {
    pub schedule: ScheduleConfig,
    pub depth: usize,
    /// When false, the head groups fall back to the encoder base rate.
    pub multiplier: bool,
    pub frozen_encoder: bool,
}

impl LrPolicy {
    pub fn base(&self, group: ParamGroup) -> Result<f64> {
        let s = &self.schedule;
        let n = self.depth as i32;
        let enc = if self.frozen_encoder { 0.0 } else { s.base_lr_encoder };
        Ok(match group {
            ParamGroup::EncoderBlock(i) if i >= self.depth => {
                return Err(Error::param(format!("encoder block {i} out of range for depth {n}")));
            }
            ParamGroup::EncoderBlock(i) => enc * s.layerwise_decay.powi(n - 1 - i as i32),
            ParamGroup::PatchEmbed => enc * s.layerwise_decay.powi(n),
            ParamGroup::EncoderNorm => enc,
            ParamGroup::Adapter | ParamGroup::Decoder | ParamGroup::Projector => {
                if self.multiplier {
                    s.base_lr_decoder
                } else {
                    s.base_lr_encoder
                }
            }
        })
    }

    pub fn lr(&self, step: usize, group: ParamGroup) -> Result<f64> {
        Ok(self.base(group)? * self.schedule.factor(step)?)
    }
}
