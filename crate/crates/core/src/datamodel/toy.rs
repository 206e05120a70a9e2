//! Procedural two-domain segmentation benchmark.
//!
//! Scenes are a ground plane under a sky with up to four object classes
//! painted on top (discs, blocks, poles and wedges), each with its own colour
//! and texture. The target domain shares the scene statistics and label
//! semantics but passes every image through a systematic appearance shift:
//! a hue rotation with contrast loss, stronger sensor noise and a random
//! illumination ramp. The shift magnitude scales all of these together, so a
//! magnitude of zero makes both domains identically distributed.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_manifest, ClassSpace, DatasetManifest, Domain, SegmentationSample};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{stream_rng, tag};

pub const TOY_CLASS_NAMES: [&str; 6] = ["ground", "sky", "disc", "block", "pole", "wedge"];

const GROUND: u8 = 0;
const SKY: u8 = 1;
const DISC: u8 = 2;
const BLOCK: u8 = 3;
const POLE: u8 = 4;
const WEDGE: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub source_count: usize,
    pub target_train_count: usize,
    pub target_val_count: usize,
    /// Size of an extra labelled split with a different appearance shift,
    /// used for out-of-target evaluation. Zero disables it.
    pub out_of_target_count: usize,
    pub shift: ShiftConfig,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            height: 96,
            width: 96,
            num_classes: 6,
            source_count: 400,
            target_train_count: 400,
            target_val_count: 100,
            out_of_target_count: 0,
            shift: ShiftConfig::default(),
            seed: 0,
        }
    }
}

/// Appearance shift applied to target images. Every term is multiplied by
/// `magnitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub magnitude: f64,
    /// Hue rotation about the grey axis, degrees.
    pub hue_degrees: f64,
    /// Fractional contrast loss around mid-grey.
    pub contrast_loss: f64,
    /// Additional Gaussian noise standard deviation.
    pub extra_noise: f64,
    /// Peak-to-peak strength of the multiplicative illumination ramp.
    pub illumination: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            magnitude: 1.0,
            hue_degrees: 45.0,
            contrast_loss: 0.35,
            extra_noise: 0.05,
            illumination: 0.5,
        }
    }
}

impl ShiftConfig {
    /// The shift used for the out-of-target split: opposite hue direction,
    /// milder contrast change, heavier noise.
    fn out_of_target(&self) -> Self {
        ShiftConfig {
            magnitude: self.magnitude,
            hue_degrees: -0.8 * self.hue_degrees,
            contrast_loss: -0.5 * self.contrast_loss,
            extra_noise: 1.5 * self.extra_noise,
            illumination: self.illumination,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::param("toy images must be at least 32x32"));
        }
        if !(2..=TOY_CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::param(format!(
                "toy benchmark supports 2..={} classes, got {}",
                TOY_CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.source_count == 0 || self.target_train_count == 0 || self.target_val_count == 0 {
            return Err(Error::param("toy split sizes must be positive"));
        }
        let s = &self.shift;
        if !(s.magnitude >= 0.0) || !s.magnitude.is_finite() {
            return Err(Error::param("shift magnitude must be a finite non-negative number"));
        }
        if s.extra_noise < 0.0 || s.illumination < 0.0 || s.contrast_loss >= 1.0 {
            return Err(Error::param("invalid shift parameters"));
        }
        Ok(())
    }

    pub fn class_space(&self) -> ClassSpace {
        ClassSpace::from_names(TOY_CLASS_NAMES[..self.num_classes].iter().copied()).expect("toy class names are valid")
    }
}

/// Every split of a generated benchmark.
#[derive(Debug, Clone)]
pub struct ToyBenchmark {
    pub config: ToyConfig,
    pub class_space: ClassSpace,
    pub source: DatasetManifest,
    /// Unlabelled target training images.
    pub target_train: DatasetManifest,
    /// Labelled target images held out for evaluation.
    pub target_val: DatasetManifest,
    /// `target_train` with its labels, for the fully supervised upper bound.
    pub target_oracle: DatasetManifest,
    pub out_of_target: Option<DatasetManifest>,
}

impl ToyBenchmark {
    /// Writes every split under `root` in the manifest layout.
    pub fn write_to(&self, root: &Path) -> Result<()> {
        write_manifest(&root.join("source"), &self.source)?;
        write_manifest(&root.join("target_train"), &self.target_train)?;
        write_manifest(&root.join("target_val"), &self.target_val)?;
        write_manifest(&root.join("target_oracle"), &self.target_oracle)?;
        if let Some(o) = &self.out_of_target {
            write_manifest(&root.join("out_of_target"), o)?;
        }
        let path = root.join("toy_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&path, e))
    }
}

/// Generates the source, target-train and target-val splits (plus the
/// labelled oracle view and optional out-of-target split).
pub fn generate_toy_domains(config: &ToyConfig) -> Result<ToyBenchmark> {
    config.validate()?;
    let class_space = config.class_space();
    let none = ShiftConfig {
        magnitude: 0.0,
        ..config.shift.clone()
    };
    let split = |count: usize, stream: u64, shift: &ShiftConfig, domain: Domain, prefix: &str| {
        let samples = par::map_range(count, |i| {
            let mut rng = stream_rng(config.seed, stream | i as u64);
            let (image, label) = render_scene(config, shift, &mut rng);
            SegmentationSample::new(format!("{prefix}_{i:05}"), image, Some(label), domain)
                .expect("renderer keeps image and label sizes aligned")
        });
        DatasetManifest::from_samples(domain, class_space.clone(), samples)
    };
    let source = split(config.source_count, tag::TOY_SOURCE, &none, Domain::Source, "src")?;
    let target_oracle = split(
        config.target_train_count,
        tag::TOY_TARGET_TRAIN,
        &config.shift,
        Domain::Target,
        "tgt",
    )?;
    let target_val = split(
        config.target_val_count,
        tag::TOY_TARGET_VAL,
        &config.shift,
        Domain::Target,
        "val",
    )?;
    let out_of_target = (config.out_of_target_count > 0)
        .then(|| {
            split(
                config.out_of_target_count,
                tag::TOY_OUT_OF_TARGET,
                &config.shift.out_of_target(),
                Domain::Target,
                "oot",
            )
        })
        .transpose()?;
    Ok(ToyBenchmark {
        config: config.clone(),
        class_space,
        source,
        target_train: target_oracle.without_labels(),
        target_val,
        target_oracle,
        out_of_target,
    })
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Array3<f64>,
    label: Array2<u8>,
    classes: usize,
}

impl Canvas {
    fn paint(&mut self, class: u8, inside: impl Fn(f64, f64) -> bool, shade: impl Fn(usize, usize) -> [f64; 3]) {
        if class as usize >= self.classes {
            return;
        }
        for y in 0..self.h {
            for x in 0..self.w {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    let c = shade(y, x);
                    for (k, v) in c.into_iter().enumerate() {
                        self.rgb[[k, y, x]] = v;
                    }
                    self.label[[y, x]] = class;
                }
            }
        }
    }
}

fn jitter<R: Rng>(rng: &mut R, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|v| v + rng.random_range(-amount..amount))
}

fn add(c: [f64; 3], d: f64) -> [f64; 3] {
    c.map(|v| v + d)
}

fn render_scene(config: &ToyConfig, shift: &ShiftConfig, rng: &mut ChaCha8Rng) -> (Array3<f32>, Array2<u8>) {
    let (h, w) = (config.height, config.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut canvas = Canvas {
        h,
        w,
        rgb: Array3::zeros((3, h, w)),
        label: Array2::zeros((h, w)),
        classes: config.num_classes,
    };

    // Background: sky above a slightly tilted horizon, textured ground below.
    let horizon = rng.random_range(0.3..0.55) * hf;
    let tilt = rng.random_range(-0.15..0.15);
    let sky = jitter(rng, [0.45, 0.62, 0.9], 0.05);
    let ground = jitter(rng, [0.46, 0.36, 0.24], 0.05);
    let speckle: Vec<f64> = (0..h * w).map(|_| rng.random_range(-0.07..0.07)).collect();
    let line = move |x: f64| horizon + tilt * (x - wf / 2.0);
    for y in 0..h {
        for x in 0..w {
            let above = (y as f64 + 0.5) < line(x as f64 + 0.5);
            let (class, c) = if above && config.num_classes > SKY as usize {
                let t = (y as f64 / horizon.max(1.0)).min(1.0);
                (SKY, add(sky, 0.12 * t))
            } else {
                (GROUND, add(ground, speckle[y * w + x]))
            };
            for k in 0..3 {
                canvas.rgb[[k, y, x]] = c[k];
            }
            canvas.label[[y, x]] = class;
        }
    }

    let count = |rng: &mut ChaCha8Rng, p_any: f64, max: usize| {
        if rng.random_bool(p_any) {
            rng.random_range(1..=max)
        } else {
            0
        }
    };

    // Blocks stand on the ground plane, striped horizontally.
    for _ in 0..count(rng, 0.7, 2) {
        let bw = rng.random_range(10.0..26.0);
        let bh = rng.random_range(8.0..20.0);
        let x0 = rng.random_range(0.0..wf - bw);
        let bottom = (line(x0 + bw / 2.0) + rng.random_range(4.0..30.0)).min(hf);
        let color = jitter(rng, [0.25, 0.68, 0.3], 0.07);
        canvas.paint(
            BLOCK,
            |y, x| x >= x0 && x < x0 + bw && y < bottom && y >= bottom - bh,
            |y, _| add(color, if (y / 2) % 2 == 0 { 0.08 } else { -0.08 }),
        );
    }

    // Discs anywhere, with radial shading.
    for _ in 0..count(rng, 0.75, 2) {
        let r = rng.random_range(5.0..12.0);
        let cy = rng.random_range(r..hf - r);
        let cx = rng.random_range(r..wf - r);
        let color = jitter(rng, [0.86, 0.22, 0.2], 0.07);
        canvas.paint(
            DISC,
            |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            |y, x| {
                let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt() / r;
                add(color, 0.1 * (1.0 - d))
            },
        );
    }

    // Wedges: upward triangles with a fine checker texture.
    for _ in 0..count(rng, 0.5, 1) {
        let base = rng.random_range(12.0..24.0);
        let th = rng.random_range(10.0..20.0);
        let x0 = rng.random_range(0.0..wf - base);
        let bottom = rng.random_range(th..hf);
        let color = jitter(rng, [0.6, 0.3, 0.74], 0.07);
        let apex = x0 + base / 2.0;
        canvas.paint(
            WEDGE,
            |y, x| {
                let t = (bottom - y) / th;
                (0.0..=1.0).contains(&t) && (x - apex).abs() <= (1.0 - t) * base / 2.0
            },
            |y, x| add(color, if (y / 2 + x / 2) % 2 == 0 { 0.1 } else { -0.1 }),
        );
    }

    // Poles: thin vertical bars rooted on the ground, painted last.
    for _ in 0..count(rng, 0.5, 2) {
        let pw = rng.random_range(2.0..4.5);
        let ph = rng.random_range(18.0..45.0);
        let x0 = rng.random_range(0.0..wf - pw);
        let bottom = (line(x0) + rng.random_range(2.0..25.0)).min(hf);
        let color = jitter(rng, [0.9, 0.84, 0.25], 0.07);
        canvas.paint(
            POLE,
            |y, x| x >= x0 && x < x0 + pw && y < bottom && y >= bottom - ph,
            |_, _| color,
        );
    }

    let image = apply_shift(canvas.rgb, shift, rng);
    (image, canvas.label)
}

/// Rotation about the grey axis by `deg` degrees (Rodrigues' formula).
fn hue_rotation(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let t = 1.0 - c;
    let a = c + t / 3.0;
    let b = t / 3.0 - s * k;
    let d = t / 3.0 + s * k;
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn apply_shift(mut rgb: Array3<f64>, shift: &ShiftConfig, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let (_, h, w) = rgb.dim();
    let m = shift.magnitude;
    let rot = hue_rotation(m * shift.hue_degrees);
    let contrast = 1.0 - m * shift.contrast_loss;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let ramp = m * shift.illumination;
    let noise = Normal::new(0.0, 0.02 + m * shift.extra_noise).expect("finite noise level");
    for y in 0..h {
        for x in 0..w {
            let px = [rgb[[0, y, x]], rgb[[1, y, x]], rgb[[2, y, x]]];
            let u = ((y as f64 + 0.5) / h as f64 - 0.5) * dy + ((x as f64 + 0.5) / w as f64 - 0.5) * dx;
            let light = 1.0 + ramp * u;
            for k in 0..3 {
                let rotated = rot[k][0] * px[0] + rot[k][1] * px[1] + rot[k][2] * px[2];
                let v = (0.5 + (rotated - 0.5) * contrast) * light + noise.sample(rng);
                rgb[[k, y, x]] = v;
            }
        }
    }
    // Quantise to 8-bit levels so images survive a PNG round trip unchanged.
    rgb.mapv(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8) as f32 / 255.0)
}
