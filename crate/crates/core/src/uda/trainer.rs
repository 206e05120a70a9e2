use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    dacs_mix, feature_distance_loss, generate_pseudo_labels, mask_image, AdamW, LossReport, LrPolicy,
    ReferenceExtractor, TeacherState, TrainConfig, TrainMode,
};
use crate::datamodel::{
    build_rare_class_index, compute_class_frequencies, sample_source, DatasetManifest, RareClassIndex,
};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig, ParamGroup, TensorArchive};
use crate::nn::loss::weighted_cross_entropy;
use crate::nn::{Parameters, Real};
use crate::rng::{stream_rng, tag};
use crate::uda::clip_grad_norm;

/// Training data arranged for one mode.
#[derive(Debug, Clone)]
pub struct TrainData {
    /// Labelled images: the source domain, or the target domain in oracle mode.
    pub labelled: DatasetManifest,
    /// Unlabelled target images (adaptation mode only).
    pub unlabelled: Option<DatasetManifest>,
    pub rcs: Option<RareClassIndex>,
}

impl TrainData {
    /// `source` must be labelled; `target` must be labelled in oracle mode.
    /// Source-only training ignores `target`.
    pub fn for_mode(
        config: &TrainConfig,
        source: Option<&DatasetManifest>,
        target: Option<&DatasetManifest>,
    ) -> Result<Self> {
        let need = |m: Option<&DatasetManifest>, what: &str| {
            m.cloned()
                .ok_or_else(|| Error::config("data", format!("{what} data is required in {:?} mode", config.mode)))
        };
        let (labelled, unlabelled) = match config.mode {
            TrainMode::Uda => (need(source, "source")?, Some(need(target, "target")?.without_labels())),
            TrainMode::SourceOnly => (need(source, "source")?, None),
            TrainMode::Oracle => (need(target, "labelled target")?, None),
        };
        if labelled.is_empty() {
            return Err(Error::data("labelled", "training manifest is empty"));
        }
        if let Some(s) = labelled.samples.iter().find(|s| s.label.is_none()) {
            return Err(Error::data(&s.id, "training sample has no label"));
        }
        if unlabelled.as_ref().is_some_and(|u| u.is_empty()) {
            return Err(Error::data("target", "target manifest is empty"));
        }
        let rcs = if config.uses_rcs() {
            let freqs = compute_class_frequencies(&labelled)?;
            Some(build_rare_class_index(
                &freqs,
                &labelled,
                config.constants.rcs_temperature,
            )?)
        } else {
            None
        };
        Ok(TrainData {
            labelled,
            unlabelled,
            rcs,
        })
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr_decoder: f64,
    pub lr_encoder_top: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

struct Batch<S> {
    images: Array4<S>,
    labels: Option<Array3<u8>>,
}

fn crop_sample<S: Real>(
    manifest: &DatasetManifest,
    index: usize,
    crop: usize,
    flip: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<S>, Option<Array2<u8>>)> {
    let sample = &manifest.samples[index];
    let (h, w) = (sample.height(), sample.width());
    if h < crop || w < crop {
        return Err(Error::data(
            &sample.id,
            format!("{h}x{w} image is smaller than the {crop} crop"),
        ));
    }
    let y = rng.random_range(0..=h - crop);
    let x = rng.random_range(0..=w - crop);
    let mirror = flip && rng.random_bool(0.5);
    let view = |a: ArrayView3<'_, f32>| {
        let c = a.slice(s![.., y..y + crop, x..x + crop]);
        if mirror {
            c.slice(s![.., .., ..;-1]).mapv(|v| S::lit(v as f64))
        } else {
            c.mapv(|v| S::lit(v as f64))
        }
    };
    let image = view(sample.image.view());
    let label = sample.label.as_ref().map(|l| {
        let c = l.slice(s![y..y + crop, x..x + crop]);
        if mirror {
            c.slice(s![.., ..;-1]).to_owned()
        } else {
            c.to_owned()
        }
    });
    Ok((image, label))
}

fn assemble<S: Real>(parts: Vec<(Array3<S>, Option<Array2<u8>>)>) -> Batch<S> {
    let images: Vec<_> = parts.iter().map(|p| p.0.view()).collect();
    let images = ndarray::stack(Axis(0), &images).expect("equal crops");
    let labels = parts
        .iter()
        .map(|p| p.1.as_ref().map(|l| l.view()))
        .collect::<Option<Vec<_>>>()
        .map(|ls| ndarray::stack(Axis(0), &ls).expect("equal crops"));
    Batch { images, labels }
}

fn finite<S: Real>(v: S, component: &'static str, step: usize) -> Result<f64> {
    let v = v.as_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { component, step })
    }
}

fn scale<S: Real, D: ndarray::Dimension>(mut a: ndarray::Array<S, D>, by: f64) -> ndarray::Array<S, D> {
    let k = S::lit(by);
    a.mapv_inplace(|v| v * k);
    a
}

/// Student, teacher, optimiser and reference extractor of one run.
#[derive(Debug, Clone)]
pub struct Trainer<S: Real> {
    pub config: TrainConfig,
    pub seed: u64,
    /// Number of completed steps.
    pub step: usize,
    pub student: ModelBundle<S>,
    pub teacher: Option<TeacherState<S>>,
    pub optimizer: AdamW<S>,
    pub reference: Option<ReferenceExtractor<S>>,
    pub policy: LrPolicy,
}

impl<S: Real> Trainer<S> {
    pub fn new(model: &ModelConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate(model)?;
        let student = ModelBundle::new(model, seed)?;
        let teacher = config
            .uses_teacher()
            .then(|| TeacherState::from_student(&student, config.constants.alpha))
            .transpose()?;
        let reference = config
            .uses_fd()
            .then(|| ReferenceExtractor::new(&config.fd.reference, config.fd.reference_seed))
            .transpose()?;
        let policy = LrPolicy {
            schedule: config.schedule.clone(),
            depth: model.encoder.depth,
            multiplier: config.toggles.lr_multiplier,
            frozen_encoder: model.encoder.frozen,
        };
        Ok(Trainer {
            optimizer: AdamW::new(config.schedule.weight_decay),
            config,
            seed,
            step: 0,
            student,
            teacher,
            reference,
            policy,
        })
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.schedule.total_iters
    }

    fn sample_labelled(&self, data: &TrainData, rng: &mut ChaCha8Rng) -> Result<Batch<S>> {
        let n = data.labelled.len();
        let parts = (0..self.config.schedule.batch_size)
            .map(|_| {
                let i = match &data.rcs {
                    Some(index) => sample_source(index, rng),
                    None => rng.random_range(0..n),
                };
                crop_sample(&data.labelled, i, self.config.crop_size, self.config.flip_augment, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(assemble(parts))
    }

    fn sample_unlabelled(&self, manifest: &DatasetManifest, rng: &mut ChaCha8Rng) -> Result<Batch<S>> {
        let parts = (0..self.config.schedule.batch_size)
            .map(|_| {
                let i = rng.random_range(0..manifest.len());
                crop_sample(manifest, i, self.config.crop_size, self.config.flip_augment, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(assemble(parts))
    }

    /// Projector and feature-distance gradient for a token grid; returns the
    /// loss and the (weighted) gradient with respect to the tokens.
    fn fd_stream(&mut self, tokens: &Array4<S>, images: &Array4<S>) -> Result<(S, Array4<S>)> {
        let reference = self.reference.as_ref().expect("fd enabled").features(images.view())?;
        let proj = self.student.projector.forward(tokens.view())?;
        let (loss, dproj) = feature_distance_loss(proj.view(), reference.view(), self.config.fd.smooth_l1_weight)?;
        let dtok = self
            .student
            .projector
            .backward(scale(dproj, self.config.constants.lambda_fd).view());
        Ok((loss, dtok))
    }

    /// Runs one optimisation step.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepRecord> {
        let step = self.step;
        if self.finished() {
            return Err(Error::param(format!("schedule already completed {step} steps")));
        }
        let cfg = self.config.clone();
        let c = &cfg.constants;
        let ignore = data.labelled.class_space.ignore_index();
        let mut rng = stream_rng(self.seed, tag::TRAIN_STEP | step as u64);
        let mut report = LossReport::default();
        self.student.zero_grad();

        // (1) supervised stream, with feature distance on the same tokens
        let src = self.sample_labelled(data, &mut rng)?;
        let src_labels = src.labels.as_ref().expect("labelled batch");
        let out = self.student.forward(src.images.view())?;
        let ones = Array3::from_elem(src_labels.raw_dim(), S::one());
        let (ce, dlogits) = weighted_cross_entropy(out.logits.view(), src_labels.view(), ones.view(), ignore);
        report.ce_source = Some(finite(ce, "ce_source", step)?);
        let dtokens = if cfg.uses_fd() {
            let (fd, dtok) = self.fd_stream(&out.tokens, &src.images)?;
            report.fd_source = Some(finite(fd, "fd_source", step)?);
            Some(dtok)
        } else {
            None
        };
        self.student
            .backward(dlogits.view(), dtokens.as_ref().map(|d| d.view()));

        if cfg.mode == TrainMode::Uda {
            let target = data.unlabelled.as_ref().expect("adaptation data has a target split");
            let tgt = self.sample_unlabelled(target, &mut rng)?;

            // (2) teacher pseudo-labels
            let pseudo = match &self.teacher {
                Some(t) => {
                    let mut p = generate_pseudo_labels(&t.model, tgt.images.view(), c.tau, cfg.flip_pseudo_labels)?;
                    report.q_mean = Some(p.q_mean());
                    if !cfg.toggles.pseudo_weight {
                        p.q.iter_mut().for_each(|q| *q = 1.0);
                    }
                    Some(p)
                }
                None => None,
            };

            // (3) cross-domain mixing
            let mut mixed: Option<(Array4<S>, Array3<u8>, Array3<S>)> = None;
            if cfg.toggles.dacs {
                let pl = pseudo.as_ref().expect("teacher active");
                let b = tgt.images.dim().0;
                let mut images = tgt.images.clone();
                let mut labels = Array3::zeros(pl.labels.raw_dim());
                let mut weights = Array3::zeros(pl.labels.raw_dim());
                for i in 0..b {
                    let m = dacs_mix(
                        src.images.index_axis(Axis(0), i),
                        src_labels.index_axis(Axis(0), i),
                        tgt.images.index_axis(Axis(0), i),
                        pl.labels.index_axis(Axis(0), i),
                        S::lit(pl.q[i]),
                        ignore,
                        &mut rng,
                    )?;
                    images.index_axis_mut(Axis(0), i).assign(&m.image);
                    labels.index_axis_mut(Axis(0), i).assign(&m.label);
                    weights.index_axis_mut(Axis(0), i).assign(&m.weight);
                }
                let out = self.student.forward(images.view())?;
                let (ce, dlogits) = weighted_cross_entropy(out.logits.view(), labels.view(), weights.view(), ignore);
                report.ce_mixed = Some(finite(ce, "ce_mixed", step)?);
                self.student.backward(dlogits.view(), None);
                mixed = Some((images, labels, weights));
            }

            // (4) masked consistency
            if cfg.toggles.mic {
                let pl = pseudo.as_ref().expect("teacher active");
                let (base, labels, weights) = match (&mixed, cfg.mic_on_mixed) {
                    (Some((img, lab, wt)), true) => (img.clone(), lab.clone(), wt.clone()),
                    _ => {
                        let mut w = Array3::zeros(pl.labels.raw_dim());
                        for i in 0..pl.q.len() {
                            w.index_axis_mut(Axis(0), i).assign(&pl.weight_map(i));
                        }
                        (tgt.images.clone(), pl.labels.clone(), w)
                    }
                };
                let mut masked = base;
                for mut img in masked.outer_iter_mut() {
                    let (m, _) = mask_image(img.view(), c.mask_patch, c.mask_ratio, &mut rng)?;
                    img.assign(&m);
                }
                // masked images would drag the running statistics far from natural ones
                self.student.set_stat_tracking(false);
                let out = self.student.forward(masked.view());
                self.student.set_stat_tracking(true);
                let out = out?;
                let (ce, dlogits) = weighted_cross_entropy(out.logits.view(), labels.view(), weights.view(), ignore);
                report.ce_masked = Some(finite(ce, "ce_masked", step)?);
                self.student.backward(scale(dlogits, c.lambda_mask).view(), None);
            }

            // (5) feature distance on target tokens
            if cfg.uses_fd() {
                let tokens = self.student.encode_forward(tgt.images.view())?;
                let (fd, dtok) = self.fd_stream(&tokens, &tgt.images)?;
                report.fd_target = Some(finite(fd, "fd_target", step)?);
                self.student.encode_backward(dtok.view());
            }
        }
        report.total = report.weighted_total(c);

        // (6) clipped AdamW update with per-group rates
        let norm = clip_grad_norm(&mut self.student, cfg.schedule.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                component: "gradient",
                step,
            });
        }
        let policy = &self.policy;
        self.optimizer
            .step(&mut self.student, &mut |name| policy.lr(step, ParamGroup::of(name)?))?;

        // (7) teacher update
        if let Some(t) = &mut self.teacher {
            if cfg.toggles.ema {
                t.update(&self.student)?;
            } else {
                super::ema_update(&mut t.model, &self.student, 0.0)?;
            }
        }
        self.step += 1;
        Ok(StepRecord {
            step,
            lr_decoder: policy.lr(step, ParamGroup::Decoder)?,
            lr_encoder_top: policy.lr(step, ParamGroup::EncoderBlock(policy.depth - 1))?,
            losses: report,
        })
    }

    /// Student, teacher, optimiser state and step counter in one archive.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = self.student.to_archive("student.")?;
        if let Some(t) = &self.teacher {
            archive.insert_module("teacher.", &t.model);
        }
        self.optimizer.save_into(&mut archive, &self.student);
        let meta = &mut archive.metadata;
        meta.insert("trainer.step".into(), self.step.to_string());
        meta.insert("trainer.seed".into(), self.seed.to_string());
        meta.insert("trainer.config".into(), serde_json::to_string(&self.config)?);
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let meta = |k: &str| {
            archive
                .metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {k}")))
        };
        let parse = |k: &str| -> Result<u64> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
        };
        let config: TrainConfig = serde_json::from_str(meta("trainer.config")?)?;
        let student = ModelBundle::<S>::from_archive(archive, "student.")?;
        let mut trainer = Trainer::new(&student.config.clone(), config, parse("trainer.seed")?)?;
        trainer.student = student;
        if let Some(t) = &mut trainer.teacher {
            t.model = trainer.student.clone();
            archive.load_module("teacher.", &mut t.model)?;
        }
        trainer.optimizer.load_from(archive, &trainer.student)?;
        trainer.step = parse("trainer.step")? as usize;
        Ok(trainer)
    }
}
