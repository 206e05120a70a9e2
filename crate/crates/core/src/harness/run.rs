use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ResolvedConfig};
use crate::datamodel::{generate_toy_domains, load_manifest, ClassSpace, DatasetManifest, Domain};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{ModelBundle, TensorArchive};
use crate::uda::{StepRecord, TrainData, TrainMode, Trainer};

/// Datasets of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub class_space: ClassSpace,
    pub source: Option<DatasetManifest>,
    /// Target training split, with labels when available.
    pub target: Option<DatasetManifest>,
    pub target_val: DatasetManifest,
    pub out_of_target: Option<DatasetManifest>,
}

impl ExperimentData {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let d = &config.data;
        if !d.uses_directories() {
            let bench = generate_toy_domains(&d.toy)?;
            return Ok(ExperimentData {
                class_space: bench.class_space,
                source: Some(bench.source),
                target: Some(bench.target_oracle),
                target_val: bench.target_val,
                out_of_target: bench.out_of_target,
            });
        }
        let class_space = ClassSpace::new(d.class_names.clone(), d.ignore_index)
            .map_err(|e| Error::config("data.class_names", e.to_string()))?;
        let load =
            |p: &Option<PathBuf>, domain| p.as_deref().map(|p| load_manifest(p, domain, &class_space)).transpose();
        let target_val = load(&d.target_val, Domain::Target)?.expect("validated");
        if !target_val.has_labels() {
            return Err(Error::data("target_val", "evaluation split must be labelled"));
        }
        Ok(ExperimentData {
            source: load(&d.source, Domain::Source)?,
            target: load(&d.target, Domain::Target)?,
            out_of_target: load(&d.out_of_target, Domain::Target)?,
            target_val,
            class_space,
        })
    }

    pub fn train_data(&self, config: &ExperimentConfig) -> Result<TrainData> {
        TrainData::for_mode(&config.train_config(), self.source.as_ref(), self.target.as_ref())
    }
}

/// Headline numbers of a finished run; everything else lives in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: TrainMode,
    pub seed: u64,
    pub steps: usize,
    pub miou: f64,
    pub out_of_target_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub run_dir: PathBuf,
    pub summary: RunSummary,
    pub report: EvalReport,
    pub out_of_target: Option<EvalReport>,
}

pub const CONFIG_FILE: &str = "resolved_config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVALS_FILE: &str = "evals.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

/// Path of the resumable checkpoint written after `step` completed steps.
pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    checkpoint_dir(run_dir).join(format!("step_{step:06}.safetensors"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn append_line<T: Serialize>(file: &mut File, path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Keeps the leading lines whose `step` is below `keep_below` and reopens the
/// file for appending.
fn reopen_stream(path: &Path, keep_below: usize) -> Result<File> {
    let mut kept = String::new();
    if keep_below > 0 && path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let v: serde_json::Value = serde_json::from_str(&line)?;
            match v.get("step").and_then(|s| s.as_u64()) {
                Some(s) if (s as usize) < keep_below => {
                    kept.push_str(&line);
                    kept.push('\n');
                }
                _ => break,
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    step: usize,
    miou: f64,
    per_class: &'a [crate::eval::ClassIou],
}

fn write_report(run_dir: &Path, name: &str, report: &EvalReport) -> Result<()> {
    report.write_json(&run_dir.join(format!("report_{name}.json")))?;
    report.write_csv(&run_dir.join(format!("report_{name}.csv")))
}

fn finished_outcome(resolved: &ResolvedConfig, run_dir: &Path) -> Result<Option<TrainingOutcome>> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    let summary_path = run_dir.join(SUMMARY_FILE);
    if !cfg_path.is_file() || !summary_path.is_file() || !checkpoint_dir(run_dir).join(FINAL_CHECKPOINT).is_file() {
        return Ok(None);
    }
    let previous = super::config::resolve_config(Some(&cfg_path), &[])?;
    if previous.config != resolved.config {
        return Ok(None);
    }
    let summary: RunSummary = read_json(&summary_path)?;
    let report = read_json(&run_dir.join("report_target_val.json"))?;
    let oot = run_dir.join("report_out_of_target.json");
    let out_of_target = if oot.is_file() { Some(read_json(&oot)?) } else { None };
    Ok(Some(TrainingOutcome {
        run_dir: run_dir.to_path_buf(),
        summary,
        report,
        out_of_target,
    }))
}

/// Trains, checkpoints and evaluates one run in `config.output_dir`.
///
/// The run directory receives the resolved config, the per-step metrics
/// stream, periodic evaluation snapshots, checkpoints and the final
/// reports. With `resume`, training continues from that checkpoint and the
/// streams are truncated to the steps it had completed.
pub fn run_training(resolved: &ResolvedConfig, resume: Option<&Path>) -> Result<TrainingOutcome> {
    let cfg = &resolved.config;
    let run_dir = cfg.output_dir.clone();
    if cfg.run.reuse_completed && resume.is_none() {
        if let Some(done) = finished_outcome(resolved, &run_dir)? {
            info!("reusing finished run in {}", run_dir.display());
            return Ok(done);
        }
    }
    fs::create_dir_all(checkpoint_dir(&run_dir)).map_err(|e| Error::io(&run_dir, e))?;
    resolved.write(&run_dir.join(CONFIG_FILE))?;

    let data = ExperimentData::load(cfg)?;
    let train = data.train_data(cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::<f32>::from_archive(&TensorArchive::load(path)?)?;
            if t.config != cfg.train_config() || t.seed != cfg.seed || t.student.config != cfg.model {
                return Err(Error::config("resume", "checkpoint was written by a different config"));
            }
            info!("resuming from {} at step {}", path.display(), t.step);
            t
        }
        None => Trainer::<f32>::new(&cfg.model, cfg.train_config(), cfg.seed)?,
    };
    let metrics_path = run_dir.join(METRICS_FILE);
    let evals_path = run_dir.join(EVALS_FILE);
    let mut metrics = reopen_stream(&metrics_path, trainer.step)?;
    let mut evals = reopen_stream(&evals_path, trainer.step + 1)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(run_dir.join("run.log"))
        .map_err(|e| Error::io(run_dir.join("run.log"), e))?;

    let started = Instant::now();
    let r = &cfg.run;
    while !trainer.finished() {
        let record: StepRecord = match trainer.train_step(&train) {
            Ok(rec) => rec,
            Err(e) => {
                let _ = writeln!(log, "aborted: {e}");
                return Err(e);
            }
        };
        append_line(&mut metrics, &metrics_path, &record)?;
        let done = trainer.step;
        if r.log_every > 0 && done % r.log_every == 0 {
            info!(
                "step {done}/{} total {:.4} ({:.1}s)",
                cfg.schedule.total_iters,
                record.losses.total,
                started.elapsed().as_secs_f64()
            );
        }
        if r.eval_every > 0 && done % r.eval_every == 0 && !trainer.finished() {
            let rep = evaluate(&trainer.student, &data.target_val, &cfg.eval, "target_val")?;
            append_line(
                &mut evals,
                &evals_path,
                &EvalSnapshot {
                    step: done,
                    miou: rep.miou,
                    per_class: &rep.per_class,
                },
            )?;
        }
        if r.checkpoint_every > 0 && done % r.checkpoint_every == 0 && !trainer.finished() {
            trainer.to_archive()?.save(&checkpoint_path(&run_dir, done))?;
        }
    }
    let _ = writeln!(
        log,
        "trained {} steps in {:.1}s",
        trainer.step,
        started.elapsed().as_secs_f64()
    );
    trainer
        .to_archive()?
        .save(&checkpoint_dir(&run_dir).join(FINAL_CHECKPOINT))?;

    let report = evaluate(&trainer.student, &data.target_val, &cfg.eval, "target_val")?;
    write_report(&run_dir, "target_val", &report)?;
    let out_of_target = match &data.out_of_target {
        Some(m) if m.has_labels() => {
            let rep = evaluate(&trainer.student, m, &cfg.eval, "out_of_target")?;
            write_report(&run_dir, "out_of_target", &rep)?;
            Some(rep)
        }
        Some(_) => {
            warn!("out-of-target split has no labels; skipped");
            None
        }
        None => None,
    };
    let summary = RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        steps: trainer.step,
        miou: report.miou,
        out_of_target_miou: out_of_target.as_ref().map(|r| r.miou),
    };
    write_json(&run_dir.join(SUMMARY_FILE), &summary)?;
    let _ = writeln!(log, "target_val mIoU {:.4}", report.miou);
    Ok(TrainingOutcome {
        run_dir,
        summary,
        report,
        out_of_target,
    })
}

/// Which split [`evaluate_checkpoint`] scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    TargetVal,
    OutOfTarget,
}

/// Loads a model from a training checkpoint (student weights) or a bare
/// model archive and evaluates it.
pub fn evaluate_checkpoint(resolved: &ResolvedConfig, checkpoint: &Path, split: EvalSplit) -> Result<EvalReport> {
    let archive = TensorArchive::load(checkpoint)?;
    let prefix = if archive.metadata.contains_key("student.model_config") {
        "student."
    } else {
        ""
    };
    let model = ModelBundle::<f32>::from_archive(&archive, prefix)?;
    let data = ExperimentData::load(&resolved.config)?;
    let (manifest, name) = match split {
        EvalSplit::TargetVal => (&data.target_val, "target_val"),
        EvalSplit::OutOfTarget => (
            data.out_of_target
                .as_ref()
                .ok_or_else(|| Error::config("data.out_of_target", "no out-of-target split configured"))?,
            "out_of_target",
        ),
    };
    evaluate(&model, manifest, &resolved.config.eval, name)
}
