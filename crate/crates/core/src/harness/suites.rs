use std::fmt;
use std::fs;
use std::path::Path;

use log::{error, info};
use serde::{Deserialize, Serialize};

use super::config::ResolvedConfig;
use super::run::run_training;
use crate::error::{Error, Result};
use crate::uda::Toggles;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub miou: Option<f64>,
    /// Failure message of a run that did not finish.
    pub error: Option<String>,
}

/// Spread of final target mIoU over seeds, computed from successful runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub runs: Vec<SeedResult>,
    pub best: Option<f64>,
    pub worst: Option<f64>,
    pub average: Option<f64>,
    /// Population standard deviation.
    pub std_dev: Option<f64>,
}

/// `(best, worst, mean, population std)`; the mean is accumulated relative
/// to the first value so identical inputs give a deviation of exactly 0.
pub fn population_stats(values: &[f64]) -> Option<(f64, f64, f64, f64)> {
    let first = *values.first()?;
    let n = values.len() as f64;
    let mean = first + values.iter().map(|v| v - first).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst = values.iter().copied().fold(f64::INFINITY, f64::min);
    Some((best, worst, mean, var.sqrt()))
}

impl StabilityReport {
    pub fn from_runs(runs: Vec<SeedResult>) -> Self {
        let values: Vec<f64> = runs.iter().filter_map(|r| r.miou).collect();
        let stats = population_stats(&values);
        StabilityReport {
            runs,
            best: stats.map(|s| s.0),
            worst: stats.map(|s| s.1),
            average: stats.map(|s| s.2),
            std_dev: stats.map(|s| s.3),
        }
    }

    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.miou.is_none()).count()
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.1}", 100.0 * v))
}

impl fmt::Display for StabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>8}", "seed", "mIoU")?;
        for r in &self.runs {
            match &r.error {
                Some(e) => writeln!(f, "{:<8}{:>8}  failed: {e}", r.seed, "-")?,
                None => writeln!(f, "{:<8}{:>8}", r.seed, pct(r.miou))?,
            }
        }
        writeln!(
            f,
            "best {}  worst {}  average {}",
            pct(self.best),
            pct(self.worst),
            pct(self.average)
        )?;
        write!(
            f,
            "std dev {}",
            self.std_dev.map_or("-".into(), |s| format!("{:.2}", 100.0 * s))
        )
    }
}

/// Trains one run per seed under `<output_dir>/seed_<i>_<seed>` and
/// aggregates the final target mIoU. Failed runs are recorded and left out
/// of the statistics.
pub fn run_stability(base: &ResolvedConfig, seeds: &[u64]) -> Result<StabilityReport> {
    if seeds.len() < 2 {
        return Err(Error::config("seeds", "stability needs at least two seeds"));
    }
    let root = base.config.output_dir.clone();
    let mut runs = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.config.seed = seed;
        cfg.config.output_dir = root.join(format!("seed_{i}_{seed}"));
        info!("stability run {}/{} (seed {seed})", i + 1, seeds.len());
        runs.push(match run_training(&cfg, None) {
            Ok(out) => SeedResult {
                seed,
                miou: Some(out.summary.miou),
                error: None,
            },
            Err(e) => {
                error!("seed {seed} failed: {e}");
                SeedResult {
                    seed,
                    miou: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    let report = StabilityReport::from_runs(runs);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    write_pretty(&root.join("stability.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Toggle switched off, `None` for the full configuration.
    pub removed: Option<String>,
    pub miou: f64,
    /// `miou - base miou`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn delta_of(&self, toggle: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.removed.as_deref() == Some(toggle))
            .map(|r| r.delta)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>8}{:>8}", "removed", "mIoU", "delta")?;
        for (i, r) in self.rows.iter().enumerate() {
            let name = r.removed.as_deref().unwrap_or("(none)");
            let delta = if r.removed.is_some() {
                format!("{:+.1}", 100.0 * r.delta)
            } else {
                "-".into()
            };
            write!(f, "{:<16}{:>8.1}{:>8}", name, 100.0 * r.miou, delta)?;
            if i + 1 < self.rows.len() {
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

/// Runs the base config, then one run per toggle with that toggle switched
/// off, each under `<output_dir>/<base|no_TOGGLE>`.
pub fn run_ablation_suite(base: &ResolvedConfig, toggles: &[String]) -> Result<AblationTable> {
    for t in toggles {
        Toggles::default().set(t, false)?;
    }
    let root = base.config.output_dir.clone();
    let mut base_cfg = base.clone();
    base_cfg.config.output_dir = root.join("base");
    let base_miou = run_training(&base_cfg, None)?.summary.miou;
    let mut rows = vec![AblationRow {
        removed: None,
        miou: base_miou,
        delta: 0.0,
    }];
    for t in toggles {
        let mut cfg = base.with_overrides(&[format!("toggles.{t}=false")])?;
        cfg.config.output_dir = root.join(format!("no_{t}"));
        info!("ablation run without {t}");
        let miou = run_training(&cfg, None)?.summary.miou;
        rows.push(AblationRow {
            removed: Some(t.clone()),
            miou,
            delta: miou - base_miou,
        });
    }
    let table = AblationTable { rows };
    write_pretty(&root.join("ablation.json"), &table)?;
    let text = format!("{table}\n");
    fs::write(root.join("ablation.txt"), text).map_err(|e| Error::io(root.join("ablation.txt"), e))?;
    Ok(table)
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
