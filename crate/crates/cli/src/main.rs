use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use uda_forge::datamodel::{compute_class_frequencies, generate_toy_domains, DatasetManifest};
use uda_forge::harness::{
    evaluate_checkpoint, resolve_config, run_ablation_suite, run_stability, run_training, EvalSplit, ExperimentData,
    ResolvedConfig,
};
use uda_forge::Error;

const DEVICE_VAR: &str = "UDA_FORGE_DEVICE";

#[derive(Parser)]
#[command(name = "uda-forge", version, about = "Domain-adaptive semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set toggles.dacs=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ResolvedConfig, Error> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("output_dir={}", toml_string(&out.display().to_string())));
        }
        resolve_config(self.config.as_deref(), &overrides)
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the target validation or out-of-target split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_of_target: bool,
    },
    /// Train once per seed and report the spread of target mIoU.
    Stability {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4, 5])]
        seeds: Vec<u64>,
    },
    /// Train the base config and one run per removed toggle.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(
            long,
            value_delimiter = ',',
            default_values_t = ["ema", "pseudo_weight", "lr_multiplier", "dacs", "rcs", "mic"].map(String::from)
        )]
        toggles: Vec<String>,
    },
    /// Write the procedural benchmark to disk as manifest datasets.
    Toygen {
        #[command(flatten)]
        common: Common,
    },
    /// Print per-class pixel frequencies of the source split as CSV.
    Stats {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Data { .. } | Error::NoLabeledPixels => 3,
        Error::NonFinite { .. } => 4,
        _ => 1,
    }
}

fn check_device() -> Result<(), Error> {
    match std::env::var(DEVICE_VAR) {
        Ok(d) if !d.is_empty() && !d.eq_ignore_ascii_case("cpu") => Err(Error::Config {
            key: DEVICE_VAR.into(),
            msg: format!("unsupported device `{d}`; only `cpu` is available"),
        }),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    check_device()?;
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let out = run_training(&cfg, resume.as_deref())?;
            println!("{}", out.report);
            if let Some(r) = &out.out_of_target {
                println!("{r}");
            }
            println!("run directory: {}", out.run_dir.display());
        }
        Command::Eval {
            common,
            checkpoint,
            out_of_target,
        } => {
            let cfg = common.resolve()?;
            let split = if out_of_target {
                EvalSplit::OutOfTarget
            } else {
                EvalSplit::TargetVal
            };
            let report = evaluate_checkpoint(&cfg, &checkpoint, split)?;
            println!("{report}");
            if common.out.is_some() {
                let dir = &cfg.config.output_dir;
                std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                report.write_json(&dir.join(format!("eval_{}.json", report.dataset)))?;
                report.write_csv(&dir.join(format!("eval_{}.csv", report.dataset)))?;
            }
        }
        Command::Stability { common, seeds } => {
            let report = run_stability(&common.resolve()?, &seeds)?;
            println!("{report}");
            return Ok(report.failed() == 0);
        }
        Command::Ablate { common, toggles } => {
            println!("{}", run_ablation_suite(&common.resolve()?, &toggles)?);
        }
        Command::Toygen { common } => {
            let cfg = common.resolve()?;
            let bench = generate_toy_domains(&cfg.config.data.toy)?;
            bench.write_to(&cfg.config.output_dir)?;
            println!("wrote toy benchmark to {}", cfg.config.output_dir.display());
        }
        Command::Stats { common } => {
            let cfg = common.resolve()?;
            let data = ExperimentData::load(&cfg.config)?;
            let source: &DatasetManifest = data.source.as_ref().unwrap_or(&data.target_val);
            let table = compute_class_frequencies(source)?;
            table.write_csv(&data.class_space, std::io::stdout().lock())?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
