//! Command-line front end: data generation, training, evaluation, ablation
//! and gradient checking.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for
//! failures while running.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use boxadapt_core::data::{
    generate_dataset, read_manifest, Dataset, DatasetLayout, DomainSpec, Manifest,
};
use boxadapt_core::eval::{ablate, ablation_csv, evaluate, AblationSpec, RunInfo};
use boxadapt_core::gradsuite::gradient_suite;
use boxadapt_core::segnet::{load_checkpoint, save_checkpoint, Head, SegModel};
use boxadapt_core::train::{
    run_baseline, train_stage1, train_stage2, BaselineKind, RunLog, Splits, TrainConfig,
};
use boxadapt_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "boxadapt",
    about = "Box-supervised domain adaptation for segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset manifest (JSON lines).
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic two-domain dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        source_patients: usize,
        #[arg(long, default_value_t = 20)]
        target_patients: usize,
        #[arg(long, default_value_t = 4)]
        eval_patients: usize,
        #[arg(long, default_value_t = 7)]
        slices: usize,
        /// Weakly annotated slices per target training patient.
        #[arg(long, default_value_t = 3)]
        annotated: usize,
    },
    /// Train one stage of the method.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// First-stage checkpoint; required for stage 2.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train a baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Kind,
    },
    /// Evaluate a checkpoint (or a freshly initialized model) on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "target")]
        head: HeadArg,
    },
    /// Sweep the number of annotated slices per patient.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,3,10")]
        budgets: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Kind {
    SourceOnly,
    SelfTrainNoBox,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum HeadArg {
    Source,
    Target,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

/// Runs the command line and returns the process exit code.
pub fn dispatch<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    1
                }
            };
        }
    };
    match run(cli.command, stdout) {
        Ok(()) => 0,
        Err(Failure::Validation(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            2
        }
    }
}

fn run(command: Command, out: &mut dyn Write) -> Outcome {
    match command {
        Command::GenData {
            common,
            source_patients,
            target_patients,
            eval_patients,
            slices,
            annotated,
        } => {
            let dir = out_dir(&common)?;
            let layout = DatasetLayout {
                source_patients,
                target_patients,
                eval_patients,
                slices_per_patient: slices,
                annotated_per_patient: annotated,
                ..DatasetLayout::default()
            };
            let seed = common.seed.unwrap_or(0);
            let m = generate_dataset(
                &DomainSpec::source_default(),
                &DomainSpec::target_default(),
                &layout,
                seed,
                &dir,
            )?;
            say(
                out,
                &format!(
                    "wrote {} records to {}",
                    m.records.len(),
                    dir.join("manifest.jsonl").display()
                ),
            )
        }
        Command::Train {
            common,
            stage,
            checkpoint,
        } => {
            if stage == 2 && checkpoint.is_none() {
                return Err(Failure::Validation(
                    "train --stage 2 needs --checkpoint with a first-stage checkpoint".into(),
                ));
            }
            let cfg = config(&common)?;
            let dir = out_dir(&common)?;
            let ds = dataset(&common)?;
            let (model, log) = if stage == 1 {
                let mut model = SegModel::build(cfg.net.clone(), cfg.seed)?;
                let log = train_stage1(&mut model, &ds.source, &ds.target_weak, &cfg)?;
                (model, log)
            } else {
                let path = checkpoint.expect("checked above");
                let mut model = load_checkpoint(&path, Some(&cfg.net))?;
                let log = train_stage2(&mut model, &ds.target_unlabeled, &ds.target_weak, &cfg)?;
                (model, log)
            };
            finish(out, &dir, &format!("stage{stage}"), &model, &log)
        }
        Command::Baseline { common, kind } => {
            let cfg = config(&common)?;
            let dir = out_dir(&common)?;
            let ds = dataset(&common)?;
            let (kind, name) = match kind {
                Kind::SourceOnly => (BaselineKind::SourceOnly, "source-only"),
                Kind::SelfTrainNoBox => (BaselineKind::SelfTrainNoBox, "self-train-no-box"),
            };
            let splits = Splits {
                source: &ds.source,
                target_unlabeled: &ds.target_unlabeled,
                target_weak: &ds.target_weak,
            };
            let (model, log) = run_baseline(kind, splits, &cfg)?;
            finish(out, &dir, name, &model, &log)
        }
        Command::Eval {
            common,
            checkpoint,
            head,
        } => {
            let cfg = config(&common)?;
            let ds = dataset(&common)?;
            let (model, run_id) = match &checkpoint {
                Some(path) => (
                    load_checkpoint(path, Some(&cfg.net))?,
                    path.display().to_string(),
                ),
                None => (
                    SegModel::build(cfg.net.clone(), cfg.seed)?,
                    "untrained".to_string(),
                ),
            };
            let head = match head {
                HeadArg::Source => Head::Source,
                HeadArg::Target => Head::Target,
            };
            let info = RunInfo {
                run_id,
                stage: format!("iteration-{}", model.iteration()),
                config: cfg,
            };
            let report = evaluate(&model, &ds.eval, head, &info)?;
            if let Some(dir) = &common.out {
                create_dir(dir)?;
                write_file(&dir.join("report.json"), report.to_json()?.as_bytes())?;
            }
            say(out, &format!("mean dice {:.6}", report.mean_dice))
        }
        Command::Ablate {
            common,
            budgets,
            repetitions,
        } => {
            let cfg = config(&common)?;
            let dir = out_dir(&common)?;
            let manifest = manifest(&common)?;
            let spec = AblationSpec {
                budgets,
                repetitions,
            };
            let rows = ablate(&spec, &cfg, &manifest)?;
            let csv = ablation_csv(&rows)?;
            write_file(&dir.join("ablation.csv"), csv.as_bytes())?;
            say(out, csv.trim_end())
        }
        Command::Gradcheck { common, instances } => {
            let cases = gradient_suite(common.seed.unwrap_or(0), instances);
            let mut failed = 0;
            for c in &cases {
                if !c.passed() {
                    failed += 1;
                    say(
                        out,
                        &format!(
                            "FAIL {} #{}: max relative error {:.3e} {}",
                            c.name,
                            c.instance,
                            c.report.max_rel_error(),
                            c.report.failure.as_deref().unwrap_or("")
                        ),
                    )?;
                }
            }
            say(
                out,
                &format!(
                    "{} of {} gradient checks passed",
                    cases.len() - failed,
                    cases.len()
                ),
            )?;
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
    }
}

fn say(out: &mut dyn Write, line: &str) -> Outcome {
    writeln!(out, "{line}").map_err(|e| Failure::Runtime(e.to_string()))
}

fn config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf, Failure> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| Failure::Validation("--out is required".into()))?;
    create_dir(&dir)?;
    Ok(dir)
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn manifest(common: &Common) -> Result<Manifest, Failure> {
    let path = common
        .manifest
        .as_ref()
        .ok_or_else(|| Failure::Validation("--manifest is required".into()))?;
    Ok(read_manifest(path)?)
}

fn dataset(common: &Common) -> Result<Dataset, Failure> {
    Ok(Dataset::load(&manifest(common)?)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn finish(
    out: &mut dyn Write,
    dir: &Path,
    name: &str,
    model: &SegModel<f32>,
    log: &RunLog,
) -> Outcome {
    let ckpt = dir.join(format!("{name}.ckpt"));
    save_checkpoint(model, &ckpt)?;
    log.write(&dir.join(format!("{name}_log.csv")))?;
    say(out, &format!("wrote {}", ckpt.display()))
}
