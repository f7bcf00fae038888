//! Subcommand implementations. Console output goes to the supplied writer.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use flare_core::dataio::{self, fit_normalizer, CohortManifest, Normalizer, SynthProvenance};
use flare_core::gradcheck::{run_gradcheck, GradcheckReport};
use flare_core::metrics::{write_bucket_f1_csv, write_confusion_csv, EvalReport};
use flare_core::model::{Model, ModelConfig, ModelKind};
use flare_core::numeric::Checkpoint;
use flare_core::sampling::{
    augment, augmentation_report, make_loader, split_patients, write_augmentation_report,
    Subtrajectory,
};
use flare_core::synthcohort::{generate_cohort, summarize, CohortSummary};
use flare_core::training::{evaluate, Trainer};
use flare_core::Cohort;
use serde::{Deserialize, Serialize};

use crate::config::{CheckpointChoice, RunConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelSelection {
    Flare,
    Concat,
    Both,
}

impl ModelSelection {
    pub fn kinds(self) -> Vec<ModelKind> {
        match self {
            ModelSelection::Flare => vec![ModelKind::Flare],
            ModelSelection::Concat => vec![ModelKind::Concat],
            ModelSelection::Both => vec![ModelKind::Flare, ModelKind::Concat],
        }
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(run_dir)?;
        let path = run_dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Data(format!(
                "run directory {} is in use (remove {} if no run is active)",
                run_dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Loads or generates the cohort named by the config.
pub fn resolve_cohort(cfg: &RunConfig) -> Result<Cohort, CliError> {
    if let Some(spec) = &cfg.data.synth {
        return generate_cohort(spec).map_err(CliError::config);
    }
    let path = cfg
        .data
        .path
        .as_deref()
        .ok_or_else(|| CliError::Config("no data source".into()))?;
    let manifest = CohortManifest::read(&dataio::manifest_path(path)).map_err(CliError::data)?;
    if manifest.dims() != cfg.model.dims {
        return Err(CliError::Config(format!(
            "model dims {:?} differ from the cohort manifest {:?}",
            cfg.model.dims,
            manifest.dims()
        )));
    }
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    dataio::load_cohort(file, &manifest).map_err(CliError::data)
}

/// Split, normalized cohort and augmented samples of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cohort: Cohort,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub normalizer: Option<Normalizer>,
    pub train: Vec<Subtrajectory>,
    pub test: Vec<Subtrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub fn prepare(cfg: &RunConfig, raw: &Cohort, normalizer: Option<Normalizer>) -> Result<Prepared, CliError> {
    let (train_ids, test_ids) = split_patients(raw.patient_ids(), &cfg.split_spec()).map_err(CliError::data)?;
    let normalizer = match normalizer {
        Some(n) => Some(n),
        None if cfg.training.normalize => {
            Some(fit_normalizer(raw, &train_ids, "train").map_err(CliError::data)?)
        }
        None => None,
    };
    let cohort = match &normalizer {
        Some(n) => n.apply_cohort(raw).map_err(CliError::data)?,
        None => raw.clone(),
    };
    let domain = cfg.eval.domain;
    let train = augment(&cohort, &train_ids, domain);
    let test = augment(&cohort, &test_ids, domain);
    Ok(Prepared {
        cohort,
        train_ids,
        test_ids,
        normalizer,
        train,
        test,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(CliError::data)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_synth(cfg: &RunConfig, out_path: &Path, console: &mut dyn Write) -> Result<CohortSummary, CliError> {
    let spec = cfg
        .data
        .synth
        .clone()
        .ok_or_else(|| CliError::Config("synth needs a `data.synth` spec".into()))?;
    let cohort = generate_cohort(&spec).map_err(CliError::config)?;
    let summary = summarize(&cohort);
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    dataio::write_cohort_file(
        &cohort,
        out_path,
        Some(SynthProvenance {
            spec,
            summary: summary.clone(),
        }),
    )
    .map_err(CliError::data)?;
    writeln!(
        console,
        "wrote {} patients, {} visits ({} observed) to {}",
        summary.patients,
        summary.visits,
        summary.observed_visits,
        out_path.display()
    )?;
    writeln!(
        console,
        "visit stages CN/MCI/AD: {}/{}/{}; transitions CN->MCI {}, MCI->AD {}, CN->AD {}",
        summary.visit_stage_counts[0],
        summary.visit_stage_counts[1],
        summary.visit_stage_counts[2],
        summary.cn_to_mci,
        summary.mci_to_ad,
        summary.cn_to_ad
    )?;
    Ok(summary)
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total_loss: f64,
    pub cel: f64,
    pub aux: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct ModelRun {
    pub kind: ModelKind,
    pub dir: PathBuf,
    pub log: Vec<EpochLog>,
    /// Epoch whose weights are in `best.ck`; `None` if no epoch ran.
    pub best_epoch: Option<usize>,
    pub model: Model,
}

pub fn model_dir(run_dir: &Path, kind: ModelKind) -> PathBuf {
    run_dir.join(kind.as_str())
}

pub fn cmd_train(
    cfg: &RunConfig,
    run_dir: &Path,
    models: ModelSelection,
    console: &mut dyn Write,
) -> Result<Vec<ModelRun>, CliError> {
    cfg.validate()?;
    for kind in models.kinds() {
        Model::new(kind, &cfg.model, cfg.training.seed).map_err(CliError::config)?;
    }
    let raw = resolve_cohort(cfg)?;
    let prep = prepare(cfg, &raw, None)?;
    if prep.train.is_empty() {
        return Err(CliError::Data("the training split yields no samples".into()));
    }

    let _lock = RunLock::acquire(run_dir)?;
    write_json(&run_dir.join("config.json"), cfg)?;
    write_json(
        &run_dir.join("split.json"),
        &SplitRecord {
            train: prep.train_ids.clone(),
            test: prep.test_ids.clone(),
        },
    )?;
    if let Some(n) = &prep.normalizer {
        write_json(&run_dir.join("normalizer.json"), n)?;
    }
    let rows = augmentation_report(cfg.eval.domain, &[("train", &prep.train), ("test", &prep.test)]);
    write_augmentation_report(&rows, File::create(run_dir.join("augmentation.csv"))?)
        .map_err(CliError::data)?;
    writeln!(
        console,
        "{} train / {} test patients, {} / {} samples",
        prep.train_ids.len(),
        prep.test_ids.len(),
        prep.train.len(),
        prep.test.len()
    )?;

    let mut runs = Vec::new();
    for kind in models.kinds() {
        runs.push(train_one(cfg, &prep, kind, &model_dir(run_dir, kind), console)?);
    }
    Ok(runs)
}

fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    fs::write(path, ck.to_binary())?;
    Ok(())
}

fn train_one(
    cfg: &RunConfig,
    prep: &Prepared,
    kind: ModelKind,
    dir: &Path,
    console: &mut dyn Write,
) -> Result<ModelRun, CliError> {
    fs::create_dir_all(dir)?;
    let seed = cfg.training.seed;
    let model = Model::new(kind, &cfg.model, seed).map_err(CliError::config)?;
    let mut trainer = Trainer::new(model, cfg.optimizer).map_err(CliError::config)?;
    let mut loader = make_loader(
        cfg.training.loader_scheme,
        &prep.train,
        cfg.training.batch_size,
        seed.wrapping_add(1),
    );
    let mut log_file = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
    let mut log = Vec::with_capacity(cfg.training.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 0..cfg.training.epochs {
        let t0 = Instant::now();
        let stats = trainer
            .train_epoch(&prep.cohort, &prep.train, loader.as_mut())
            .map_err(CliError::data)?;
        let entry = EpochLog {
            epoch,
            total_loss: stats.loss.total,
            cel: stats.loss.cel,
            aux: stats.loss.aux,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        serde_json::to_writer(&mut log_file, &entry).map_err(CliError::data)?;
        log_file.write_all(b"\n")?;
        log_file.flush()?;
        // Uniform-random epochs vary in length, so compare per-sample means.
        let mean_loss = stats.loss.total / stats.samples.max(1) as f64;
        if best.as_ref().is_none_or(|(loss, _, _)| mean_loss < *loss) {
            best = Some((mean_loss, epoch, trainer.model.to_checkpoint(trainer.step)));
        }
        let every = cfg.training.checkpoint_every;
        if every > 0 && (epoch + 1) % every == 0 {
            write_checkpoint(
                &trainer.model.to_checkpoint(trainer.step),
                &dir.join(format!("epoch_{}.ck", epoch + 1)),
            )?;
        }
        log.push(entry);
    }

    let final_ck = trainer.model.to_checkpoint(trainer.step);
    write_checkpoint(&final_ck, &dir.join(CheckpointChoice::Final.file_name()))?;
    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    let best_ck = best.map(|(_, _, ck)| ck).unwrap_or(final_ck);
    write_checkpoint(&best_ck, &dir.join(CheckpointChoice::Best.file_name()))?;

    match (log.first(), log.last()) {
        (Some(first), Some(last)) => writeln!(
            console,
            "{}: {} epochs, loss {:.4} -> {:.4}, best epoch {}",
            kind.as_str(),
            log.len(),
            first.total_loss,
            last.total_loss,
            best_epoch.unwrap_or(0)
        )?,
        _ => writeln!(console, "{}: 0 epochs, saved initial weights", kind.as_str())?,
    }
    Ok(ModelRun {
        kind,
        dir: dir.to_path_buf(),
        log,
        best_epoch,
        model: trainer.model,
    })
}

/// Loads a checkpoint, checking it against the run's model config.
pub fn load_model(path: &Path, kind: ModelKind, cfg: &ModelConfig) -> Result<Model, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let ck = Checkpoint::read_binary(std::io::BufReader::new(file))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Model::from_checkpoint(&ck, Some((kind, cfg))).map_err(CliError::config)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub models: ModelSelection,
    /// Overrides `eval.checkpoint` of the run config.
    pub checkpoint: Option<CheckpointChoice>,
    /// Explicit checkpoint file (single model only).
    pub checkpoint_path: Option<PathBuf>,
    /// Defaults to `<run_dir>/<kind>/eval_<choice>`.
    pub out_dir: Option<PathBuf>,
}

/// Evaluates trained checkpoints on the test split recorded in `run_dir`.
pub fn cmd_eval(
    run_dir: &Path,
    opts: &EvalOptions,
    console: &mut dyn Write,
) -> Result<Vec<(ModelKind, EvalReport)>, CliError> {
    let cfg: RunConfig = read_json(&run_dir.join("config.json"))
        .map_err(|e| CliError::Config(format!("not a run directory: {e}")))?;
    cfg.validate()?;
    let kinds = opts.models.kinds();
    if opts.checkpoint_path.is_some() && kinds.len() != 1 {
        return Err(CliError::Config("--checkpoint-path needs a single --model".into()));
    }
    let choice = opts.checkpoint.unwrap_or(cfg.eval.checkpoint);
    let normalizer: Option<Normalizer> = if cfg.training.normalize {
        Some(read_json(&run_dir.join("normalizer.json"))?)
    } else {
        None
    };
    let raw = resolve_cohort(&cfg)?;
    let prep = prepare(&cfg, &raw, normalizer)?;
    let recorded: SplitRecord = read_json(&run_dir.join("split.json"))?;
    if recorded.test != prep.test_ids {
        return Err(CliError::Data(
            "the cohort no longer reproduces the recorded test split".into(),
        ));
    }

    let mut out = Vec::new();
    for kind in kinds {
        let ck_path = opts
            .checkpoint_path
            .clone()
            .unwrap_or_else(|| model_dir(run_dir, kind).join(choice.file_name()));
        let model = load_model(&ck_path, kind, &cfg.model)?;
        let report = evaluate(&model, &prep.cohort, &prep.test, cfg.eval.domain)
            .map_err(CliError::data)?
            .finalize()
            .map_err(CliError::data)?;
        let dir = match &opts.out_dir {
            Some(d) => d.join(kind.as_str()),
            None => model_dir(run_dir, kind).join(format!("eval_{}", choice.file_name().trim_end_matches(".ck"))),
        };
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("report.json"), report.to_json() + "\n")?;
        write_confusion_csv(&report.confusion, File::create(dir.join("confusion.csv"))?)
            .map_err(CliError::data)?;
        write_bucket_f1_csv(&report, cfg.eval.domain, File::create(dir.join("bucket_f1.csv"))?)
            .map_err(CliError::data)?;
        writeln!(
            console,
            "{}: {} test samples ({} skipped), accuracy {:.4}, macro P/R/F1 {:.4}/{:.4}/{:.4} -> {}",
            kind.as_str(),
            report.count,
            report.skipped,
            report.overall.accuracy,
            report.overall.macro_precision,
            report.overall.macro_recall,
            report.overall.macro_f1,
            dir.display()
        )?;
        out.push((kind, report));
    }
    Ok(out)
}

/// Runs the finite-difference matrix; failing blocks become a verification error.
pub fn cmd_gradcheck(
    model: &ModelConfig,
    seed: u64,
    corrupt_block: Option<&str>,
    console: &mut dyn Write,
) -> Result<GradcheckReport, CliError> {
    model.validate().map_err(CliError::config)?;
    let report = run_gradcheck(model, seed, corrupt_block).map_err(CliError::config)?;
    writeln!(
        console,
        "central differences, step {:e}, relative tolerance {:e} (differences below {:e} count as exact)",
        report.step,
        report.tolerance,
        flare_core::gradcheck::ABS_FLOOR
    )?;
    for case in &report.cases {
        writeln!(console, "{} {}", if case.passed() { "ok  " } else { "FAIL" }, case.case)?;
    }
    for (block, rel, abs) in report.worst_by_block() {
        writeln!(console, "  {block:<24} max rel error {rel:.3e}  max abs error {abs:.3e}")?;
    }
    if report.passed() {
        return Ok(report);
    }
    let mut blocks: Vec<String> = report.failures().into_iter().map(|(_, b)| b).collect();
    blocks.sort();
    blocks.dedup();
    Err(CliError::Verification(format!(
        "gradient mismatch in {}",
        blocks.join(", ")
    )))
}

/// Writes the augmentation report (`T,tau,split,count`) for the run's split.
pub fn cmd_buckets(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let raw = resolve_cohort(cfg)?;
    let prep = prepare(cfg, &raw, None)?;
    let rows = augmentation_report(cfg.eval.domain, &[("train", &prep.train), ("test", &prep.test)]);
    write_augmentation_report(&rows, out).map_err(CliError::data)
}
