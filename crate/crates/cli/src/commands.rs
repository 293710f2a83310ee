//! The train, predict and evaluate workflows. Each returns the text it
//! would print so tests can drive them without a subprocess.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clarity_core::dataset::{detect_split_kind, parse_dataset, Instance, SplitKind};
use clarity_core::ensemble::{
    load_predictions, predictions_to_jsonl, submission_jsonl, Ensemble, PredictionRecord,
};
use clarity_core::evaluation::{evaluate, render_text, EvalReport};
use clarity_core::training::{run_cv, CvResult, EPOCH_LOG_HEADER};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

/// Loads a dataset, picking the schema from the first record.
pub fn load_any(path: &Path) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Core(clarity_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    Ok(parse_dataset(&text, detect_split_kind(&text))?)
}

pub fn load_split(path: &Path, kind: SplitKind) -> Result<Vec<Instance>> {
    Ok(clarity_core::dataset::load_dataset(path, kind)?)
}

pub fn checkpoint_path(out_dir: &Path, fold: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("fold_{fold}.json"))
}

/// Checkpoint files in `dir`, ordered by fold number.
pub fn discover_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| {
        CliError::Config(format!("no checkpoints given and cannot list {}: {e}", dir.display()))
    })?;
    let mut found: Vec<(usize, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let fold = name.strip_prefix("fold_")?.strip_suffix(".json")?.parse().ok()?;
            Some((fold, e.path()))
        })
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(CliError::Config(format!("no fold_*.json checkpoints in {}", dir.display())));
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

#[derive(Debug, Serialize)]
struct CvSummary<'a> {
    folds: usize,
    seed: u64,
    fold_scores: &'a [clarity_core::training::FoldScore],
    clarity: clarity_core::training::MeanStd,
    evasion: clarity_core::training::MeanStd,
}

pub fn format_cv(result: &CvResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<6} {:>6} {:>6} {:>10} {:>10} {:>10}", "fold", "seed", "epoch", "clarity", "evasion", "combined");
    for s in &result.fold_scores {
        let _ = writeln!(
            out,
            "{:<6} {:>6} {:>6} {:>10.4} {:>10.4} {:>10.4}",
            s.fold, s.seed, s.best_epoch, s.clarity_f1, s.evasion_f1, s.combined_f1
        );
    }
    let _ = writeln!(
        out,
        "mean ± std  clarity {:.4} ± {:.4}  evasion {:.4} ± {:.4}",
        result.clarity.mean, result.clarity.std, result.evasion.mean, result.evasion.std
    );
    out
}

/// Cross-validated training. Writes per-fold checkpoints, the epoch log,
/// out-of-fold predictions, the fold plan and a score summary under
/// `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<(CvResult, String)> {
    cfg.validate()?;
    let instances = load_split(cfg.train_path()?, SplitKind::Train)?;
    let result = run_cv(&instances, &cfg.pipeline())?;
    let out = &cfg.out_dir;

    for (f, ckpt) in result.checkpoints.iter().enumerate() {
        let path = checkpoint_path(out, f);
        write(&path, ckpt.to_json())?;
    }
    let mut log = String::from(EPOCH_LOG_HEADER);
    log.push('\n');
    for row in result.logs.iter().flatten() {
        log.push_str(&row.csv_row());
        log.push('\n');
    }
    write(&out.join("training_log.csv"), log)?;
    write(&out.join("oof_predictions.jsonl"), predictions_to_jsonl(&result.oof))?;
    write(&out.join("fold_plan.json"), to_json(&result.plan))?;
    write(
        &out.join("cv_summary.json"),
        to_json(&CvSummary {
            folds: result.plan.k,
            seed: result.plan.base_seed,
            fold_scores: &result.fold_scores,
            clarity: result.clarity,
            evasion: result.evasion,
        }),
    )?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let text = format_cv(&result);
    Ok((result, text))
}

/// Ensemble prediction for `input`. With no explicit checkpoints, uses the
/// ones `train` wrote under `cfg.out_dir`.
pub fn cmd_predict(cfg: &RunConfig, checkpoints: &[PathBuf], input: Option<&Path>) -> Result<(Vec<PredictionRecord>, String)> {
    let paths = if checkpoints.is_empty() {
        discover_checkpoints(&cfg.out_dir.join("checkpoints"))?
    } else {
        checkpoints.to_vec()
    };
    let input = input
        .or(cfg.data.test.as_deref())
        .ok_or_else(|| CliError::Config("no input given and data.test is not set".into()))?;
    let instances = load_split(input, SplitKind::Unlabeled)?;
    let ensemble = Ensemble::load(&paths)?;
    let records: Vec<PredictionRecord> = ensemble
        .predict_all(&instances)?
        .iter()
        .map(|p| p.record())
        .collect();
    let out = &cfg.out_dir;
    write(&out.join("predictions.jsonl"), predictions_to_jsonl(&records))?;
    write(&out.join("submission_clarity.jsonl"), submission_jsonl(&records, |r| r.clarity))?;
    write(&out.join("submission_evasion.jsonl"), submission_jsonl(&records, |r| r.evasion))?;
    let text = format!(
        "{} instances, {} checkpoints -> {}\n",
        records.len(),
        ensemble.len(),
        out.join("predictions.jsonl").display()
    );
    Ok((records, text))
}

/// Scores a prediction file against gold and writes the report bundle.
pub fn cmd_evaluate(out_dir: &Path, gold: &Path, predictions: &Path) -> Result<(EvalReport, String)> {
    let gold = load_any(gold)?;
    let preds = load_predictions(predictions)?;
    let report = evaluate(&gold, &preds)?;
    write_report(out_dir, &report)?;
    let text = render_text(&report);
    Ok((report, text))
}

pub(crate) fn write_report(out_dir: &Path, report: &EvalReport) -> Result<()> {
    write(&out_dir.join("report.json"), to_json(report))?;
    write(&out_dir.join("report.txt"), render_text(report))?;
    write(&out_dir.join("confusion_clarity.csv"), report.clarity.confusion.to_csv(false))?;
    write(&out_dir.join("confusion_evasion.csv"), report.evasion.confusion.to_csv(false))?;
    write(
        &out_dir.join("confusion_clarity_normalized.csv"),
        report.clarity.confusion.to_csv(true),
    )?;
    write(
        &out_dir.join("confusion_evasion_normalized.csv"),
        report.evasion.confusion.to_csv(true),
    )
}
