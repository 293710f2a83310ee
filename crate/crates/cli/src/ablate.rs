//! One-factor ablations. Each variant reruns cross-validation with a single
//! setting changed; cells are mean ± std of the per-fold validation
//! Macro-F1. When a held-out split is configured the fold ensemble is also
//! scored on it.

use std::fmt::Write as _;
use std::time::Instant;

use clap::ValueEnum;
use clarity_core::dataset::{Instance, SplitKind};
use clarity_core::ensemble::Ensemble;
use clarity_core::evaluation::evaluate;
use clarity_core::model::{LossKind, PoolingStrategy, TaskMode};
use clarity_core::training::{run_cv, MeanStd, PipelineConfig};
use serde::Serialize;

use crate::commands::{load_any, load_split, to_json, write};
use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Pooling,
    Multitask,
    Folds,
    Loss,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Pooling => "pooling",
            Axis::Multitask => "multitask",
            Axis::Folds => "folds",
            Axis::Loss => "loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub folds: usize,
    pub clarity: Option<MeanStd>,
    pub evasion: Option<MeanStd>,
    pub heldout_clarity: Option<f64>,
    pub heldout_evasion: Option<f64>,
    /// Fold count relative to the first row; folds axis only.
    pub nominal_cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub variant: String,
    pub seconds: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ablation {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
    /// Wall-clock per variant. Kept out of the table so that the table is
    /// reproducible byte for byte.
    pub timing: Vec<TimingRow>,
}

fn variants(cfg: &RunConfig, axis: Axis) -> Vec<(String, PipelineConfig)> {
    let base = cfg.pipeline();
    let with = |f: &dyn Fn(&mut PipelineConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Pooling => PoolingStrategy::ALL
            .iter()
            .map(|&p| (p.display_name().to_string(), with(&|c| c.model.pooling = p)))
            .collect(),
        Axis::Multitask => [
            ("Multi-task (both heads)", TaskMode::Both),
            ("Clarity only", TaskMode::ClarityOnly),
            ("Evasion only", TaskMode::EvasionOnly),
        ]
        .into_iter()
        .map(|(name, t)| (name.to_string(), with(&|c| c.loss.tasks = t)))
        .collect(),
        Axis::Folds => cfg
            .ablation
            .fold_counts
            .iter()
            .map(|&k| (format!("k = {k}"), with(&|c| c.train.folds = k)))
            .collect(),
        Axis::Loss => {
            let gamma = cfg.ablation.focal_gamma;
            vec![
                ("Cross-entropy".to_string(), with(&|c| c.loss.kind = LossKind::CrossEntropy)),
                (
                    "Class-weighted CE".to_string(),
                    with(&|c| {
                        c.loss.kind = LossKind::ClassWeighted;
                        c.loss.clarity_weights = None;
                        c.loss.evasion_weights = None;
                    }),
                ),
                (
                    format!("Focal (gamma = {gamma})"),
                    with(&|c| {
                        c.loss.kind = LossKind::Focal;
                        c.loss.focal_gamma = gamma;
                    }),
                ),
            ]
        }
    }
}

pub fn run_ablation(cfg: &RunConfig, axis: Axis, train: &[Instance], heldout: Option<&[Instance]>) -> Result<Ablation> {
    let mut rows = Vec::new();
    let mut seconds = Vec::new();
    let base_folds = cfg.ablation.fold_counts.first().copied().unwrap_or(3) as f64;
    for (name, pipeline) in variants(cfg, axis) {
        let start = Instant::now();
        let cv = run_cv(train, &pipeline)?;
        seconds.push(start.elapsed().as_secs_f64());
        let (heldout_clarity, heldout_evasion) = match heldout {
            Some(h) => {
                let ensemble = Ensemble::new(cv.checkpoints.clone())?;
                let records: Vec<_> = ensemble.predict_all(h)?.iter().map(|p| p.record()).collect();
                let report = evaluate(h, &records)?;
                (Some(report.clarity.macro_f1), Some(report.evasion.macro_f1))
            }
            None => (None, None),
        };
        let tasks = pipeline.loss.tasks;
        rows.push(AblationRow {
            variant: name,
            folds: pipeline.train.folds,
            clarity: tasks.clarity().then_some(cv.clarity),
            evasion: tasks.evasion().then_some(cv.evasion),
            heldout_clarity: heldout_clarity.filter(|_| tasks.clarity()),
            heldout_evasion: heldout_evasion.filter(|_| tasks.evasion()),
            nominal_cost: (axis == Axis::Folds).then(|| pipeline.train.folds as f64 / base_folds),
        });
    }
    let first = seconds.first().copied().unwrap_or(1.0).max(1e-9);
    let timing = rows
        .iter()
        .zip(&seconds)
        .map(|(r, &s)| TimingRow {
            variant: r.variant.clone(),
            seconds: s,
            relative: s / first,
        })
        .collect();
    Ok(Ablation { axis, rows, timing })
}

fn cell(x: Option<MeanStd>) -> String {
    x.map_or_else(|| "-".into(), |m| format!("{:.4} ± {:.4}", m.mean, m.std))
}

fn point(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Markdown table of the ablation.
pub fn render_table(a: &Ablation) -> String {
    let heldout = a.rows.iter().any(|r| r.heldout_clarity.is_some() || r.heldout_evasion.is_some());
    let folds = a.axis == Axis::Folds;
    let mut header = vec!["Variant", "Clarity Macro-F1", "Evasion Macro-F1"];
    if heldout {
        header.extend(["Held-out clarity", "Held-out evasion"]);
    }
    if folds {
        header.push("Rel. cost");
    }
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in &a.rows {
        let mut cells = vec![r.variant.clone(), cell(r.clarity), cell(r.evasion)];
        if heldout {
            cells.push(point(r.heldout_clarity));
            cells.push(point(r.heldout_evasion));
        }
        if folds {
            cells.push(r.nominal_cost.map_or("-".into(), |c| format!("{c:.2}x")));
        }
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    out
}

pub fn render_timing(a: &Ablation) -> String {
    let mut out = String::from("variant,seconds,relative\n");
    for t in &a.timing {
        let _ = writeln!(out, "{},{:.3},{:.3}", t.variant, t.seconds, t.relative);
    }
    out
}

/// Runs the ablation and writes `ablation_<axis>.md`, `.json` and
/// `_timing.csv` under the output directory.
pub fn cmd_ablate(cfg: &RunConfig, axis: Axis) -> Result<(Ablation, String)> {
    cfg.validate()?;
    let train = load_split(cfg.train_path()?, SplitKind::Train)?;
    let heldout = cfg.data.dev.as_deref().map(load_any).transpose()?;
    let ablation = run_ablation(cfg, axis, &train, heldout.as_deref())?;
    let table = render_table(&ablation);
    let out = &cfg.out_dir;
    let stem = format!("ablation_{}", axis.name());
    write(&out.join(format!("{stem}.md")), &table)?;
    write(&out.join(format!("{stem}.json")), to_json(&ablation.rows))?;
    write(&out.join(format!("{stem}_timing.csv")), render_timing(&ablation))?;
    Ok((ablation, table))
}
