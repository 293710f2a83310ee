//! Probability-averaging ensembles over fold checkpoints, and the
//! prediction file formats.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClarityLabel, EvasionLabel, Instance, Label};
use crate::error::{Error, Result};
use crate::model::{argmax, Prediction};
use crate::training::{Checkpoint, Prepared, Preprocessor};

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub clarity: ClarityLabel,
    pub evasion: EvasionLabel,
    pub clarity_probs: Vec<f64>,
    pub evasion_probs: Vec<f64>,
    /// Set on out-of-fold predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

impl PredictionRecord {
    pub fn from_probs(id: &str, clarity_probs: Vec<f64>, evasion_probs: Vec<f64>) -> Self {
        Self {
            id: id.to_string(),
            clarity: ClarityLabel::ALL[argmax(&clarity_probs)],
            evasion: EvasionLabel::ALL[argmax(&evasion_probs)],
            clarity_probs,
            evasion_probs,
            fold: None,
        }
    }

    pub fn clarity_confidence(&self) -> f64 {
        self.clarity_probs.iter().copied().fold(0.0, f64::max)
    }

    pub fn evasion_confidence(&self) -> f64 {
        self.evasion_probs.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub id: String,
    pub clarity_probs: Vec<f64>,
    pub evasion_probs: Vec<f64>,
    pub clarity: ClarityLabel,
    pub evasion: EvasionLabel,
    /// Row per model.
    pub per_model: Vec<Prediction>,
}

impl EnsemblePrediction {
    pub fn record(&self) -> PredictionRecord {
        PredictionRecord {
            id: self.id.clone(),
            clarity: self.clarity,
            evasion: self.evasion,
            clarity_probs: self.clarity_probs.clone(),
            evasion_probs: self.evasion_probs.clone(),
            fold: None,
        }
    }
}

/// Per-class mean of the rows, computed as an offset from the first row so
/// that identical rows average to exactly that row.
pub fn average_probabilities(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot average zero models".into()))?;
    if rows.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Shape("probability vectors differ in length".into()));
    }
    let k = rows.len() as f64;
    Ok((0..first.len())
        .map(|c| {
            let offset: f64 = rows[1..].iter().map(|r| r[c] - first[c]).sum();
            first[c] + offset / k
        })
        .collect())
}

/// A set of fold checkpoints that agree on every preprocessing and model
/// setting.
pub struct Ensemble {
    checkpoints: Vec<Checkpoint>,
    preprocessor: Preprocessor,
}

impl Ensemble {
    pub fn new(checkpoints: Vec<Checkpoint>) -> Result<Self> {
        let first = checkpoints
            .first()
            .ok_or_else(|| Error::InvalidInput("ensemble needs at least one checkpoint".into()))?;
        for (i, c) in checkpoints.iter().enumerate().skip(1) {
            let mismatch = if c.tokenizer != first.tokenizer || c.tokenizer_spec != first.tokenizer_spec {
                Some("tokenizer")
            } else if c.chunking != first.chunking {
                Some("chunking")
            } else if c.model != first.model {
                Some("model")
            } else if c.width() != first.width() {
                Some("encoder width")
            } else {
                None
            };
            if let Some(what) = mismatch {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint {i} differs from checkpoint 0 in {what} settings"
                )));
            }
        }
        let preprocessor = first.preprocessor()?;
        Ok(Self {
            checkpoints,
            preprocessor,
        })
    }

    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self> {
        let checkpoints = paths.iter().map(Checkpoint::load).collect::<Result<Vec<_>>>()?;
        Self::new(checkpoints)
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn preprocessor(&self) -> &Preprocessor {
        &self.preprocessor
    }

    pub fn predict_prepared(&self, prepared: &Prepared) -> Result<EnsemblePrediction> {
        let per_model = self
            .checkpoints
            .iter()
            .map(|c| c.predict(prepared))
            .collect::<Result<Vec<_>>>()?;
        let clarity_rows: Vec<&[f64]> = per_model.iter().map(|p| p.clarity.as_slice()).collect();
        let evasion_rows: Vec<&[f64]> = per_model.iter().map(|p| p.evasion.as_slice()).collect();
        let clarity_probs = average_probabilities(&clarity_rows)?;
        let evasion_probs = average_probabilities(&evasion_rows)?;
        Ok(EnsemblePrediction {
            id: prepared.id.clone(),
            clarity: ClarityLabel::ALL[argmax(&clarity_probs)],
            evasion: EvasionLabel::ALL[argmax(&evasion_probs)],
            clarity_probs,
            evasion_probs,
            per_model,
        })
    }

    pub fn predict(&self, instance: &Instance) -> Result<EnsemblePrediction> {
        self.predict_prepared(&self.preprocessor.prepare(instance))
    }

    /// Predictions in input order; instances are processed in parallel.
    pub fn predict_all(&self, instances: &[Instance]) -> Result<Vec<EnsemblePrediction>> {
        instances.par_iter().map(|i| self.predict(i)).collect()
    }
}

pub fn ensemble_predict(instance: &Instance, checkpoints: &[Checkpoint]) -> Result<EnsemblePrediction> {
    Ensemble::new(checkpoints.to_vec())?.predict(instance)
}

pub fn predictions_to_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct SubmissionLine<'a> {
    id: &'a str,
    label: &'a str,
}

/// Minimal `{"id", "label"}` lines for one subtask.
pub fn submission_jsonl<L: Label>(records: &[PredictionRecord], pick: impl Fn(&PredictionRecord) -> L) -> String {
    let mut out = String::new();
    for r in records {
        let line = SubmissionLine {
            id: &r.id,
            label: pick(r).name(),
        };
        out.push_str(&serde_json::to_string(&line).expect("submission serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_predictions(contents: &str) -> Result<Vec<PredictionRecord>> {
    contents
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text)
}

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, predictions_to_jsonl(records)).map_err(|e| Error::io(path, e))
}
