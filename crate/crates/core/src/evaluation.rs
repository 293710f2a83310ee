//! Metrics and error analysis.
//!
//! Macro-F1 always averages over every class of the taxonomy, absent or
//! not, with 0 substituted for any 0/0. On annotated splits a prediction
//! counts as correct when it matches any annotator; for confusion matrices
//! and F1 counts the instance is then placed at an effective gold label
//! (the prediction itself when correct, otherwise the annotation plurality
//! with ties to the lowest code).

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{plurality, ClarityLabel, EvasionLabel, Instance, Label};
use crate::ensemble::PredictionRecord;
use crate::error::{Error, Result};

pub const MACRO_F1_CONVENTION: &str =
    "unweighted mean over all taxonomy classes, including classes absent from gold; 0/0 counts as 0";

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

pub fn per_class_prf(gold: &[usize], pred: &[usize], k: usize) -> Vec<ClassPrf> {
    let mut tp = vec![0usize; k];
    let mut gold_n = vec![0usize; k];
    let mut pred_n = vec![0usize; k];
    for (&g, &p) in gold.iter().zip(pred) {
        gold_n[g] += 1;
        pred_n[p] += 1;
        if g == p {
            tp[g] += 1;
        }
    }
    (0..k)
        .map(|c| {
            let precision = ratio(tp[c], pred_n[c]);
            let recall = ratio(tp[c], gold_n[c]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassPrf {
                precision,
                recall,
                f1,
                support: gold_n[c],
            }
        })
        .collect()
}

pub fn macro_f1(gold: &[usize], pred: &[usize], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    per_class_prf(gold, pred, k).iter().map(|c| c.f1).sum::<f64>() / k as f64
}

pub fn combined_f1(clarity: f64, evasion: f64) -> f64 {
    (clarity + evasion) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution<L> {
    pub correct: bool,
    pub effective_gold: L,
}

/// Any-annotator scoring. Panics on an empty annotation list, which the
/// loader never produces.
pub fn resolve_any_annotator<L: Label>(pred: L, annotations: &[L]) -> Resolution<L> {
    if annotations.contains(&pred) {
        Resolution {
            correct: true,
            effective_gold: pred,
        }
    } else {
        Resolution {
            correct: false,
            effective_gold: plurality(annotations).expect("non-empty annotation list"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub taxonomy: String,
    pub labels: Vec<String>,
    /// Gold rows, predicted columns.
    pub counts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedConfusion {
    pub rows: Vec<Vec<f64>>,
    /// True where the gold row is empty and the row is all zeros.
    pub empty_rows: Vec<bool>,
}

pub fn confusion(gold: &[usize], pred: &[usize], k: usize) -> ConfusionMatrix {
    let mut counts = vec![vec![0usize; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        counts[g][p] += 1;
    }
    ConfusionMatrix {
        taxonomy: String::new(),
        labels: (0..k).map(|c| c.to_string()).collect(),
        counts,
    }
}

pub fn confusion_for<L: Label>(gold: &[L], pred: &[L]) -> ConfusionMatrix {
    let g: Vec<usize> = gold.iter().map(|l| l.code()).collect();
    let p: Vec<usize> = pred.iter().map(|l| l.code()).collect();
    let mut cm = confusion(&g, &p, L::COUNT);
    cm.taxonomy = L::TAXONOMY.to_string();
    cm.labels = L::ALL.iter().map(|l| l.name().to_string()).collect();
    cm
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn normalized(&self) -> NormalizedConfusion {
        let mut rows = Vec::with_capacity(self.counts.len());
        let mut empty_rows = Vec::with_capacity(self.counts.len());
        for row in &self.counts {
            let n: usize = row.iter().sum();
            empty_rows.push(n == 0);
            rows.push(row.iter().map(|&c| ratio(c, n)).collect());
        }
        NormalizedConfusion { rows, empty_rows }
    }

    pub fn to_csv(&self, normalized: bool) -> String {
        let mut out = String::from("gold\\pred");
        for l in &self.labels {
            let _ = write!(out, ",{}", csv_field(l));
        }
        out.push('\n');
        let norm = self.normalized();
        for (i, label) in self.labels.iter().enumerate() {
            out.push_str(&csv_field(label));
            for j in 0..self.labels.len() {
                if normalized {
                    let _ = write!(out, ",{:.6}", norm.rows[i][j]);
                } else {
                    let _ = write!(out, ",{}", self.counts[i][j]);
                }
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub n: usize,
    pub accuracy: f64,
    /// Mean top probability over every instance of the class.
    pub mean_confidence: f64,
    /// Same mean restricted to misclassified instances; `None` if there are
    /// none.
    pub misclassified_confidence: Option<f64>,
}

pub fn per_class_stats(gold: &[usize], pred: &[usize], confidences: &[f64], k: usize) -> Vec<ClassStat> {
    let mut n = vec![0usize; k];
    let mut correct = vec![0usize; k];
    let mut conf = vec![0.0; k];
    let mut wrong_n = vec![0usize; k];
    let mut wrong_conf = vec![0.0; k];
    for ((&g, &p), &c) in gold.iter().zip(pred).zip(confidences) {
        n[g] += 1;
        conf[g] += c;
        if g == p {
            correct[g] += 1;
        } else {
            wrong_n[g] += 1;
            wrong_conf[g] += c;
        }
    }
    (0..k)
        .map(|c| ClassStat {
            n: n[c],
            accuracy: ratio(correct[c], n[c]),
            mean_confidence: if n[c] == 0 { 0.0 } else { conf[c] / n[c] as f64 },
            misclassified_confidence: (wrong_n[c] > 0).then(|| wrong_conf[c] / wrong_n[c] as f64),
        })
        .collect()
}

/// Chance-corrected agreement over items rated by the same number of raters.
pub fn fleiss_kappa(ratings: &[Vec<usize>], k: usize) -> Result<f64> {
    let n_raters = ratings
        .first()
        .ok_or_else(|| Error::InvalidInput("no items to score".into()))?
        .len();
    if n_raters < 2 {
        return Err(Error::InvalidInput("Fleiss kappa needs at least 2 raters".into()));
    }
    if ratings.iter().any(|r| r.len() != n_raters) {
        return Err(Error::InvalidInput("items have differing rater counts".into()));
    }
    if ratings.iter().flatten().any(|&c| c >= k) {
        return Err(Error::InvalidInput(format!("category code outside 0..{k}")));
    }
    let items = ratings.len() as f64;
    let n = n_raters as f64;
    let mut totals = vec![0usize; k];
    let mut p_bar = 0.0;
    for item in ratings {
        let mut counts = vec![0usize; k];
        for &c in item {
            counts[c] += 1;
            totals[c] += 1;
        }
        let sq: usize = counts.iter().map(|c| c * c).sum();
        p_bar += (sq as f64 - n) / (n * (n - 1.0));
    }
    p_bar /= items;
    let p_e: f64 = totals
        .iter()
        .map(|&t| {
            let p = t as f64 / (items * n);
            p * p
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::UndefinedKappa);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Unanimous,
    TwoOne,
    OneOneOne,
    Other,
}

impl Stratum {
    pub const ALL: [Stratum; 4] = [
        Stratum::Unanimous,
        Stratum::TwoOne,
        Stratum::OneOneOne,
        Stratum::Other,
    ];

    pub fn of<L: Label>(annotations: &[L]) -> Stratum {
        if annotations.len() != 3 {
            return Stratum::Other;
        }
        let mut distinct = annotations.to_vec();
        distinct.sort();
        distinct.dedup();
        match distinct.len() {
            1 => Stratum::Unanimous,
            2 => Stratum::TwoOne,
            _ => Stratum::OneOneOne,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Unanimous => "unanimous",
            Stratum::TwoOne => "2-1 split",
            Stratum::OneOneOne => "1-1-1",
            Stratum::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    /// `None` for the all-instances row.
    pub stratum: Option<Stratum>,
    pub n: usize,
    /// Evasion prediction equals the annotation plurality.
    pub majority_vote: Option<f64>,
    /// Evasion prediction matches some annotator.
    pub any_annotator: Option<f64>,
    /// Clarity any-annotator accuracy.
    pub clarity_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataReport {
    pub strata: Vec<StratumStats>,
    pub overall: StratumStats,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    n: usize,
    majority: usize,
    any: usize,
    clarity: usize,
}

impl Tally {
    fn stats(self, stratum: Option<Stratum>) -> StratumStats {
        let rate = |x: usize| (self.n > 0).then(|| x as f64 / self.n as f64);
        StratumStats {
            stratum,
            n: self.n,
            majority_vote: rate(self.majority),
            any_annotator: rate(self.any),
            clarity_accuracy: rate(self.clarity),
        }
    }
}

/// Accuracies split by how strongly the evasion annotators agreed.
/// Instances without evasion annotations are skipped.
pub fn agreement_strata(instances: &[Instance], predictions: &[PredictionRecord]) -> Result<StrataReport> {
    let by_id = index_predictions(predictions);
    let mut tallies: HashMap<Stratum, Tally> = HashMap::new();
    let mut overall = Tally::default();
    for inst in instances {
        let Some(annotations) = inst.evasion_annotations.as_deref() else {
            continue;
        };
        let pred = lookup(&by_id, &inst.id)?;
        let stratum = Stratum::of(annotations);
        let majority = plurality(annotations) == Some(pred.evasion);
        let any = annotations.contains(&pred.evasion);
        let clarity = match (&inst.clarity_annotations, inst.clarity) {
            (Some(a), _) => a.contains(&pred.clarity),
            (None, Some(c)) => c == pred.clarity,
            (None, None) => false,
        };
        for t in [tallies.entry(stratum).or_default(), &mut overall] {
            t.n += 1;
            t.majority += usize::from(majority);
            t.any += usize::from(any);
            t.clarity += usize::from(clarity);
        }
    }
    Ok(StrataReport {
        strata: Stratum::ALL
            .iter()
            .map(|&s| tallies.get(&s).copied().unwrap_or_default().stats(Some(s)))
            .collect(),
        overall: overall.stats(None),
    })
}

fn index_predictions(predictions: &[PredictionRecord]) -> HashMap<&str, &PredictionRecord> {
    predictions.iter().map(|p| (p.id.as_str(), p)).collect()
}

fn lookup<'a>(by_id: &HashMap<&str, &'a PredictionRecord>, id: &str) -> Result<&'a PredictionRecord> {
    by_id
        .get(id)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("no prediction for id {id:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub n: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub misclassified_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassReport>,
    pub confusion: ConfusionMatrix,
    pub normalized_confusion: NormalizedConfusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub scoring: String,
    pub macro_f1_convention: String,
    pub clarity: TaskReport,
    pub evasion: TaskReport,
    pub combined_f1: f64,
    pub strata: Option<StrataReport>,
    pub fleiss_kappa_clarity: Option<f64>,
    pub fleiss_kappa_evasion: Option<f64>,
}

/// Gold side of one instance for one taxonomy: a single label or an
/// annotation list.
fn score_one<L: Label>(pred: L, single: Option<L>, annotations: Option<&[L]>) -> Option<Resolution<L>> {
    match (annotations, single) {
        (Some(a), _) if !a.is_empty() => Some(resolve_any_annotator(pred, a)),
        (_, Some(g)) => Some(Resolution {
            correct: g == pred,
            effective_gold: g,
        }),
        _ => None,
    }
}

fn task_report<L: Label>(gold: &[L], pred: &[L], correct: &[bool], confidence: &[f64]) -> TaskReport {
    let g: Vec<usize> = gold.iter().map(|l| l.code()).collect();
    let p: Vec<usize> = pred.iter().map(|l| l.code()).collect();
    let prf = per_class_prf(&g, &p, L::COUNT);
    let stats = per_class_stats(&g, &p, confidence, L::COUNT);
    let confusion = confusion_for(gold, pred);
    TaskReport {
        macro_f1: macro_f1(&g, &p, L::COUNT),
        accuracy: ratio(correct.iter().filter(|&&c| c).count(), correct.len()),
        per_class: L::ALL
            .iter()
            .zip(prf.iter().zip(&stats))
            .map(|(l, (m, s))| ClassReport {
                label: l.name().to_string(),
                n: s.n,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                accuracy: s.accuracy,
                mean_confidence: s.mean_confidence,
                misclassified_confidence: s.misclassified_confidence,
            })
            .collect(),
        normalized_confusion: confusion.normalized(),
        confusion,
    }
}

fn kappa_of<L: Label>(lists: Vec<&[L]>) -> Option<f64> {
    if lists.is_empty() {
        return None;
    }
    let codes: Vec<Vec<usize>> = lists
        .iter()
        .map(|l| l.iter().map(|x| x.code()).collect())
        .collect();
    fleiss_kappa(&codes, L::COUNT).ok()
}

/// Scores predictions against gold instances (single-label or annotated).
pub fn evaluate(gold: &[Instance], predictions: &[PredictionRecord]) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::InvalidInput("no gold instances".into()));
    }
    let by_id = index_predictions(predictions);
    let n = gold.len();
    let (mut gc, mut pc, mut okc, mut confc) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut ge, mut pe, mut oke, mut confe) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut annotated = false;
    for inst in gold {
        let pred = lookup(&by_id, &inst.id)?;
        annotated |= inst.is_annotated();
        let rc = score_one(pred.clarity, inst.clarity, inst.clarity_annotations.as_deref())
            .ok_or_else(|| Error::InvalidInput(format!("gold {:?} has no clarity label", inst.id)))?;
        let re = score_one(pred.evasion, inst.evasion, inst.evasion_annotations.as_deref())
            .ok_or_else(|| Error::InvalidInput(format!("gold {:?} has no evasion label", inst.id)))?;
        gc.push(rc.effective_gold);
        pc.push(pred.clarity);
        okc.push(rc.correct);
        confc.push(pred.clarity_confidence());
        ge.push(re.effective_gold);
        pe.push(pred.evasion);
        oke.push(re.correct);
        confe.push(pred.evasion_confidence());
    }
    let clarity = task_report::<ClarityLabel>(&gc, &pc, &okc, &confc);
    let evasion = task_report::<EvasionLabel>(&ge, &pe, &oke, &confe);
    let strata = if annotated {
        Some(agreement_strata(gold, predictions)?)
    } else {
        None
    };
    Ok(EvalReport {
        instances: n,
        scoring: if annotated { "any_annotator" } else { "single_label" }.to_string(),
        macro_f1_convention: MACRO_F1_CONVENTION.to_string(),
        combined_f1: combined_f1(clarity.macro_f1, evasion.macro_f1),
        clarity,
        evasion,
        strata,
        fleiss_kappa_clarity: kappa_of(gold.iter().filter_map(|i| i.clarity_annotations.as_deref()).collect()),
        fleiss_kappa_evasion: kappa_of(gold.iter().filter_map(|i| i.evasion_annotations.as_deref()).collect()),
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn render_task(out: &mut String, title: &str, t: &TaskReport) {
    let _ = writeln!(out, "{title}: Macro-F1 {:.4}  accuracy {:.4}", t.macro_f1, t.accuracy);
    let _ = writeln!(
        out,
        "  {:<22} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>8}",
        "class", "n", "P", "R", "F1", "Acc", "Conf", "ErrConf"
    );
    for c in &t.per_class {
        let _ = writeln!(
            out,
            "  {:<22} {:>6} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>8}",
            c.label,
            c.n,
            c.precision,
            c.recall,
            c.f1,
            c.accuracy,
            c.mean_confidence,
            opt(c.misclassified_confidence)
        );
    }
}

/// Aligned plain-text rendering of a report.
pub fn render_text(r: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "instances: {}  scoring: {}", r.instances, r.scoring);
    let _ = writeln!(out, "macro-F1 convention: {}", r.macro_f1_convention);
    let _ = writeln!(out, "combined F1: {:.4}", r.combined_f1);
    out.push('\n');
    render_task(&mut out, "Clarity", &r.clarity);
    out.push('\n');
    render_task(&mut out, "Evasion", &r.evasion);
    if let Some(s) = &r.strata {
        out.push('\n');
        let _ = writeln!(
            out,
            "  {:<12} {:>6} {:>10} {:>10} {:>10}",
            "stratum", "n", "majority", "any", "clarity"
        );
        for st in s.strata.iter().chain([&s.overall]).map(|x| (x.stratum.map_or("overall", Stratum::name), x)) {
            let _ = writeln!(
                out,
                "  {:<12} {:>6} {:>10} {:>10} {:>10}",
                st.0,
                st.1.n,
                opt(st.1.majority_vote),
                opt(st.1.any_annotator),
                opt(st.1.clarity_accuracy)
            );
        }
    }
    if r.fleiss_kappa_clarity.is_some() || r.fleiss_kappa_evasion.is_some() {
        out.push('\n');
        let _ = writeln!(
            out,
            "Fleiss kappa: clarity {}  evasion {}",
            opt(r.fleiss_kappa_clarity),
            opt(r.fleiss_kappa_evasion)
        );
    }
    out
}
