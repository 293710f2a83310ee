//! Line-delimited JSON ingestion, validation and summaries.
//!
//! Train records carry single `clarity` / `evasion` labels. Annotated
//! (dev/test) records carry non-empty `clarity_annotations` /
//! `evasion_annotations` lists and may also carry an adjudicated single
//! label, which is stored but never used for scoring.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tokenization::{format_input, Tokenizer};

/// A closed label set with stable integer codes.
pub trait Label: Copy + Eq + Ord + fmt::Debug + Send + Sync + 'static {
    const COUNT: usize;
    const TAXONOMY: &'static str;
    const ALL: &'static [Self];

    fn code(self) -> usize;
    fn name(self) -> &'static str;

    fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    /// Exact match after trimming surrounding whitespace.
    fn from_name(name: &str) -> Option<Self> {
        let name = name.trim();
        Self::ALL.iter().copied().find(|l| l.name() == name)
    }
}

macro_rules! taxonomy {
    ($(#[$meta:meta])* $ty:ident, $tax:literal, { $($variant:ident => $name:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $ty {
            $($variant),+
        }

        impl Label for $ty {
            const COUNT: usize = [$($ty::$variant),+].len();
            const TAXONOMY: &'static str = $tax;
            const ALL: &'static [Self] = &[$($ty::$variant),+];

            fn code(self) -> usize {
                self as usize
            }

            fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                <$ty as Label>::from_name(&s).ok_or_else(|| {
                    serde::de::Error::custom(format!("unknown {} label {:?}", $tax, s))
                })
            }
        }
    };
}

taxonomy!(
    /// Coarse 3-way label.
    ClarityLabel, "clarity", {
        ClearReply => "Clear Reply",
        ClearNonReply => "Clear Non-Reply",
        Ambivalent => "Ambivalent",
    }
);

taxonomy!(
    /// Fine-grained 9-way evasion strategy.
    EvasionLabel, "evasion", {
        Explicit => "Explicit",
        Dodging => "Dodging",
        Implicit => "Implicit",
        General => "General",
        Deflection => "Deflection",
        PartialHalfAnswer => "Partial/half-answer",
        Clarification => "Clarification",
        ClaimsIgnorance => "Claims ignorance",
        DecliningToAnswer => "Declining to answer",
    }
);

/// Most frequent label; ties go to the lowest class code.
pub fn plurality<L: Label>(labels: &[L]) -> Option<L> {
    let mut counts = vec![0usize; L::COUNT];
    for l in labels {
        counts[l.code()] += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (code, &c) in counts.iter().enumerate() {
        if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
            best = Some((code, c));
        }
    }
    best.and_then(|(code, _)| L::from_code(code))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clarity: Option<ClarityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evasion: Option<EvasionLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clarity_annotations: Option<Vec<ClarityLabel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evasion_annotations: Option<Vec<EvasionLabel>>,
}

impl Instance {
    pub fn formatted(&self) -> String {
        format_input(&self.question, &self.answer)
    }

    /// Single label if present, otherwise the annotation plurality.
    pub fn clarity_label(&self) -> Option<ClarityLabel> {
        self.clarity
            .or_else(|| self.clarity_annotations.as_deref().and_then(plurality))
    }

    pub fn evasion_label(&self) -> Option<EvasionLabel> {
        self.evasion
            .or_else(|| self.evasion_annotations.as_deref().and_then(plurality))
    }

    pub fn is_annotated(&self) -> bool {
        self.clarity_annotations.is_some() || self.evasion_annotations.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Single gold labels required.
    Train,
    /// Non-empty annotator label lists required.
    Annotated,
    /// Blind split: labels optional and validated only when present.
    Unlabeled,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Annotated => "annotated",
            SplitKind::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    question: Option<String>,
    answer: Option<String>,
    clarity: Option<String>,
    evasion: Option<String>,
    clarity_annotations: Option<Vec<String>>,
    evasion_annotations: Option<Vec<String>>,
}

fn parse_label<L: Label>(line: usize, token: &str) -> Result<L> {
    L::from_name(token).ok_or_else(|| Error::UnknownLabel {
        line,
        taxonomy: L::TAXONOMY,
        token: token.to_string(),
    })
}

fn parse_list<L: Label>(
    line: usize,
    field: &'static str,
    raw: Option<Vec<String>>,
    required: bool,
) -> Result<Option<Vec<L>>> {
    match raw {
        None if required => Err(Error::MissingField { line, field }),
        None => Ok(None),
        Some(list) if list.is_empty() => Err(Error::EmptyField { line, field }),
        Some(list) => list
            .iter()
            .map(|t| parse_label::<L>(line, t))
            .collect::<Result<Vec<_>>>()
            .map(Some),
    }
}

fn required_text(line: usize, field: &'static str, value: Option<String>) -> Result<String> {
    let value = value.ok_or(Error::MissingField { line, field })?;
    if value.trim().is_empty() {
        return Err(Error::EmptyField { line, field });
    }
    Ok(value)
}

/// Parses and validates one record. `line` is 1-based and only used for
/// error reporting.
pub fn parse_record(line: usize, text: &str, kind: SplitKind) -> Result<Instance> {
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| Error::MalformedRecord {
        line,
        message: e.to_string(),
    })?;

    let id = required_text(line, "id", raw.id)?;
    let question = required_text(line, "question", raw.question)?;
    let answer = required_text(line, "answer", raw.answer)?;

    let single_required = kind == SplitKind::Train;
    let clarity = match raw.clarity {
        Some(t) => Some(parse_label::<ClarityLabel>(line, &t)?),
        None if single_required => return Err(Error::MissingField { line, field: "clarity" }),
        None => None,
    };
    let evasion = match raw.evasion {
        Some(t) => Some(parse_label::<EvasionLabel>(line, &t)?),
        None if single_required => return Err(Error::MissingField { line, field: "evasion" }),
        None => None,
    };

    let lists_required = kind == SplitKind::Annotated;
    let clarity_annotations = parse_list::<ClarityLabel>(
        line,
        "clarity_annotations",
        raw.clarity_annotations,
        lists_required,
    )?;
    let evasion_annotations = parse_list::<EvasionLabel>(
        line,
        "evasion_annotations",
        raw.evasion_annotations,
        lists_required,
    )?;

    Ok(Instance {
        id,
        question,
        answer,
        clarity,
        evasion,
        clarity_annotations,
        evasion_annotations,
    })
}

/// Parses line-delimited JSON from memory. Blank lines are skipped; ids must
/// be unique.
pub fn parse_dataset(contents: &str, kind: SplitKind) -> Result<Vec<Instance>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, text) in contents.lines().enumerate() {
        let line = idx + 1;
        if text.trim().is_empty() {
            continue;
        }
        let inst = parse_record(line, text, kind)?;
        if !seen.insert(inst.id.clone()) {
            return Err(Error::DuplicateId { line, id: inst.id });
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>, kind: SplitKind) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let contents = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&contents, kind)
}

/// Guesses the split kind from the first record: annotation lists mean
/// annotated, single labels mean train, neither means unlabeled.
pub fn detect_split_kind(contents: &str) -> SplitKind {
    let first = contents.lines().find(|l| !l.trim().is_empty());
    let Some(Ok(value)) = first.map(serde_json::from_str::<serde_json::Value>) else {
        return SplitKind::Unlabeled;
    };
    if value.get("clarity_annotations").is_some() || value.get("evasion_annotations").is_some() {
        SplitKind::Annotated
    } else if value.get("clarity").is_some() && value.get("evasion").is_some() {
        SplitKind::Train
    } else {
        SplitKind::Unlabeled
    }
}

pub fn to_jsonl(instances: &[Instance]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(instances).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCount {
    pub label: &'static str,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lower: usize,
    pub upper: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub split: String,
    pub instances: usize,
    pub clarity: Vec<ClassCount>,
    pub evasion: Vec<ClassCount>,
    pub token_lengths: Vec<usize>,
    pub histogram: Vec<HistogramBin>,
    pub token_budget: usize,
    pub exceed_fraction: f64,
}

pub fn class_counts<L: Label>(labels: impl IntoIterator<Item = L>) -> Vec<ClassCount> {
    let mut counts = vec![0usize; L::COUNT];
    for l in labels {
        counts[l.code()] += 1;
    }
    let total: usize = counts.iter().sum();
    L::ALL
        .iter()
        .zip(counts)
        .map(|(l, count)| ClassCount {
            label: l.name(),
            count,
            fraction: if total == 0 {
                0.0
            } else {
                count as f64 / total as f64
            },
        })
        .collect()
}

/// Fixed-width histogram over `lengths`; bin `i` covers `[i*w, (i+1)*w)`.
pub fn histogram(lengths: &[usize], bin_width: usize) -> Vec<HistogramBin> {
    let bin_width = bin_width.max(1);
    let Some(&max) = lengths.iter().max() else {
        return Vec::new();
    };
    let mut bins: Vec<HistogramBin> = (0..=max / bin_width)
        .map(|i| HistogramBin {
            lower: i * bin_width,
            upper: (i + 1) * bin_width,
            count: 0,
        })
        .collect();
    for &len in lengths {
        bins[len / bin_width].count += 1;
    }
    bins
}

/// Fraction of lengths strictly greater than `budget`; 0 for empty input.
pub fn exceed_fraction(lengths: &[usize], budget: usize) -> f64 {
    if lengths.is_empty() {
        return 0.0;
    }
    lengths.iter().filter(|&&l| l > budget).count() as f64 / lengths.len() as f64
}

pub fn summarize(
    split: &str,
    instances: &[Instance],
    tokenizer: &dyn Tokenizer,
    token_budget: usize,
    bin_width: usize,
) -> DatasetSummary {
    let token_lengths: Vec<usize> = instances
        .iter()
        .map(|inst| tokenizer.tokenize(&inst.id, &inst.formatted()).len())
        .collect();
    DatasetSummary {
        split: split.to_string(),
        instances: instances.len(),
        clarity: class_counts(instances.iter().filter_map(Instance::clarity_label)),
        evasion: class_counts(instances.iter().filter_map(Instance::evasion_label)),
        histogram: histogram(&token_lengths, bin_width),
        exceed_fraction: exceed_fraction(&token_lengths, token_budget),
        token_lengths,
        token_budget,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRAIN_LINE: &str = r#"{"id":"1","question":"Q?","answer":"A.","clarity":"Ambivalent","evasion":"Dodging"}"#;
    const DEV_LINE: &str = r#"{"id":"d1","question":"Q?","answer":"A.","clarity_annotations":["Clear Reply","Ambivalent","Ambivalent"],"evasion_annotations":["Explicit","General","General"]}"#;

    #[test]
    fn codes_round_trip() {
        assert_eq!(ClarityLabel::COUNT, 3);
        assert_eq!(EvasionLabel::COUNT, 9);
        for &l in ClarityLabel::ALL {
            assert_eq!(ClarityLabel::from_code(l.code()), Some(l));
            assert_eq!(ClarityLabel::from_name(l.name()), Some(l));
        }
        for &l in EvasionLabel::ALL {
            assert_eq!(EvasionLabel::from_code(l.code()), Some(l));
            assert_eq!(EvasionLabel::from_name(l.name()), Some(l));
        }
        assert_eq!(ClarityLabel::ClearNonReply.code(), 1);
        assert_eq!(EvasionLabel::DecliningToAnswer.code(), 8);
        assert_eq!(EvasionLabel::from_name("  Partial/half-answer "), Some(EvasionLabel::PartialHalfAnswer));
        assert_eq!(ClarityLabel::from_code(3), None);
    }

    #[test]
    fn parses_train_and_annotated() {
        let train = parse_dataset(TRAIN_LINE, SplitKind::Train).unwrap();
        assert_eq!(train[0].clarity, Some(ClarityLabel::Ambivalent));
        assert_eq!(train[0].evasion, Some(EvasionLabel::Dodging));

        let dev = parse_dataset(DEV_LINE, SplitKind::Annotated).unwrap();
        assert_eq!(dev[0].clarity_annotations.as_ref().unwrap().len(), 3);
        assert_eq!(dev[0].clarity_label(), Some(ClarityLabel::Ambivalent));
        assert_eq!(dev[0].evasion_label(), Some(EvasionLabel::General));
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_dataset("", SplitKind::Train).unwrap().is_empty());
        assert!(parse_dataset("\n\n", SplitKind::Annotated).unwrap().is_empty());
    }

    #[test]
    fn misspelled_label_names_line_and_token() {
        let text = format!("{TRAIN_LINE}\n{}", TRAIN_LINE.replace("\"1\"", "\"2\"").replace("Ambivalent", "Ambivalentt"));
        let err = parse_dataset(&text, SplitKind::Train).unwrap_err();
        match &err {
            Error::UnknownLabel { line, token, .. } => {
                assert_eq!(*line, 2);
                assert_eq!(token, "Ambivalentt");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("Ambivalentt"));
    }

    #[test]
    fn validation_errors() {
        let empty_list = DEV_LINE.replace(r#"["Clear Reply","Ambivalent","Ambivalent"]"#, "[]");
        assert!(matches!(
            parse_dataset(&empty_list, SplitKind::Annotated),
            Err(Error::EmptyField { field: "clarity_annotations", .. })
        ));
        assert!(matches!(
            parse_dataset(TRAIN_LINE, SplitKind::Annotated),
            Err(Error::MissingField { .. })
        ));
        assert!(matches!(
            parse_dataset(DEV_LINE, SplitKind::Train),
            Err(Error::MissingField { field: "clarity", .. })
        ));
        let blank_answer = TRAIN_LINE.replace("\"A.\"", "\"  \"");
        assert!(matches!(
            parse_dataset(&blank_answer, SplitKind::Train),
            Err(Error::EmptyField { field: "answer", .. })
        ));
        assert!(matches!(
            parse_dataset("{not json", SplitKind::Train),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
        let dup = format!("{TRAIN_LINE}\n{TRAIN_LINE}");
        assert!(matches!(
            parse_dataset(&dup, SplitKind::Train),
            Err(Error::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn adjudicated_label_kept_on_annotated_split() {
        let line = DEV_LINE.replace(r#""answer":"A.","#, r#""answer":"A.","clarity":"Clear Reply","#);
        let dev = parse_dataset(&line, SplitKind::Annotated).unwrap();
        assert_eq!(dev[0].clarity, Some(ClarityLabel::ClearReply));
    }

    #[test]
    fn split_detection() {
        assert_eq!(detect_split_kind(TRAIN_LINE), SplitKind::Train);
        assert_eq!(detect_split_kind(DEV_LINE), SplitKind::Annotated);
        assert_eq!(detect_split_kind(r#"{"id":"1","question":"q","answer":"a"}"#), SplitKind::Unlabeled);
    }

    #[test]
    fn plurality_ties_to_lowest_code() {
        use ClarityLabel::*;
        assert_eq!(plurality(&[Ambivalent, ClearReply, Ambivalent]), Some(Ambivalent));
        assert_eq!(plurality(&[Ambivalent, ClearNonReply]), Some(ClearNonReply));
        assert_eq!(plurality::<ClarityLabel>(&[]), None);
    }

    #[test]
    fn exceed_fraction_counts_strictly_above() {
        assert_eq!(exceed_fraction(&[300, 600], 512), 0.5);
        assert_eq!(exceed_fraction(&[10, 20, 512], 512), 0.0);
        assert_eq!(exceed_fraction(&[], 512), 0.0);
    }

    #[test]
    fn histogram_bins() {
        let bins = histogram(&[0, 5, 10, 25], 10);
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 1, 1]);
        assert_eq!(bins[2].lower, 20);
    }
}
