//! Synthetic datasets with known structure, for smoke runs and tests.
//!
//! In a marker dataset each answer is filler text that ends with one marker
//! word; the marker alone determines both labels. Answers are long enough
//! that the marker never falls inside the first window, so a model can only
//! solve the task by looking past chunk 0.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ClarityLabel, EvasionLabel, Instance, Label};

/// Coarse label implied by each evasion leaf.
pub fn clarity_of(evasion: EvasionLabel) -> ClarityLabel {
    use EvasionLabel::*;
    match evasion {
        Explicit => ClarityLabel::ClearReply,
        Dodging | Implicit | General | Deflection | PartialHalfAnswer => ClarityLabel::Ambivalent,
        Clarification | ClaimsIgnorance | DecliningToAnswer => ClarityLabel::ClearNonReply,
    }
}

pub fn marker_word(evasion: EvasionLabel) -> String {
    format!("marker{}", evasion.code())
}

#[derive(Debug, Clone)]
pub struct MarkerConfig {
    pub instances: usize,
    pub filler_vocab: usize,
    /// Answer length range in words, marker included.
    pub min_answer_words: usize,
    pub max_answer_words: usize,
    pub seed: u64,
}

impl Default for MarkerConfig {
    fn default() -> Self {
        Self {
            instances: 300,
            filler_vocab: 12,
            min_answer_words: 24,
            max_answer_words: 40,
            seed: 7,
        }
    }
}

/// Single-label dataset; evasion classes are dealt evenly then shuffled.
pub fn marker_dataset(cfg: &MarkerConfig) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut classes: Vec<EvasionLabel> = (0..cfg.instances)
        .map(|i| EvasionLabel::ALL[i % EvasionLabel::COUNT])
        .collect();
    classes.shuffle(&mut rng);
    classes
        .into_iter()
        .enumerate()
        .map(|(i, evasion)| {
            let words = rng.gen_range(cfg.min_answer_words..=cfg.max_answer_words);
            let mut answer: Vec<String> = (1..words)
                .map(|_| format!("w{}", rng.gen_range(0..cfg.filler_vocab)))
                .collect();
            answer.push(marker_word(evasion));
            let question: Vec<String> = (0..3)
                .map(|_| format!("q{}", rng.gen_range(0..cfg.filler_vocab)))
                .collect();
            Instance {
                id: format!("syn-{i:05}"),
                question: format!("{}?", question.join(" ")),
                answer: answer.join(" "),
                clarity: Some(clarity_of(evasion)),
                evasion: Some(evasion),
                clarity_annotations: None,
                evasion_annotations: None,
            }
        })
        .collect()
}

/// Copies of `instances` with `raters` random annotations per taxonomy. With
/// probability `agreement` an annotator copies the instance's own label,
/// otherwise it draws uniformly.
pub fn annotate(instances: &[Instance], raters: usize, agreement: f64, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    instances
        .iter()
        .map(|inst| {
            let mut out = inst.clone();
            let c = inst.clarity_label().unwrap_or(ClarityLabel::Ambivalent);
            let e = inst.evasion_label().unwrap_or(EvasionLabel::Explicit);
            out.clarity_annotations = Some(
                (0..raters)
                    .map(|_| pick(&mut rng, c, agreement))
                    .collect(),
            );
            out.evasion_annotations = Some(
                (0..raters)
                    .map(|_| pick(&mut rng, e, agreement))
                    .collect(),
            );
            out.clarity = None;
            out.evasion = None;
            out
        })
        .collect()
}

fn pick<L: Label, R: Rng>(rng: &mut R, own: L, agreement: f64) -> L {
    if rng.gen::<f64>() < agreement {
        own
    } else {
        L::ALL[rng.gen_range(0..L::COUNT)]
    }
}
