//! Stratified k-fold training: AdamW with linear warmup/decay, global-norm
//! gradient clipping, per-epoch validation with early stopping, and
//! best-combined-F1 checkpoint selection.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunking::{chunk, ChunkSet, ChunkingConfig};
use crate::dataset::{ClarityLabel, EvasionLabel, Instance, Label};
use crate::encoder::EncoderConfig;
use crate::ensemble::PredictionRecord;
use crate::error::{Error, Result};
use crate::evaluation::{combined_f1, macro_f1};
use crate::model::{
    argmax, inverse_frequency_weights, DropoutConfig, LossConfig, LossKind, ModelConfig, Network,
    Prediction, TaskMode,
};
use crate::tokenization::{Tokenizer, TokenizerConfig, TokenizerSpec};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            batch_size: 8,
            max_epochs: 15,
            patience: 3,
            clip_norm: 1.0,
            seed: 42,
            folds: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
        ];
        for (name, x) in positive {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {x}")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig(format!(
                "warmup_fraction must be in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds must be >= 2, got {}", self.folds)));
        }
        Ok(())
    }
}

/// Every configuration knob that affects a trained model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    /// Defaults to half the encoder window.
    pub stride: Option<usize>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn chunking(&self) -> Result<ChunkingConfig> {
        match self.stride {
            Some(s) => ChunkingConfig::new(self.encoder.max_positions, s),
            None => ChunkingConfig::half_overlap(self.encoder.max_positions),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.chunking()?;
        self.loss.validate()?;
        self.train.validate()?;
        DropoutConfig::train(self.model.dropout).validate()?;
        self.tokenizer.build().map(|_| ())
    }
}

/// Tokenized and chunked instance, ready for the network.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub chunks: ChunkSet,
    pub clarity: Option<ClarityLabel>,
    pub evasion: Option<EvasionLabel>,
}

pub struct Preprocessor {
    tokenizer: Box<dyn Tokenizer>,
    chunking: ChunkingConfig,
}

impl Preprocessor {
    pub fn new(tokenizer: &TokenizerConfig, chunking: ChunkingConfig) -> Result<Self> {
        chunking.validate()?;
        Ok(Self {
            tokenizer: tokenizer.build()?,
            chunking,
        })
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn chunking(&self) -> ChunkingConfig {
        self.chunking
    }

    pub fn prepare(&self, inst: &Instance) -> Prepared {
        let seq = self.tokenizer.tokenize(&inst.id, &inst.formatted());
        Prepared {
            id: inst.id.clone(),
            chunks: chunk(&seq, &self.chunking, self.tokenizer.spec().pad_id),
            clarity: inst.clarity_label(),
            evasion: inst.evasion_label(),
        }
    }

    pub fn prepare_all(&self, instances: &[Instance]) -> Vec<Prepared> {
        instances.par_iter().map(|i| self.prepare(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub base_seed: u64,
    /// Instance id → fold index.
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.base_seed + fold as u64
    }

    /// Indices (into the instance list the plan was built from) of each fold.
    pub fn fold_indices(&self, instances: &[Instance]) -> Vec<Vec<usize>> {
        let mut folds = vec![Vec::new(); self.k];
        for (i, inst) in instances.iter().enumerate() {
            if let Some(&f) = self.assignment.get(&inst.id) {
                folds[f].push(i);
            }
        }
        folds
    }
}

/// Shuffles each clarity class with `seed` and deals it round-robin over the
/// folds. The dealing offset carries over from one class to the next so fold
/// sizes stay balanced too.
pub fn stratified_folds(instances: &[Instance], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k must be >= 2, got {k}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ClarityLabel::COUNT];
    for (i, inst) in instances.iter().enumerate() {
        let label = inst.clarity_label().ok_or_else(|| {
            Error::InvalidInput(format!("instance {:?} has no clarity label", inst.id))
        })?;
        by_class[label.code()].push(i);
    }
    for (code, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::ClassTooSmall {
                class: ClarityLabel::ALL[code].name().to_string(),
                count: members.len(),
                folds: k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    let mut next = 0usize;
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignment.insert(instances[i].id.clone(), next % k);
            next += 1;
        }
    }
    Ok(FoldPlan {
        k,
        base_seed: seed,
        assignment,
    })
}

/// `ceil(fraction * total)`, tolerant of representation error in the
/// product (0.1 * 30 is slightly above 3).
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total_steps as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Linear ramp from 0 to `peak` over the warmup steps, then linear decay to
/// 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    let warm = warmup_steps(total, warmup_fraction);
    if step < warm {
        peak * step as f64 / warm as f64
    } else if warm == total {
        peak
    } else {
        peak * (total - step) as f64 / (total - warm) as f64
    }
}

/// Scales all tensors so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: AsRef<[f64]> + AsMut<[f64]>>(tensors: &mut [T], max_norm: f64) -> f64 {
    let norm = tensors
        .iter()
        .flat_map(|t| t.as_ref().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in tensors.iter_mut() {
            for x in t.as_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: AsRef<[f64]>>(params: &[T], weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.as_ref().len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<P, G>(&mut self, params: &mut [P], grads: &[G], lr: f64)
    where
        P: AsMut<[f64]>,
        G: AsRef<[f64]>,
    {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let p = p.as_mut();
            let g = g.as_ref();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Patience-based early stopping. Improvement is strict, so ties keep the
/// earliest best epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: Option<usize>,
    pub best_score: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_epoch: None,
            best_score: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        let improved = self.best_epoch.is_none() || score > self.best_score;
        if improved {
            self.best_epoch = Some(epoch);
            self.best_score = score;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }
}

/// Replays a score sequence (epochs numbered from 1) through the stopping
/// rule; returns `(epochs run, best epoch)`.
pub fn replay_early_stopping(scores: &[f64], max_epochs: usize, patience: usize) -> (usize, usize) {
    let mut stopper = EarlyStopping::new(patience);
    let mut run = 0;
    for (i, &s) in scores.iter().take(max_epochs).enumerate() {
        run = i + 1;
        if stopper.observe(run, s).stop {
            break;
        }
    }
    (run, stopper.best_epoch.unwrap_or(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_spec: TokenizerSpec,
    pub chunking: ChunkingConfig,
    pub model: ModelConfig,
    pub tasks: TaskMode,
    pub network: Network,
    pub seed: u64,
    pub epoch: usize,
    pub val_combined_f1: f64,
}

impl Checkpoint {
    pub fn width(&self) -> usize {
        self.network.encoder.width
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                ckpt.format_version
            )));
        }
        if ckpt.network.encoder.max_positions != ckpt.chunking.window {
            return Err(Error::Checkpoint(
                "chunk window differs from encoder positions".into(),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn preprocessor(&self) -> Result<Preprocessor> {
        Preprocessor::new(&self.tokenizer, self.chunking)
    }

    pub fn predict(&self, prepared: &Prepared) -> Result<Prediction> {
        self.network.predict(&prepared.chunks, self.model.pooling)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub learning_rate: f64,
    pub val_clarity_f1: f64,
    pub val_evasion_f1: f64,
    pub val_combined_f1: f64,
    pub improved: bool,
}

pub const EPOCH_LOG_HEADER: &str =
    "fold,epoch,train_loss,learning_rate,val_clarity_f1,val_evasion_f1,val_combined_f1,improved";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.fold,
            self.epoch,
            self.train_loss,
            self.learning_rate,
            self.val_clarity_f1,
            self.val_evasion_f1,
            self.val_combined_f1,
            self.improved
        )
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub val_clarity_f1: f64,
    pub val_evasion_f1: f64,
}

/// Macro-F1 of both heads on labelled prepared instances.
pub fn score_predictions(prepared: &[Prepared], preds: &[Prediction]) -> Result<(f64, f64)> {
    let mut gold_c = Vec::with_capacity(prepared.len());
    let mut gold_e = Vec::with_capacity(prepared.len());
    for p in prepared {
        match (p.clarity, p.evasion) {
            (Some(c), Some(e)) => {
                gold_c.push(c.code());
                gold_e.push(e.code());
            }
            _ => {
                return Err(Error::InvalidInput(format!(
                    "validation instance {:?} lacks labels",
                    p.id
                )))
            }
        }
    }
    let pred_c: Vec<usize> = preds.iter().map(|p| argmax(&p.clarity)).collect();
    let pred_e: Vec<usize> = preds.iter().map(|p| argmax(&p.evasion)).collect();
    Ok((
        macro_f1(&gold_c, &pred_c, ClarityLabel::COUNT),
        macro_f1(&gold_e, &pred_e, EvasionLabel::COUNT),
    ))
}

/// Checkpoint-selection score: the combined F1, or the single active
/// head's F1 in a single-task run.
pub fn selection_score(tasks: TaskMode, clarity_f1: f64, evasion_f1: f64) -> f64 {
    match tasks {
        TaskMode::Both => combined_f1(clarity_f1, evasion_f1),
        TaskMode::ClarityOnly => clarity_f1,
        TaskMode::EvasionOnly => evasion_f1,
    }
}

fn labels_of(p: &Prepared) -> Result<(ClarityLabel, EvasionLabel)> {
    match (p.clarity, p.evasion) {
        (Some(c), Some(e)) => Ok((c, e)),
        _ => Err(Error::InvalidInput(format!(
            "training instance {:?} lacks labels",
            p.id
        ))),
    }
}

/// Fills in inverse-frequency weights for a class-weighted loss when the
/// configuration does not pin them.
pub fn resolve_loss_config(cfg: &LossConfig, train: &[Prepared]) -> Result<LossConfig> {
    let mut out = cfg.clone();
    if cfg.kind != LossKind::ClassWeighted {
        return Ok(out);
    }
    let mut cc = vec![0usize; ClarityLabel::COUNT];
    let mut ec = vec![0usize; EvasionLabel::COUNT];
    for p in train {
        let (c, e) = labels_of(p)?;
        cc[c.code()] += 1;
        ec[e.code()] += 1;
    }
    if out.clarity_weights.is_none() && cfg.tasks.clarity() {
        out.clarity_weights = Some(inverse_frequency_weights(&cc)?);
    }
    if out.evasion_weights.is_none() && cfg.tasks.evasion() {
        out.evasion_weights = Some(inverse_frequency_weights(&ec)?);
    }
    Ok(out)
}

pub fn predict_all(network: &Network, model: &ModelConfig, prepared: &[Prepared]) -> Result<Vec<Prediction>> {
    prepared
        .iter()
        .map(|p| network.predict(&p.chunks, model.pooling))
        .collect()
}

/// Trains one fold model and returns the checkpoint with the best
/// validation selection score.
pub fn train_fold(
    fold: usize,
    train: &[Prepared],
    val: &[Prepared],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<FoldOutcome> {
    if val.is_empty() || train.is_empty() {
        return Err(Error::InvalidInput("train and validation sets must be non-empty".into()));
    }
    let tc = &cfg.train;
    let tokenizer = cfg.tokenizer.build()?;
    let vocab = tokenizer.spec().vocab_size;
    let chunking = cfg.chunking()?;
    let loss_cfg = resolve_loss_config(&cfg.loss, train)?;
    let labels: Vec<(ClarityLabel, EvasionLabel)> = train.iter().map(labels_of).collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut network = Network::init(vocab, &cfg.encoder, &mut rng);
    let mut grads = network.zeros_like();
    let mut optimizer = AdamW::new(&network.tensors(), tc.weight_decay);
    let dropout = DropoutConfig::train(cfg.model.dropout);

    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.max_epochs;
    let mut step = 0usize;

    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best: Option<(Network, usize, f64, f64, f64)> = None;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(tc.batch_size) {
            for t in grads.tensors_mut() {
                t.iter_mut().for_each(|x| *x = 0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (c, e) = labels[i];
                let l = network.accumulate_gradients(
                    &train[i].chunks,
                    c,
                    e,
                    &cfg.model,
                    &dropout,
                    &loss_cfg,
                    scale,
                    &mut rng,
                    &mut grads,
                )?;
                if !l.total.is_finite() {
                    return Err(Error::NonFiniteLoss { seed, epoch, step });
                }
                epoch_loss += l.total;
            }
            let mut gt = grads.tensors_mut();
            clip_gradients(&mut gt, tc.clip_norm);
            step += 1;
            lr = lr_at(step, total_steps, tc.learning_rate, tc.warmup_fraction);
            let grads_ref: Vec<&[f64]> = grads.tensors();
            let mut params = network.tensors_mut();
            optimizer.step(&mut params, &grads_ref, lr);
        }
        if !network.all_finite() {
            return Err(Error::NonFiniteLoss { seed, epoch, step });
        }

        let preds = predict_all(&network, &cfg.model, val)?;
        let (f1_c, f1_e) = score_predictions(val, &preds)?;
        let score = selection_score(cfg.loss.tasks, f1_c, f1_e);
        let decision = stopper.observe(epoch, score);
        if decision.improved {
            best = Some((network.clone(), epoch, score, f1_c, f1_e));
        }
        log.push(EpochLog {
            fold,
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            learning_rate: lr,
            val_clarity_f1: f1_c,
            val_evasion_f1: f1_e,
            val_combined_f1: combined_f1(f1_c, f1_e),
            improved: decision.improved,
        });
        if decision.stop {
            break;
        }
    }

    let (net, epoch, _score, f1_c, f1_e) = best.expect("at least one epoch runs");
    Ok(FoldOutcome {
        checkpoint: Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            tokenizer: cfg.tokenizer.clone(),
            tokenizer_spec: tokenizer.spec().clone(),
            chunking,
            model: cfg.model,
            tasks: cfg.loss.tasks,
            network: net,
            seed,
            epoch,
            val_combined_f1: combined_f1(f1_c, f1_e),
        },
        log,
        val_clarity_f1: f1_c,
        val_evasion_f1: f1_e,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Population standard deviation.
pub fn mean_std(xs: &[f64]) -> MeanStd {
    if xs.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub clarity_f1: f64,
    pub evasion_f1: f64,
    pub combined_f1: f64,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub plan: FoldPlan,
    pub checkpoints: Vec<Checkpoint>,
    pub logs: Vec<Vec<EpochLog>>,
    /// Out-of-fold predictions in input order, each tagged with its fold.
    pub oof: Vec<PredictionRecord>,
    pub fold_scores: Vec<FoldScore>,
    pub clarity: MeanStd,
    pub evasion: MeanStd,
}

/// k-fold cross-validation. Folds run in parallel on the current rayon
/// pool; results do not depend on the thread count.
pub fn run_cv(instances: &[Instance], cfg: &PipelineConfig) -> Result<CvResult> {
    cfg.validate()?;
    let k = cfg.train.folds;
    let plan = stratified_folds(instances, k, cfg.train.seed)?;
    let pre = Preprocessor::new(&cfg.tokenizer, cfg.chunking()?)?;
    let prepared = pre.prepare_all(instances);
    let folds = plan.fold_indices(instances);

    let outcomes: Vec<FoldOutcome> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<Prepared> = (0..k)
                .filter(|&g| g != f)
                .flat_map(|g| folds[g].iter().map(|&i| prepared[i].clone()))
                .collect();
            let val: Vec<Prepared> = folds[f].iter().map(|&i| prepared[i].clone()).collect();
            train_fold(f, &train, &val, cfg, plan.fold_seed(f))
        })
        .collect::<Result<_>>()?;

    let mut slots: Vec<Option<PredictionRecord>> = vec![None; instances.len()];
    for (f, outcome) in outcomes.iter().enumerate() {
        for &i in &folds[f] {
            let p = outcome.checkpoint.predict(&prepared[i])?;
            let mut record = PredictionRecord::from_probs(&instances[i].id, p.clarity, p.evasion);
            record.fold = Some(f);
            slots[i] = Some(record);
        }
    }
    let oof: Vec<PredictionRecord> = slots
        .into_iter()
        .map(|s| s.expect("every instance belongs to exactly one fold"))
        .collect();

    let fold_scores: Vec<FoldScore> = outcomes
        .iter()
        .enumerate()
        .map(|(f, o)| FoldScore {
            fold: f,
            seed: o.checkpoint.seed,
            best_epoch: o.checkpoint.epoch,
            clarity_f1: o.val_clarity_f1,
            evasion_f1: o.val_evasion_f1,
            combined_f1: combined_f1(o.val_clarity_f1, o.val_evasion_f1),
        })
        .collect();
    let clarity = mean_std(&fold_scores.iter().map(|s| s.clarity_f1).collect::<Vec<_>>());
    let evasion = mean_std(&fold_scores.iter().map(|s| s.evasion_f1).collect::<Vec<_>>());

    let (checkpoints, logs) = outcomes.into_iter().map(|o| (o.checkpoint, o.log)).unzip();
    Ok(CvResult {
        plan,
        checkpoints,
        logs,
        oof,
        fold_scores,
        clarity,
        evasion,
    })
}
