//! Chunk pooling, dropout, the two classification heads and their losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chunking::ChunkSet;
use crate::dataset::{ClarityLabel, EvasionLabel, Label};
use crate::encoder::{EncoderConfig, Position0Cache, ToyEncoder, INIT_RANGE};
use crate::error::{Error, Result};

pub const CLARITY_CLASSES: usize = ClarityLabel::COUNT;
pub const EVASION_CLASSES: usize = EvasionLabel::COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    #[default]
    Max,
    Mean,
    FirstChunk,
}

impl PoolingStrategy {
    pub const ALL: [PoolingStrategy; 3] = [
        PoolingStrategy::Max,
        PoolingStrategy::Mean,
        PoolingStrategy::FirstChunk,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            PoolingStrategy::Max => "Max-Pooling",
            PoolingStrategy::Mean => "Mean Pooling",
            PoolingStrategy::FirstChunk => "First Chunk Only",
        }
    }
}

/// Which chunk fed each output coordinate, for routing gradients back.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolTrace {
    /// Winning chunk per coordinate; ties go to the lowest chunk index.
    Max(Vec<usize>),
    Mean(usize),
    First,
}

fn check_widths(hs: &[Vec<f64>]) -> Result<usize> {
    let first = hs.first().ok_or(Error::EmptyChunkList)?;
    let d = first.len();
    if hs.iter().any(|h| h.len() != d) {
        return Err(Error::Shape("chunk vectors differ in width".into()));
    }
    Ok(d)
}

pub fn pool(hs: &[Vec<f64>], strategy: PoolingStrategy) -> Result<Vec<f64>> {
    pool_with_trace(hs, strategy).map(|(v, _)| v)
}

pub fn pool_with_trace(hs: &[Vec<f64>], strategy: PoolingStrategy) -> Result<(Vec<f64>, PoolTrace)> {
    let d = check_widths(hs)?;
    Ok(match strategy {
        PoolingStrategy::Max => {
            let mut v = hs[0].clone();
            let mut winner = vec![0usize; d];
            for (k, h) in hs.iter().enumerate().skip(1) {
                for j in 0..d {
                    if h[j] > v[j] {
                        v[j] = h[j];
                        winner[j] = k;
                    }
                }
            }
            (v, PoolTrace::Max(winner))
        }
        PoolingStrategy::Mean => {
            let mut v = vec![0.0; d];
            for h in hs {
                for (vj, hj) in v.iter_mut().zip(h) {
                    *vj += hj;
                }
            }
            let m = hs.len() as f64;
            for vj in v.iter_mut() {
                *vj /= m;
            }
            (v, PoolTrace::Mean(hs.len()))
        }
        PoolingStrategy::FirstChunk => (hs[0].clone(), PoolTrace::First),
    })
}

/// Gradient with respect to each chunk vector given the gradient of the
/// pooled vector.
pub fn pool_backward(trace: &PoolTrace, grad_v: &[f64], chunks: usize) -> Vec<Vec<f64>> {
    let d = grad_v.len();
    let mut out = vec![vec![0.0; d]; chunks];
    match trace {
        PoolTrace::Max(winner) => {
            for (j, &k) in winner.iter().enumerate() {
                out[k][j] = grad_v[j];
            }
        }
        PoolTrace::Mean(m) => {
            let m = *m as f64;
            for row in out.iter_mut() {
                for (r, g) in row.iter_mut().zip(grad_v) {
                    *r = g / m;
                }
            }
        }
        PoolTrace::First => out[0].copy_from_slice(grad_v),
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub width: usize,
    /// `3 x width`
    pub clarity_weights: Vec<f64>,
    pub clarity_bias: Vec<f64>,
    /// `9 x width`
    pub evasion_weights: Vec<f64>,
    pub evasion_bias: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(width: usize) -> Self {
        Self {
            width,
            clarity_weights: vec![0.0; CLARITY_CLASSES * width],
            clarity_bias: vec![0.0; CLARITY_CLASSES],
            evasion_weights: vec![0.0; EVASION_CLASSES * width],
            evasion_bias: vec![0.0; EVASION_CLASSES],
        }
    }

    /// Uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let mut heads = Self::zeros(width);
        for w in heads
            .clarity_weights
            .iter_mut()
            .chain(heads.evasion_weights.iter_mut())
        {
            *w = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
        }
        heads
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            &self.clarity_weights,
            &self.clarity_bias,
            &self.evasion_weights,
            &self.evasion_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.clarity_weights,
            &mut self.clarity_bias,
            &mut self.evasion_weights,
            &mut self.evasion_bias,
        ]
    }
}

fn affine(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    bias.iter()
        .enumerate()
        .map(|(i, b)| {
            weights[i * d..(i + 1) * d]
                .iter()
                .zip(x)
                .fold(*b, |acc, (w, xi)| acc + w * xi)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub rate: f64,
    pub mode: DropoutMode,
}

impl DropoutConfig {
    pub fn train(rate: f64) -> Self {
        Self {
            rate,
            mode: DropoutMode::Train,
        }
    }

    pub fn eval() -> Self {
        Self {
            rate: 0.0,
            mode: DropoutMode::Eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must be in [0, 1), got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Logits of both heads plus the per-coordinate dropout multipliers
/// (0 or `1/(1-p)`, all 1 in eval mode).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub clarity_logits: Vec<f64>,
    pub evasion_logits: Vec<f64>,
    pub dropout_scale: Vec<f64>,
    pub dropped: Vec<f64>,
}

/// Inverted dropout shared by both heads, then one linear layer per head.
pub fn forward<R: Rng + ?Sized>(
    v: &[f64],
    heads: &HeadParams,
    dropout: &DropoutConfig,
    rng: &mut R,
) -> HeadOutput {
    let dropout_scale: Vec<f64> = match dropout.mode {
        DropoutMode::Train if dropout.rate > 0.0 => {
            let keep = 1.0 / (1.0 - dropout.rate);
            v.iter()
                .map(|_| if rng.gen::<f64>() < dropout.rate { 0.0 } else { keep })
                .collect()
        }
        _ => vec![1.0; v.len()],
    };
    let dropped: Vec<f64> = v.iter().zip(&dropout_scale).map(|(x, s)| x * s).collect();
    HeadOutput {
        clarity_logits: affine(&heads.clarity_weights, &heads.clarity_bias, &dropped),
        evasion_logits: affine(&heads.evasion_weights, &heads.evasion_bias, &dropped),
        dropout_scale,
        dropped,
    }
}

/// Accumulates head gradients and returns the gradient with respect to the
/// pooled vector (before dropout).
pub fn heads_backward(
    heads: &HeadParams,
    out: &HeadOutput,
    grad_clarity: &[f64],
    grad_evasion: &[f64],
    grads: &mut HeadParams,
) -> Vec<f64> {
    let d = heads.width;
    let mut grad_dropped = vec![0.0; d];
    let mut one_head = |w: &[f64], gw: &mut [f64], gb: &mut [f64], g: &[f64]| {
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            gb[i] += gi;
            for j in 0..d {
                gw[i * d + j] += gi * out.dropped[j];
                grad_dropped[j] += gi * w[i * d + j];
            }
        }
    };
    one_head(
        &heads.clarity_weights,
        &mut grads.clarity_weights,
        &mut grads.clarity_bias,
        grad_clarity,
    );
    one_head(
        &heads.evasion_weights,
        &mut grads.evasion_weights,
        &mut grads.evasion_bias,
        grad_evasion,
    );
    grad_dropped
        .iter()
        .zip(&out.dropout_scale)
        .map(|(g, s)| g * s)
        .collect()
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Softmax with the maximum subtracted first.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let m = max_of(logits);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_probabilities(logits: &[f64]) -> Vec<f64> {
    let m = max_of(logits);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    ClassWeighted,
    Focal,
}

/// Which heads contribute to the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Both,
    ClarityOnly,
    EvasionOnly,
}

impl TaskMode {
    pub fn clarity(self) -> bool {
        self != TaskMode::EvasionOnly
    }

    pub fn evasion(self) -> bool {
        self != TaskMode::ClarityOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub focal_gamma: f64,
    /// Per-class weights for the clarity head. When `kind` is
    /// `ClassWeighted` and this is absent, inverse-frequency weights are
    /// computed from the training fold.
    pub clarity_weights: Option<Vec<f64>>,
    pub evasion_weights: Option<Vec<f64>>,
    pub tasks: TaskMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            focal_gamma: 2.0,
            clarity_weights: None,
            evasion_weights: None,
            tasks: TaskMode::Both,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "focal gamma must be finite and >= 0, got {}",
                self.focal_gamma
            )));
        }
        for (name, w, k) in [
            ("clarity", &self.clarity_weights, CLARITY_CLASSES),
            ("evasion", &self.evasion_weights, EVASION_CLASSES),
        ] {
            if let Some(w) = w {
                if w.len() != k || w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                    return Err(Error::InvalidConfig(format!(
                        "{name} class weights must be {k} positive finite values"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Loss of one head and its gradient with respect to the logits.
pub fn head_loss(logits: &[f64], gold: usize, kind: LossKind, gamma: f64, weight: f64) -> (f64, Vec<f64>) {
    let log_p = log_probabilities(logits);
    let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    let lp = log_p[gold];
    let pg = p[gold];
    // Softmax Jacobian contracted with a scalar dL/dz_gold-style factor:
    // dL/dz_j = coeff * (p_j - [j == gold]).
    let (loss, coeff) = match kind {
        LossKind::CrossEntropy => (-lp, 1.0),
        LossKind::ClassWeighted => (-weight * lp, weight),
        LossKind::Focal => {
            let q = 1.0 - pg;
            let modulator = q.powf(gamma);
            let loss = -modulator * lp;
            // dL/dp_g = gamma q^(gamma-1) log p_g - q^gamma / p_g, and
            // dp_g/dz_j = p_g ([j == gold] - p_j).
            let skew = if gamma == 0.0 || q == 0.0 {
                0.0
            } else {
                gamma * q.powf(gamma - 1.0) * lp * pg
            };
            (loss, modulator - skew)
        }
    };
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| coeff * (pj - if j == gold { 1.0 } else { 0.0 }))
        .collect();
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub clarity: f64,
    pub evasion: f64,
    pub grad_clarity: Vec<f64>,
    pub grad_evasion: Vec<f64>,
}

/// `L_c + L_e`; a head disabled by `cfg.tasks` contributes zero loss and
/// zero gradient.
pub fn loss(
    clarity_logits: &[f64],
    evasion_logits: &[f64],
    gold_clarity: ClarityLabel,
    gold_evasion: EvasionLabel,
    cfg: &LossConfig,
) -> LossOutput {
    let weight = |w: &Option<Vec<f64>>, code: usize| w.as_ref().map_or(1.0, |w| w[code]);
    let (clarity, grad_clarity) = if cfg.tasks.clarity() {
        head_loss(
            clarity_logits,
            gold_clarity.code(),
            cfg.kind,
            cfg.focal_gamma,
            weight(&cfg.clarity_weights, gold_clarity.code()),
        )
    } else {
        (0.0, vec![0.0; clarity_logits.len()])
    };
    let (evasion, grad_evasion) = if cfg.tasks.evasion() {
        head_loss(
            evasion_logits,
            gold_evasion.code(),
            cfg.kind,
            cfg.focal_gamma,
            weight(&cfg.evasion_weights, gold_evasion.code()),
        )
    } else {
        (0.0, vec![0.0; evasion_logits.len()])
    };
    LossOutput {
        total: clarity + evasion,
        clarity,
        evasion,
        grad_clarity,
        grad_evasion,
    }
}

/// `w_c = N / (K n_c)`.
pub fn inverse_frequency_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::ZeroClassCount { class });
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| total as f64 / (k * c as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub pooling: PoolingStrategy,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pooling: PoolingStrategy::Max,
            dropout: 0.1,
        }
    }
}

/// Encoder plus heads: everything that gets trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub encoder: ToyEncoder,
    pub heads: HeadParams,
}

/// Class probabilities of both heads for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub clarity: Vec<f64>,
    pub evasion: Vec<f64>,
}

/// Per-instance record of a training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub clarity: f64,
    pub evasion: f64,
}

impl Network {
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let encoder = ToyEncoder::init(vocab_size, cfg, rng);
        let heads = HeadParams::init(cfg.width, rng);
        Self { encoder, heads }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            heads: HeadParams::zeros(self.heads.width),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.encoder.tensors().to_vec();
        out.extend(self.heads.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = self.encoder.tensors_mut().into_iter().collect();
        out.extend(self.heads.tensors_mut());
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn encode(&self, chunks: &ChunkSet) -> Result<(Vec<Vec<f64>>, Vec<Position0Cache>)> {
        let mut hs = Vec::with_capacity(chunks.len());
        let mut caches = Vec::with_capacity(chunks.len());
        for c in &chunks.chunks {
            let (h, cache) = self.encoder.forward_position0(c)?;
            hs.push(h);
            caches.push(cache);
        }
        Ok((hs, caches))
    }

    /// Eval-mode logits for one chunked instance.
    pub fn logits(&self, chunks: &ChunkSet, pooling: PoolingStrategy) -> Result<(Vec<f64>, Vec<f64>)> {
        let (hs, _) = self.encode(chunks)?;
        let v = pool(&hs, pooling)?;
        let out = forward(&v, &self.heads, &DropoutConfig::eval(), &mut rand::rngs::mock::StepRng::new(0, 0));
        Ok((out.clarity_logits, out.evasion_logits))
    }

    pub fn predict(&self, chunks: &ChunkSet, pooling: PoolingStrategy) -> Result<Prediction> {
        let (c, e) = self.logits(chunks, pooling)?;
        Ok(Prediction {
            clarity: probabilities(&c),
            evasion: probabilities(&e),
        })
    }

    /// Forward and backward for one instance; gradients are added into
    /// `grads` scaled by `scale`.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_gradients<R: Rng + ?Sized>(
        &self,
        chunks: &ChunkSet,
        gold_clarity: ClarityLabel,
        gold_evasion: EvasionLabel,
        model: &ModelConfig,
        dropout: &DropoutConfig,
        loss_cfg: &LossConfig,
        scale: f64,
        rng: &mut R,
        grads: &mut Network,
    ) -> Result<StepLoss> {
        let (hs, caches) = self.encode(chunks)?;
        let (v, trace) = pool_with_trace(&hs, model.pooling)?;
        let out = forward(&v, &self.heads, dropout, rng);
        let l = loss(
            &out.clarity_logits,
            &out.evasion_logits,
            gold_clarity,
            gold_evasion,
            loss_cfg,
        );
        let gc: Vec<f64> = l.grad_clarity.iter().map(|g| g * scale).collect();
        let ge: Vec<f64> = l.grad_evasion.iter().map(|g| g * scale).collect();
        let grad_v = heads_backward(&self.heads, &out, &gc, &ge, &mut grads.heads);
        let grad_h = pool_backward(&trace, &grad_v, hs.len());
        for ((c, cache), g) in chunks.chunks.iter().zip(&caches).zip(&grad_h) {
            if g.iter().any(|x| *x != 0.0) {
                self.encoder.backward_position0(c, cache, g, &mut grads.encoder);
            }
        }
        Ok(StepLoss {
            total: l.total,
            clarity: l.clarity,
            evasion: l.evasion,
        })
    }
}
