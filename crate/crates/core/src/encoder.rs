//! Per-chunk encoders.
//!
//! [`ChunkEncoder`] is the seam where a pretrained transformer would plug in:
//! it maps one chunk to an `L x d` hidden matrix, and the pipeline only ever
//! reads row 0. [`ToyEncoder`] is the built-in trainable stand-in:
//!
//! ```text
//! x_p = E[t_p] + P[p]                    (p > 0)
//! x_0 = E[t_0] + P[0] + mean_{q real} E[t_q]
//! H_p = W tanh(x_p) + b
//! ```
//!
//! Only real (mask 1) tokens enter the mean, so padding never reaches row 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chunking::{Chunk, ChunkSet};
use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Returns row 0 of a hidden matrix.
pub fn extract_position0(hidden: &Matrix) -> Result<Vec<f64>> {
    if hidden.rows == 0 {
        return Err(Error::Shape("hidden matrix has no rows".into()));
    }
    Ok(hidden.row(0).to_vec())
}

pub trait ChunkEncoder: Sync {
    fn width(&self) -> usize;

    /// Positional capacity; this is the chunk window length.
    fn max_positions(&self) -> usize;

    /// Full `L x d` hidden states for one chunk.
    fn encode_chunk(&self, chunk: &Chunk) -> Result<Matrix>;

    /// Chunk representation. Implementations may skip computing the other
    /// rows but must agree with `encode_chunk` row 0 bit for bit.
    fn encode_position0(&self, chunk: &Chunk) -> Result<Vec<f64>> {
        extract_position0(&self.encode_chunk(chunk)?)
    }
}

/// One vector per chunk, in chunk order.
pub fn encode_all<E: ChunkEncoder + ?Sized>(chunks: &ChunkSet, encoder: &E) -> Result<Vec<Vec<f64>>> {
    chunks
        .chunks
        .iter()
        .map(|c| encoder.encode_position0(c))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub width: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            max_positions: 512,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.max_positions == 0 {
            return Err(Error::InvalidConfig(
                "encoder width and max_positions must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub vocab_size: usize,
    pub width: usize,
    pub max_positions: usize,
    /// `vocab_size x width`
    pub token_embeddings: Vec<f64>,
    /// `max_positions x width`
    pub position_embeddings: Vec<f64>,
    /// `width x width`, row = output unit
    pub mix_weights: Vec<f64>,
    pub mix_bias: Vec<f64>,
}

/// Intermediate values kept from a position-0 forward pass.
#[derive(Debug, Clone)]
pub struct Position0Cache {
    pub activation: Vec<f64>,
}

impl ToyEncoder {
    pub fn zeros(vocab_size: usize, cfg: &EncoderConfig) -> Self {
        let d = cfg.width;
        Self {
            vocab_size,
            width: d,
            max_positions: cfg.max_positions,
            token_embeddings: vec![0.0; vocab_size * d],
            position_embeddings: vec![0.0; cfg.max_positions * d],
            mix_weights: vec![0.0; d * d],
            mix_bias: vec![0.0; d],
        }
    }

    /// Every entry uniform in `[-INIT_RANGE, INIT_RANGE]`.
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let mut enc = Self::zeros(vocab_size, cfg);
        for t in enc.tensors_mut() {
            for x in t.iter_mut() {
                *x = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
            }
        }
        enc
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            width: self.width,
            max_positions: self.max_positions,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size, &self.config())
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            &self.token_embeddings,
            &self.position_embeddings,
            &self.mix_weights,
            &self.mix_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.token_embeddings,
            &mut self.position_embeddings,
            &mut self.mix_weights,
            &mut self.mix_bias,
        ]
    }

    fn embedding(&self, id: u32) -> &[f64] {
        let d = self.width;
        &self.token_embeddings[id as usize * d..(id as usize + 1) * d]
    }

    fn check_chunk(&self, chunk: &Chunk) -> Result<usize> {
        if chunk.ids.len() != self.max_positions || chunk.mask.len() != self.max_positions {
            return Err(Error::Shape(format!(
                "chunk of length {} for encoder with {} positions",
                chunk.ids.len(),
                self.max_positions
            )));
        }
        if let Some(&bad) = chunk.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: self.vocab_size,
            });
        }
        let real = chunk.real_len();
        if real == 0 {
            return Err(Error::Shape("chunk has no real tokens".into()));
        }
        Ok(real)
    }

    /// Pre-activation input at position 0, including the chunk summary.
    fn input0(&self, chunk: &Chunk, real: usize) -> Vec<f64> {
        let d = self.width;
        let mut mean = vec![0.0; d];
        for &id in &chunk.ids[..real] {
            for (m, e) in mean.iter_mut().zip(self.embedding(id)) {
                *m += e;
            }
        }
        let n = real as f64;
        let first = self.embedding(chunk.ids[0]);
        let pos = &self.position_embeddings[..d];
        (0..d).map(|j| (first[j] + pos[j]) + mean[j] / n).collect()
    }

    fn mix_into(&self, activation: &[f64], out: &mut [f64]) {
        let d = self.width;
        for (i, o) in out.iter_mut().enumerate() {
            let w = &self.mix_weights[i * d..(i + 1) * d];
            let mut acc = self.mix_bias[i];
            for (wij, aj) in w.iter().zip(activation) {
                acc += wij * aj;
            }
            *o = acc;
        }
    }

    /// Row 0 plus what `backward_position0` needs.
    pub fn forward_position0(&self, chunk: &Chunk) -> Result<(Vec<f64>, Position0Cache)> {
        let real = self.check_chunk(chunk)?;
        let activation: Vec<f64> = self.input0(chunk, real).into_iter().map(f64::tanh).collect();
        let mut out = vec![0.0; self.width];
        self.mix_into(&activation, &mut out);
        Ok((out, Position0Cache { activation }))
    }

    /// Accumulates into `grads` the gradient of a scalar whose derivative
    /// with respect to row 0 is `grad_out`.
    pub fn backward_position0(
        &self,
        chunk: &Chunk,
        cache: &Position0Cache,
        grad_out: &[f64],
        grads: &mut ToyEncoder,
    ) {
        let d = self.width;
        let a = &cache.activation;
        let mut grad_x = vec![0.0; d];
        for (i, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.mix_bias[i] += g;
            let w = &self.mix_weights[i * d..(i + 1) * d];
            let gw = &mut grads.mix_weights[i * d..(i + 1) * d];
            for j in 0..d {
                gw[j] += g * a[j];
                grad_x[j] += g * w[j];
            }
        }
        for (gx, aj) in grad_x.iter_mut().zip(a) {
            *gx *= 1.0 - aj * aj;
        }

        for (gp, gx) in grads.position_embeddings[..d].iter_mut().zip(&grad_x) {
            *gp += gx;
        }
        let first = chunk.ids[0] as usize;
        for (ge, gx) in grads.token_embeddings[first * d..(first + 1) * d]
            .iter_mut()
            .zip(&grad_x)
        {
            *ge += gx;
        }
        let real = chunk.real_len();
        let n = real as f64;
        for &id in &chunk.ids[..real] {
            let id = id as usize;
            for (ge, gx) in grads.token_embeddings[id * d..(id + 1) * d]
                .iter_mut()
                .zip(&grad_x)
            {
                *ge += gx / n;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

impl ChunkEncoder for ToyEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn max_positions(&self) -> usize {
        self.max_positions
    }

    fn encode_chunk(&self, chunk: &Chunk) -> Result<Matrix> {
        let real = self.check_chunk(chunk)?;
        let d = self.width;
        let mut hidden = Matrix::zeros(self.max_positions, d);
        let mut activation = vec![0.0; d];
        for p in 0..self.max_positions {
            if p == 0 {
                activation = self.input0(chunk, real);
            } else {
                let e = self.embedding(chunk.ids[p]);
                let pos = &self.position_embeddings[p * d..(p + 1) * d];
                for j in 0..d {
                    activation[j] = e[j] + pos[j];
                }
            }
            for a in activation.iter_mut() {
                *a = a.tanh();
            }
            self.mix_into(&activation, hidden.row_mut(p));
        }
        Ok(hidden)
    }

    fn encode_position0(&self, chunk: &Chunk) -> Result<Vec<f64>> {
        self.forward_position0(chunk).map(|(h, _)| h)
    }
}
