//! Overlapping fixed-length windows over a token sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenization::TokenSequence;

/// Window length and stride. The window is the encoder's positional
/// capacity; only the stride is a free parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub window: usize,
    pub stride: usize,
}

impl ChunkingConfig {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        let cfg = Self { window, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Half-overlapping windows.
    pub fn half_overlap(window: usize) -> Result<Self> {
        Self::new(window, (window / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::InvalidConfig(format!(
                "chunking requires 1 <= stride <= window, got stride {} window {}",
                self.stride, self.window
            )));
        }
        Ok(())
    }
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            window: 512,
            stride: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub index: usize,
    /// Offset of the first real token in the source sequence.
    pub start: usize,
    pub ids: Vec<u32>,
    /// 1 for real tokens, 0 for padding; always a prefix of ones.
    pub mask: Vec<u8>,
}

impl Chunk {
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m == 1).count()
    }

    pub fn end(&self) -> usize {
        self.start + self.real_len()
    }

    pub fn real_ids(&self) -> &[u32] {
        &self.ids[..self.real_len()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSet {
    pub id: String,
    pub chunks: Vec<Chunk>,
    pub source_len: usize,
}

impl ChunkSet {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// `ceil(max(len - L, 0) / S) + 1`.
pub fn expected_chunk_count(len: usize, cfg: &ChunkingConfig) -> usize {
    len.saturating_sub(cfg.window).div_ceil(cfg.stride) + 1
}

/// Slides a window of `cfg.window` tokens at `cfg.stride` until a window
/// reaches the end of `seq`; each window is padded with `pad_id`.
pub fn chunk(seq: &TokenSequence, cfg: &ChunkingConfig, pad_id: u32) -> ChunkSet {
    let total = seq.ids.len();
    let window = cfg.window;
    let mut chunks = Vec::with_capacity(expected_chunk_count(total.max(1), cfg));
    let mut start = 0;
    while start < total {
        let end = (start + window).min(total);
        let real = end - start;
        let mut ids = Vec::with_capacity(window);
        ids.extend_from_slice(&seq.ids[start..end]);
        ids.resize(window, pad_id);
        let mut mask = vec![1u8; real];
        mask.resize(window, 0);
        chunks.push(Chunk {
            index: chunks.len(),
            start,
            ids,
            mask,
        });
        if end >= total {
            break;
        }
        start += cfg.stride;
    }
    ChunkSet {
        id: seq.id.clone(),
        chunks,
        source_len: total,
    }
}
