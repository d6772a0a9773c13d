//! Byte-level corpus handling: split, fixed windows, batches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// Byte tokens with next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmBatch {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
}

/// Non-overlapping windows of `seq + 1` tokens over a token stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSet {
    pub seq: usize,
    pub windows: Vec<Vec<u32>>,
}

pub fn read_corpus(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

/// Splits into a leading training part and a trailing validation part.
pub fn split(bytes: &[u8], valid_fraction: f64) -> Result<(&[u8], &[u8])> {
    if !(0.0..1.0).contains(&valid_fraction) {
        return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
    }
    let cut = bytes.len() - (bytes.len() as f64 * valid_fraction).round() as usize;
    Ok(bytes.split_at(cut))
}

impl WindowSet {
    /// Windows start every `seq` tokens; the target of the last input is the
    /// first token of the next window.
    pub fn new(bytes: &[u8], seq: usize) -> Result<Self> {
        if seq == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        if bytes.len() < seq + 1 {
            return Err(Error::Input(format!(
                "corpus of {} bytes is shorter than one window of {}",
                bytes.len(),
                seq + 1
            )));
        }
        let n = (bytes.len() - 1) / seq;
        let windows = (0..n)
            .map(|i| bytes[i * seq..i * seq + seq + 1].iter().map(|&b| b as u32).collect())
            .collect();
        Ok(Self { seq, windows })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// The first `n` windows (all if fewer).
    pub fn head(&self, n: usize) -> Self {
        Self {
            seq: self.seq,
            windows: self.windows.iter().take(n).cloned().collect(),
        }
    }

    /// `n` windows drawn without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Self {
        let idx = rand::seq::index::sample(rng, self.len(), n.min(self.len()));
        Self {
            seq: self.seq,
            windows: idx.iter().map(|i| self.windows[i].clone()).collect(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Result<LmBatch> {
        let seq = self.seq;
        let mut tokens = Vec::with_capacity(idx.len() * seq);
        let mut targets = Vec::with_capacity(idx.len() * seq);
        for &i in idx {
            let w = &self.windows[i];
            tokens.extend_from_slice(&w[..seq]);
            targets.extend(w[1..].iter().map(|&t| t as usize));
        }
        Ok(LmBatch {
            inputs: TokenBatch::new(idx.len(), seq, tokens)?,
            targets,
        })
    }

    /// Consecutive batches in stored order; the last may be short.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<LmBatch>> {
        let all: Vec<usize> = (0..self.len()).collect();
        all.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// One epoch of full batches in shuffled order.
    pub fn epoch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
            .chunks_exact(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}
