//! Byte-level corpora split into training and validation windows.

use std::ops::Range;
use std::path::Path;

use mom_tensor::Rng;

use crate::{MomError, Result};

/// Raw bytes plus a contiguous validation block whose start is aligned to
/// the window length and chosen by seed. Training windows never overlap it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub bytes: Vec<u8>,
    pub seq_len: usize,
    pub val: Range<usize>,
    pub train: Vec<Range<usize>>,
}

/// Byte-identity tokenization.
pub fn byte_ids(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

impl Corpus {
    pub fn load(path: &Path, seq_len: usize, val_fraction: f64, seed: u64) -> Result<Corpus> {
        let bytes = std::fs::read(path).map_err(|e| MomError::io(path, e))?;
        Corpus::from_bytes(bytes, seq_len, val_fraction, seed)
    }

    pub fn from_bytes(bytes: Vec<u8>, seq_len: usize, val_fraction: f64, seed: u64) -> Result<Corpus> {
        if bytes.is_empty() {
            return Err(MomError::Data("corpus is empty".into()));
        }
        if seq_len == 0 || !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
            return Err(MomError::config(format!(
                "need seq_len >= 1 and 0 < val_fraction < 1, got {seq_len} and {val_fraction}"
            )));
        }
        let n = bytes.len();
        let windows = ((n as f64 * val_fraction) / seq_len as f64).round().max(1.0) as usize;
        let val_len = windows * seq_len + 1;
        if val_len + 2 * (seq_len + 1) > n {
            return Err(MomError::Data(format!(
                "{n} bytes are too few for windows of {seq_len} with a validation split"
            )));
        }
        let slots = (n - val_len) / seq_len + 1;
        let start = seq_len * Rng::new(seed).below(slots);
        let val = start..start + val_len;
        let train = [0..start, val.end..n]
            .into_iter()
            .filter(|r| r.len() > seq_len)
            .collect();
        Ok(Corpus {
            bytes,
            seq_len,
            val,
            train,
        })
    }

    fn windows_in(&self, range: &Range<usize>) -> impl Iterator<Item = usize> {
        let t = self.seq_len;
        let end = range.end;
        (range.start..end).step_by(t).take_while(move |s| s + t < end)
    }

    /// Start offsets of non-overlapping training windows of `seq_len + 1` bytes.
    pub fn train_windows(&self) -> Vec<usize> {
        self.train.iter().flat_map(|r| self.windows_in(r)).collect()
    }

    pub fn val_windows(&self) -> Vec<usize> {
        self.windows_in(&self.val).collect()
    }

    /// Inputs and next-byte targets of the window starting at `start`.
    pub fn window(&self, start: usize) -> (Vec<usize>, Vec<usize>) {
        let w = &self.bytes[start..start + self.seq_len + 1];
        (byte_ids(&w[..self.seq_len]), byte_ids(&w[1..]))
    }

    /// Entropy in nats of the training split's byte distribution.
    pub fn unigram_entropy(&self) -> f64 {
        let mut counts = [0u64; 256];
        let mut total = 0u64;
        for r in &self.train {
            for &b in &self.bytes[r.clone()] {
                counts[b as usize] += 1;
                total += 1;
            }
        }
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }
}
