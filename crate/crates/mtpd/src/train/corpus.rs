//! Byte-level corpus ingestion and window sampling.

use super::TrainError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Token stream (byte ids) with recorded document start offsets.
pub struct Corpus {
    pub tokens: Vec<u16>,
    pub boundaries: Vec<usize>,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Corpus {
            tokens: bytes.iter().map(|&b| b as u16).collect(),
            boundaries: vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Read files as raw bytes into one stream. Paths are sorted first, so the
/// stream does not depend on argument order. Documents start at recorded
/// boundary offsets.
pub fn ingest_corpus<P: AsRef<Path>>(paths: &[P]) -> Result<Corpus, TrainError> {
    if paths.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut sorted: Vec<PathBuf> = paths.iter().map(|p| p.as_ref().to_path_buf()).collect();
    sorted.sort();
    let mut tokens = Vec::new();
    let mut boundaries = Vec::new();
    for p in &sorted {
        let bytes = std::fs::read(p).map_err(|e| TrainError::CorpusRead {
            path: p.display().to_string(),
            source: e,
        })?;
        boundaries.push(tokens.len());
        tokens.extend(bytes.iter().map(|&b| b as u16));
    }
    if tokens.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    Ok(Corpus { tokens, boundaries })
}

/// Seeded uniform window sampler. Each row is `seq_len + k + 1` contiguous
/// tokens: trunk inputs plus every shifted target. The RNG word position is
/// exposed so a resumed run draws the identical batch sequence.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    seed: u64,
    row_len: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(seq_len: usize, k: usize, batch_size: usize, seed: u64) -> Self {
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            row_len: seq_len + k + 1,
            batch_size,
        }
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    pub fn next_batch(&mut self, corpus: &Corpus) -> Result<Vec<Vec<u16>>, TrainError> {
        if corpus.len() < self.row_len {
            return Err(TrainError::CorpusTooSmall {
                len: corpus.len(),
                need: self.row_len,
            });
        }
        let max_start = corpus.len() - self.row_len;
        let mut rows = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let start = self.rng.gen_range(0..=max_start);
            rows.push(corpus.tokens[start..start + self.row_len].to_vec());
        }
        Ok(rows)
    }
}
