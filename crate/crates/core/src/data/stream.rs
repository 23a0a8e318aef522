use std::path::PathBuf;
use std::sync::mpsc;

use super::{DataError, Result, BOS, MASK};
use crate::tensor::Rng;
use crate::Token;

/// Concatenates documents, each preceded by the separator.
pub fn join_documents(docs: &[Vec<Token>]) -> Vec<Token> {
    let mut out = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for d in docs {
        out.push(BOS);
        out.extend_from_slice(d);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Packed {
    pub windows: Vec<Vec<Token>>,
    /// Tokens of the final partial window.
    pub dropped: usize,
}

/// Chops a token stream into `seq_len` windows, dropping the remainder.
pub fn pack_sequences(stream: &[Token], seq_len: usize) -> Result<Packed> {
    if seq_len == 0 {
        return Err(DataError::Invalid("seq_len must be positive".into()));
    }
    let windows: Vec<Vec<Token>> = stream.chunks_exact(seq_len).map(<[Token]>::to_vec).collect();
    Ok(Packed {
        dropped: stream.len() % seq_len,
        windows,
    })
}

/// Unique-token budget `U` repeated up to a total budget `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetedCorpus {
    pub unique_tokens: usize,
    pub total_tokens: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub sources: Vec<PathBuf>,
    /// Opaque label naming the source tier.
    pub tier: String,
}

impl BudgetedCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.unique_tokens == 0 || self.seq_len == 0 {
            return Err(DataError::Invalid("unique_tokens and seq_len must be positive".into()));
        }
        if self.unique_tokens > self.total_tokens {
            return Err(DataError::Invalid(format!(
                "unique budget {} exceeds total budget {}",
                self.unique_tokens, self.total_tokens
            )));
        }
        if self.unique_tokens < self.seq_len {
            return Err(DataError::Invalid(format!("unique budget {} is below one window of {}", self.unique_tokens, self.seq_len)));
        }
        Ok(())
    }

    /// Real-valued epoch count `T / U`.
    pub fn epochs(&self) -> f64 {
        self.total_tokens as f64 / self.unique_tokens as f64
    }

    /// Exactly `U` tokens: whole documents (separator included) taken
    /// contiguously from a seeded starting document, wrapping around, with
    /// the last one truncated. Counts are pre-packing.
    pub fn select_unique(&self, docs: &[Vec<Token>]) -> Result<Vec<Token>> {
        self.validate()?;
        let available: usize = docs.iter().map(|d| d.len() + 1).sum();
        if available < self.unique_tokens {
            return Err(DataError::SourceTooSmall {
                available,
                required: self.unique_tokens,
            });
        }
        let start = Rng::stream(self.seed, 0xDA7A).below(docs.len());
        let mut out = Vec::with_capacity(self.unique_tokens + 1);
        for d in docs.iter().cycle().skip(start) {
            out.push(BOS);
            out.extend_from_slice(d);
            if out.len() >= self.unique_tokens {
                break;
            }
        }
        out.truncate(self.unique_tokens);
        Ok(out)
    }

    /// Loads the sources and builds the batch stream.
    pub fn build_stream(&self, batch_size: usize) -> Result<BatchStream> {
        let mut docs = Vec::new();
        for p in &self.sources {
            docs.extend(super::load_documents(p)?);
        }
        self.build_stream_from(&docs, batch_size)
    }

    pub fn build_stream_from(&self, docs: &[Vec<Token>], batch_size: usize) -> Result<BatchStream> {
        let unique = self.select_unique(docs)?;
        let packed = pack_sequences(&unique, self.seq_len)?;
        // the total budget counts delivered tokens, so it fixes the number
        // of windows regardless of what packing dropped from U
        let total_windows = (self.total_tokens as f64 / self.seq_len as f64).round() as usize;
        BatchStream::new(packed.windows, batch_size, total_windows, self.seed)
    }
}

/// One training batch: `batch_size` windows, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Token>,
    pub batch_size: usize,
    /// Epoch of the first window in the batch.
    pub epoch: usize,
    pub step: u64,
    pub window_ids: Vec<usize>,
}

/// Deterministic epoch-shuffled window stream with random access by step.
#[derive(Clone, Debug)]
pub struct BatchStream {
    windows: Vec<Vec<Token>>,
    batch_size: usize,
    total_windows: usize,
    seed: u64,
}

impl BatchStream {
    pub fn new(windows: Vec<Vec<Token>>, batch_size: usize, total_windows: usize, seed: u64) -> Result<Self> {
        if windows.is_empty() || batch_size == 0 {
            return Err(DataError::Invalid("stream needs at least one window and a positive batch size".into()));
        }
        if let Some(w) = windows.iter().find(|w| w.len() != windows[0].len()) {
            return Err(DataError::Invalid(format!("window lengths differ ({} vs {})", w.len(), windows[0].len())));
        }
        if windows.iter().flatten().any(|&t| t == MASK) {
            return Err(DataError::Invalid("training windows may not contain the mask symbol".into()));
        }
        Ok(BatchStream {
            windows,
            batch_size,
            total_windows,
            seed,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn seq_len(&self) -> usize {
        self.windows[0].len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Full batches available within the total budget.
    pub fn n_steps(&self) -> u64 {
        (self.total_windows / self.batch_size) as u64
    }

    pub fn windows(&self) -> &[Vec<Token>] {
        &self.windows
    }

    /// Window order of epoch `e`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.windows.len()).collect();
        Rng::stream(self.seed, 1 << 32 | epoch as u64).shuffle(&mut order);
        order
    }

    /// Epochs completed after `steps` batches.
    pub fn epochs_after(&self, steps: u64) -> f64 {
        (steps as f64 * self.batch_size as f64) / self.windows.len() as f64
    }

    pub fn tokens_after(&self, steps: u64) -> u64 {
        steps * (self.batch_size * self.seq_len()) as u64
    }

    /// Batch number `step` (0-based).
    pub fn batch(&self, step: u64) -> Result<Batch> {
        if step >= self.n_steps() {
            return Err(DataError::Invalid(format!("step {step} beyond the {} available batches", self.n_steps())));
        }
        let n = self.windows.len();
        let first = step as usize * self.batch_size;
        let mut order = self.epoch_order(first / n);
        let mut cur_epoch = first / n;
        let mut tokens = Vec::with_capacity(self.batch_size * self.seq_len());
        let mut window_ids = Vec::with_capacity(self.batch_size);
        for g in first..first + self.batch_size {
            if g / n != cur_epoch {
                cur_epoch = g / n;
                order = self.epoch_order(cur_epoch);
            }
            let w = order[g % n];
            window_ids.push(w);
            tokens.extend_from_slice(&self.windows[w]);
        }
        Ok(Batch {
            tokens,
            batch_size: self.batch_size,
            epoch: first / n,
            step,
            window_ids,
        })
    }

    /// Batches `from..n_steps` in order.
    pub fn iter_from(&self, from: u64) -> impl Iterator<Item = Batch> + '_ {
        (from..self.n_steps()).map(|s| self.batch(s).expect("step within range"))
    }

    /// Like [`iter_from`](Self::iter_from), assembling up to `depth` batches
    /// ahead on a worker thread. Delivery order does not depend on `depth`.
    pub fn prefetch(&self, from: u64, depth: usize) -> impl Iterator<Item = Batch> {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let me = self.clone();
        std::thread::spawn(move || {
            for b in me.iter_from(from) {
                if tx.send(b).is_err() {
                    break;
                }
            }
        });
        rx.into_iter()
    }
}

/// Held-out windows handed out in consecutive chunks, one chunk per
/// evaluation, wrapping around at the end.
#[derive(Clone, Debug)]
pub struct ValidationCursor {
    windows: Vec<Vec<Token>>,
    per_eval: usize,
    position: usize,
    rotate: bool,
}

impl ValidationCursor {
    pub fn new(windows: Vec<Vec<Token>>, per_eval: usize, rotate: bool) -> Result<Self> {
        if windows.is_empty() || per_eval == 0 {
            return Err(DataError::Invalid("validation needs at least one window".into()));
        }
        Ok(ValidationCursor {
            windows,
            per_eval,
            position: 0,
            rotate,
        })
    }

    pub fn from_documents(docs: &[Vec<Token>], seq_len: usize, per_eval: usize, rotate: bool) -> Result<Self> {
        Self::new(pack_sequences(&join_documents(docs), seq_len)?.windows, per_eval, rotate)
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn set_position(&mut self, position: usize) {
        self.position = position % self.windows.len();
    }

    /// Chunk for the next evaluation; advances the cursor when rotating.
    pub fn next_chunk(&mut self) -> Vec<Vec<Token>> {
        let n = self.windows.len();
        let take = self.per_eval.min(n);
        let chunk = (0..take).map(|i| self.windows[(self.position + i) % n].clone()).collect();
        if self.rotate {
            self.position = (self.position + take) % n;
        }
        chunk
    }

    pub fn windows(&self) -> &[Vec<Token>] {
        &self.windows
    }
}
