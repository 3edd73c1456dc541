use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Synthetic sequence task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    /// Predict, at position `t`, the token seen at `t - shift`. Positions
    /// before `shift` carry no label.
    Copy { shift: usize },
}

/// Token sequences for a [`Task`]; labels are derived from the tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: Task,
    pub vocab: usize,
    pub seq_len: usize,
    pub sequences: Vec<Vec<u32>>,
}

impl Dataset {
    /// `(position, label)` pairs of sequence `i`.
    pub fn labels(&self, i: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        let Task::Copy { shift } = self.task;
        let seq = &self.sequences[i];
        (shift..seq.len()).map(move |t| (t, seq[t - shift]))
    }

    pub fn label_count(&self) -> usize {
        let Task::Copy { shift } = self.task;
        self.sequences.len() * self.seq_len.saturating_sub(shift)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// `size` sequences of `seq_len` tokens drawn uniformly from `0..vocab`.
pub fn synth_dataset(
    task: Task,
    size: usize,
    vocab: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Dataset> {
    let Task::Copy { shift } = task;
    if vocab == 0 || vocab > u32::MAX as usize {
        return Err(Error::Config(format!("vocab {vocab} out of range")));
    }
    if shift >= seq_len {
        return Err(Error::Config(format!(
            "shift {shift} leaves no labels in sequences of length {seq_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..size)
        .map(|_| {
            (0..seq_len)
                .map(|_| rng.random_range(0..vocab as u32))
                .collect()
        })
        .collect();
    Ok(Dataset {
        task,
        vocab,
        seq_len,
        sequences,
    })
}
