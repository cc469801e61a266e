//! Synthetic tasks.
//!
//! * `copy_lm`: random first half, second half repeats it; loss only on the
//!   copied half.
//! * `modadd_lm`: `a + b = c` with `c = (a + b) mod p`; loss only on `c`.
//! * `parity_cls`: bit tokens, some of them marked; the label is the parity
//!   of the marked bits. Sequences have random length and are right-padded.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BaseConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::numerics::rng::{stream, Stream, StreamRng};

pub const IGNORE_INDEX: i64 = -100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    #[default]
    CopyLm,
    ModaddLm,
    ParityCls,
}

impl TaskId {
    pub fn is_classification(self) -> bool {
        matches!(self, TaskId::ParityCls)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub name: TaskId,
    /// Full sequence length; `0` selects the task default.
    pub seq_len: usize,
    pub modulus: usize,
    pub marks: usize,
    pub eval_size: usize,
    pub eval_batch: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            name: TaskId::CopyLm,
            seq_len: 0,
            modulus: 13,
            marks: 2,
            eval_size: 256,
            eval_batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Next-token targets, `[B·T]`, `IGNORE_INDEX` where unsupervised.
    Lm(Vec<i64>),
    /// One label per row plus the padding mask (`true` at padding).
    Cls { labels: Vec<usize>, pad_mask: Vec<bool> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub target: Target,
}

impl Batch {
    pub fn pad_mask(&self) -> Vec<bool> {
        match &self.target {
            Target::Cls { pad_mask, .. } => pad_mask.clone(),
            Target::Lm(_) => vec![false; self.tokens.ids.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
}

// parity_cls token layout
const BIT0: usize = 0;
const MARKED0: usize = 2;
const PAD: usize = 4;

impl SyntheticTask {
    pub fn new(config: &TaskConfig, base: &BaseConfig, seed: u64) -> Result<Self> {
        let mut errors = Vec::new();
        let seq_len = if config.seq_len == 0 {
            match config.name {
                TaskId::CopyLm => 32,
                TaskId::ModaddLm => 5,
                TaskId::ParityCls => 16,
            }
        } else {
            config.seq_len
        };
        let input_len = match config.name {
            TaskId::ParityCls => seq_len,
            _ => seq_len.saturating_sub(1),
        };
        if input_len > base.max_seq {
            errors.push(format!(
                "task input length {input_len} exceeds base.max_seq {}",
                base.max_seq
            ));
        }
        match config.name {
            TaskId::CopyLm => {
                if seq_len < 4 || seq_len % 2 != 0 {
                    errors.push(format!("copy_lm seq_len must be even and >= 4, got {seq_len}"));
                }
            }
            TaskId::ModaddLm => {
                if seq_len != 5 {
                    errors.push(format!("modadd_lm seq_len must be 5, got {seq_len}"));
                }
                if config.modulus < 2 || config.modulus + 2 > base.vocab_size {
                    errors.push(format!(
                        "modadd_lm needs 2 <= modulus and modulus + 2 <= vocab ({}), got {}",
                        base.vocab_size, config.modulus
                    ));
                }
            }
            TaskId::ParityCls => {
                if base.vocab_size <= PAD {
                    errors.push(format!("parity_cls needs vocab > {PAD}"));
                }
                if config.marks == 0 || config.marks > seq_len / 2 {
                    errors.push(format!(
                        "parity_cls marks must be in [1, seq_len/2], got {}",
                        config.marks
                    ));
                }
                if base.num_classes != 2 {
                    errors.push("parity_cls needs base.num_classes = 2".into());
                }
            }
        }
        if config.eval_size == 0 || config.eval_batch == 0 {
            errors.push("task.eval_size and task.eval_batch must be >= 1".into());
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        Ok(SyntheticTask {
            config: config.clone(),
            vocab: base.vocab_size,
            seq_len,
            seed,
        })
    }

    pub fn id(&self) -> TaskId {
        self.config.name
    }

    /// Training batch for `step`; each step has its own stream. `phase`
    /// separates base pretraining (1) from adaptation (0).
    pub fn train_batch(&self, step: u64, phase: u64, batch: usize) -> Batch {
        let mut rng = stream(self.seed, Stream::TrainData, step, phase);
        self.sample(&mut rng, batch)
    }

    /// Held-out split, drawn from its own stream.
    pub fn eval_split(&self) -> Vec<Batch> {
        let mut rng = stream(self.seed, Stream::EvalData, 0, 0);
        let mut left = self.config.eval_size;
        let mut out = Vec::new();
        while left > 0 {
            let n = left.min(self.config.eval_batch);
            out.push(self.sample(&mut rng, n));
            left -= n;
        }
        out
    }

    pub fn sample(&self, rng: &mut StreamRng, batch: usize) -> Batch {
        match self.config.name {
            TaskId::CopyLm => self.sample_copy(rng, batch),
            TaskId::ModaddLm => self.sample_modadd(rng, batch),
            TaskId::ParityCls => self.sample_parity(rng, batch),
        }
    }

    fn lm_batch(batch: usize, seqs: Vec<Vec<usize>>, supervised_from: usize) -> Batch {
        let t = seqs[0].len() - 1;
        let mut ids = Vec::with_capacity(batch * t);
        let mut targets = Vec::with_capacity(batch * t);
        for s in &seqs {
            ids.extend_from_slice(&s[..t]);
            for i in 0..t {
                targets.push(if i + 1 >= supervised_from {
                    s[i + 1] as i64
                } else {
                    IGNORE_INDEX
                });
            }
        }
        Batch {
            tokens: TokenBatch::new(batch, t, ids).expect("rows have equal length"),
            target: Target::Lm(targets),
        }
    }

    fn sample_copy(&self, rng: &mut StreamRng, batch: usize) -> Batch {
        let half = self.seq_len / 2;
        let seqs = (0..batch)
            .map(|_| {
                let first: Vec<usize> = (0..half).map(|_| rng.random_range(0..self.vocab)).collect();
                first.iter().chain(&first).copied().collect()
            })
            .collect();
        Self::lm_batch(batch, seqs, half)
    }

    fn sample_modadd(&self, rng: &mut StreamRng, batch: usize) -> Batch {
        let p = self.config.modulus;
        let seqs = (0..batch)
            .map(|_| {
                let a = rng.random_range(0..p);
                let b = rng.random_range(0..p);
                vec![a, p, b, p + 1, (a + b) % p]
            })
            .collect();
        Self::lm_batch(batch, seqs, 4)
    }

    fn sample_parity(&self, rng: &mut StreamRng, batch: usize) -> Batch {
        let t = self.seq_len;
        let marks = self.config.marks;
        let min_len = (t / 2).max(marks);
        let mut ids = Vec::with_capacity(batch * t);
        let mut pad_mask = Vec::with_capacity(batch * t);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            let len = rng.random_range(min_len..=t);
            let bits: Vec<usize> = (0..len).map(|_| rng.random_range(0..2)).collect();
            let marked = sample(rng, len, marks).into_vec();
            let mut row: Vec<usize> = bits.iter().map(|b| BIT0 + b).collect();
            let mut parity = 0;
            for &m in &marked {
                row[m] = MARKED0 + bits[m];
                parity ^= bits[m];
            }
            pad_mask.extend((0..t).map(|i| i >= len));
            row.resize(t, PAD);
            ids.extend(row);
            labels.push(parity);
        }
        Batch {
            tokens: TokenBatch::new(batch, t, ids).expect("rows padded to seq_len"),
            target: Target::Cls { labels, pad_mask },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(name: TaskId) -> SyntheticTask {
        let cfg = TaskConfig {
            name,
            ..TaskConfig::default()
        };
        SyntheticTask::new(&cfg, &BaseConfig::default(), 11).unwrap()
    }

    #[test]
    fn copy_targets_cover_second_half() {
        let t = task(TaskId::CopyLm);
        let b = t.train_batch(0, 0, 3);
        assert_eq!((b.tokens.batch, b.tokens.seq), (3, 31));
        let Target::Lm(targets) = &b.target else { panic!() };
        for r in 0..3 {
            let row = b.tokens.row(r);
            let tr = &targets[r * 31..(r + 1) * 31];
            assert!(tr[..15].iter().all(|&x| x == IGNORE_INDEX));
            for i in 15..31 {
                assert_eq!(tr[i], row[i + 1 - 16] as i64);
            }
        }
    }

    #[test]
    fn modadd_supervises_only_answer() {
        let t = task(TaskId::ModaddLm);
        let b = t.train_batch(5, 0, 8);
        let Target::Lm(targets) = &b.target else { panic!() };
        for r in 0..8 {
            let row = b.tokens.row(r);
            assert_eq!(&targets[r * 4..r * 4 + 3], &[IGNORE_INDEX; 3]);
            assert_eq!(targets[r * 4 + 3], ((row[0] + row[2]) % 13) as i64);
        }
    }

    #[test]
    fn parity_label_matches_marked_bits() {
        let t = task(TaskId::ParityCls);
        let b = t.train_batch(1, 0, 32);
        let Target::Cls { labels, pad_mask } = &b.target else {
            panic!()
        };
        for r in 0..32 {
            let row = b.tokens.row(r);
            let marked: Vec<_> = row.iter().filter(|&&x| x == 2 || x == 3).collect();
            assert_eq!(marked.len(), 2);
            let parity = marked.iter().map(|&&x| x - 2).sum::<usize>() % 2;
            assert_eq!(labels[r], parity);
            let len = row.iter().take_while(|&&x| x != PAD).count();
            assert!(len >= 8);
            assert!((0..16).all(|i| pad_mask[r * 16 + i] == (i >= len)));
        }
    }

    #[test]
    fn regeneration_is_bit_identical_and_splits_differ() {
        let t = task(TaskId::CopyLm);
        assert_eq!(t.eval_split(), t.eval_split());
        assert_eq!(t.train_batch(3, 0, 4), t.train_batch(3, 0, 4));
        assert_ne!(t.train_batch(0, 0, 64).tokens, t.eval_split()[0].tokens);
    }

    #[test]
    fn oversized_sequence_rejected() {
        let cfg = TaskConfig {
            seq_len: 64,
            ..TaskConfig::default()
        };
        assert!(SyntheticTask::new(&cfg, &BaseConfig::default(), 0).is_err());
    }
}
