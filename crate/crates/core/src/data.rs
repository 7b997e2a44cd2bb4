//! Deterministic, checkpointable synthetic token streams.
//!
//! Every token is a pure function of `(seed, step cursor, global sample index,
//! position)`, so a run can resume mid-stream from just the [`LoaderState`],
//! and data-parallel ranks draw disjoint slices of one global batch: rank `r`
//! takes samples `[r*local_batch, (r+1)*local_batch)` of the step's batch.
//! A single-rank run whose `local_batch` equals the global batch therefore
//! sees exactly the union of all ranks' data, which is what makes oracle
//! comparisons across parallelism layouts meaningful.

use crate::tensor::token_stream_u64;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::Arc;

const BIGRAM_BRANCHING: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Independent uniform tokens; nothing to learn.
    Uniform,
    /// Tokens follow a seeded random bigram transition table with a small
    /// branching factor, so cross-entropy has learnable structure.
    Bigram,
    /// Plain-text file of token ids, one per line, cycled.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaderState {
    pub master_seed: u64,
    /// Step cursor; advances by one per batch.
    pub cursor: u64,
    pub dp_rank: usize,
    pub dp_degree: usize,
    pub local_batch: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub mode: DataMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// Row-major `[batch, seq]` token ids.
    pub input_ids: Vec<usize>,
    /// `input_ids` shifted left by one position.
    pub labels: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }

    /// Microbatch `i` of `m` along the batch dim.
    pub fn microbatch(&self, i: usize, m: usize) -> TokenBatch {
        assert_eq!(self.batch % m, 0, "batch must divide into microbatches");
        let rows = self.batch / m;
        let lo = i * rows * self.seq;
        let hi = (i + 1) * rows * self.seq;
        TokenBatch {
            input_ids: self.input_ids[lo..hi].to_vec(),
            labels: self.labels[lo..hi].to_vec(),
            batch: rows,
            seq: self.seq,
        }
    }

    /// Keep positions `[lo, hi)` of every sequence (context-parallel shards).
    pub fn narrow_seq(&self, lo: usize, hi: usize) -> TokenBatch {
        let mut input_ids = Vec::with_capacity(self.batch * (hi - lo));
        let mut labels = Vec::with_capacity(self.batch * (hi - lo));
        for b in 0..self.batch {
            input_ids.extend_from_slice(&self.input_ids[b * self.seq + lo..b * self.seq + hi]);
            labels.extend_from_slice(&self.labels[b * self.seq + lo..b * self.seq + hi]);
        }
        TokenBatch {
            input_ids,
            labels,
            batch: self.batch,
            seq: hi - lo,
        }
    }
}

pub struct Loader {
    pub state: LoaderState,
    corpus: Option<Arc<Vec<usize>>>,
}

impl Loader {
    pub fn new(state: LoaderState) -> std::io::Result<Loader> {
        let corpus = match &state.mode {
            DataMode::File(path) => {
                let text = std::fs::read_to_string(path)?;
                let ids: Vec<usize> = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| {
                        l.trim().parse::<usize>().map_err(|e| {
                            std::io::Error::new(
                                std::io::ErrorKind::InvalidData,
                                format!("bad token id {l:?}: {e}"),
                            )
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if ids.len() < state.seq_len + 2 {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        "token file shorter than one sequence",
                    ));
                }
                Some(Arc::new(ids))
            }
            _ => None,
        };
        Ok(Loader { state, corpus })
    }

    /// Restore from a checkpointed state; continues the identical stream.
    pub fn restore(&mut self, state: LoaderState) -> std::io::Result<()> {
        if state.mode != self.state.mode {
            *self = Loader::new(state)?;
        } else {
            self.state = state;
        }
        Ok(())
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        let (local_batch, seq_len, dp_rank, cursor) = (
            self.state.local_batch,
            self.state.seq_len,
            self.state.dp_rank,
            self.state.cursor,
        );
        let tokens_per_sample = seq_len + 1;
        let mut input_ids = Vec::with_capacity(local_batch * seq_len);
        let mut labels = Vec::with_capacity(local_batch * seq_len);
        for b in 0..local_batch {
            let global_sample = (dp_rank * local_batch + b) as u64;
            let seq = self.sample_tokens(cursor, global_sample, tokens_per_sample);
            input_ids.extend_from_slice(&seq[..seq_len]);
            labels.extend_from_slice(&seq[1..]);
        }
        self.state.cursor += 1;
        TokenBatch {
            input_ids,
            labels,
            batch: local_batch,
            seq: seq_len,
        }
    }

    fn sample_tokens(&self, cursor: u64, sample: u64, count: usize) -> Vec<usize> {
        let st = &self.state;
        let v = st.vocab_size as u64;
        match &st.mode {
            DataMode::Uniform => (0..count)
                .map(|p| (token_stream_u64(st.master_seed, cursor, sample, p as u64) % v) as usize)
                .collect(),
            DataMode::Bigram => {
                let mut out = Vec::with_capacity(count);
                let mut tok = token_stream_u64(st.master_seed, cursor, sample, 0) % v;
                out.push(tok as usize);
                for p in 1..count {
                    let choice = token_stream_u64(st.master_seed, cursor, sample, p as u64)
                        % BIGRAM_BRANCHING;
                    tok = bigram_successor(st.master_seed, tok, choice, v);
                    out.push(tok as usize);
                }
                out
            }
            DataMode::File(_) => {
                let corpus = self.corpus.as_ref().expect("corpus loaded at construction");
                let stride = (corpus.len() - count) as u64;
                let start = ((cursor * (st.dp_degree * st.local_batch) as u64 + sample)
                    .wrapping_mul(count as u64)
                    % stride) as usize;
                corpus[start..start + count]
                    .iter()
                    .map(|&t| t % st.vocab_size)
                    .collect()
            }
        }
    }
}

/// Successor `choice` of `token` in the seeded bigram transition table.
fn bigram_successor(seed: u64, token: u64, choice: u64, vocab: u64) -> u64 {
    token_stream_u64(seed ^ 0x6269_6772_616d_2121, token, choice, 0) % vocab
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(mode: DataMode, dp_rank: usize, dp_degree: usize, local_batch: usize) -> LoaderState {
        LoaderState {
            master_seed: 7,
            cursor: 0,
            dp_rank,
            dp_degree,
            local_batch,
            seq_len: 16,
            vocab_size: 64,
            mode,
        }
    }

    #[test]
    fn same_state_same_batch() {
        let mut a = Loader::new(state(DataMode::Bigram, 0, 1, 2)).unwrap();
        let mut b = Loader::new(state(DataMode::Bigram, 0, 1, 2)).unwrap();
        assert_eq!(a.next_batch(), b.next_batch());
    }

    #[test]
    fn dp_ranks_draw_disjoint_streams() {
        let mut r0 = Loader::new(state(DataMode::Bigram, 0, 2, 2)).unwrap();
        let mut r1 = Loader::new(state(DataMode::Bigram, 1, 2, 2)).unwrap();
        assert_ne!(r0.next_batch().input_ids, r1.next_batch().input_ids);
    }

    #[test]
    fn union_of_ranks_equals_single_rank_global_batch() {
        let mut whole = Loader::new(state(DataMode::Bigram, 0, 1, 4)).unwrap();
        let mut r0 = Loader::new(state(DataMode::Bigram, 0, 2, 2)).unwrap();
        let mut r1 = Loader::new(state(DataMode::Bigram, 1, 2, 2)).unwrap();
        let full = whole.next_batch();
        let a = r0.next_batch();
        let b = r1.next_batch();
        let mut union = a.input_ids.clone();
        union.extend_from_slice(&b.input_ids);
        assert_eq!(full.input_ids, union);
    }

    #[test]
    fn restore_continues_identical_stream() {
        let mut a = Loader::new(state(DataMode::Bigram, 0, 1, 2)).unwrap();
        a.next_batch();
        a.next_batch();
        let snapshot = a.state.clone();
        let expected = a.next_batch();

        let mut b = Loader::new(state(DataMode::Bigram, 0, 1, 2)).unwrap();
        b.restore(snapshot).unwrap();
        assert_eq!(b.next_batch(), expected);
    }

    #[test]
    fn labels_are_shifted_inputs() {
        let mut l = Loader::new(state(DataMode::Uniform, 0, 1, 1)).unwrap();
        let b = l.next_batch();
        assert_eq!(b.input_ids[1..], b.labels[..b.seq - 1]);
    }

    #[test]
    fn microbatch_slices_batch_dim() {
        let mut l = Loader::new(state(DataMode::Uniform, 0, 1, 4)).unwrap();
        let b = l.next_batch();
        let mb = b.microbatch(1, 2);
        assert_eq!(mb.batch, 2);
        assert_eq!(mb.input_ids[..], b.input_ids[2 * 16..4 * 16]);
    }

    #[test]
    fn file_mode_cycles_a_token_file() {
        let dir = std::env::temp_dir().join(format!("meshtrain-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tokens.txt");
        let ids: Vec<String> = (0..200).map(|i| (i % 64).to_string()).collect();
        std::fs::write(&path, ids.join("\n")).unwrap();
        let mut l = Loader::new(state(DataMode::File(path.clone()), 0, 1, 2)).unwrap();
        let a = l.next_batch();
        assert!(a.input_ids.iter().all(|&t| t < 64));
        // Deterministic across loaders.
        let mut l2 = Loader::new(state(DataMode::File(path), 0, 1, 2)).unwrap();
        assert_eq!(l2.next_batch(), a);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn bigram_has_limited_branching() {
        let mut l = Loader::new(state(DataMode::Bigram, 0, 1, 8)).unwrap();
        let mut successors =
            std::collections::BTreeMap::<usize, std::collections::BTreeSet<usize>>::new();
        for _ in 0..50 {
            let b = l.next_batch();
            for row in 0..b.batch {
                for p in 0..b.seq - 1 {
                    let t = b.input_ids[row * b.seq + p];
                    let n = b.input_ids[row * b.seq + p + 1];
                    successors.entry(t).or_default().insert(n);
                }
            }
        }
        for (_, succ) in successors {
            assert!(succ.len() as u64 <= BIGRAM_BRANCHING);
        }
    }
}
