//! In-memory rendezvous transport shared by all rank workers.
//!
//! Collectives are rounds on a (group, round-index) key: every member deposits
//! its payload, the round completes when the last member arrives, and each
//! member then reads the full deposit list and computes its own result. All
//! cross-rank data flows through here; nothing else is shared.

use super::RtError;
use crate::runtime::recorder::CollectiveKind;
use crate::tensor::Tensor;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub(crate) enum Payload {
    Tensor(Tensor),
    Bytes(Vec<u8>),
    Empty,
}

impl Payload {
    pub(crate) fn byte_size(&self) -> u64 {
        match self {
            Payload::Tensor(t) => t.byte_size(),
            Payload::Bytes(b) => b.len() as u64,
            Payload::Empty => 0,
        }
    }
}

struct Round {
    kind: CollectiveKind,
    seq_id: u64,
    expected: Vec<usize>,
    deposits: BTreeMap<usize, Payload>,
    complete: bool,
    error: Option<String>,
    taken: usize,
}

#[derive(Default)]
struct GroupState {
    member_next: HashMap<usize, u64>,
    rounds: HashMap<u64, Round>,
    kind_seq: BTreeMap<CollectiveKind, u64>,
}

#[derive(Default)]
struct ChannelState {
    queue: VecDeque<(u64, Payload)>,
    pushed: u64,
    popped: u64,
}

#[derive(Default)]
struct TransportState {
    groups: HashMap<Vec<usize>, GroupState>,
    channels: HashMap<(usize, usize), ChannelState>,
    poison: Option<String>,
}

pub(crate) struct Transport {
    timeout: Duration,
    state: Mutex<TransportState>,
    cv: Condvar,
}

impl Transport {
    pub(crate) fn new(timeout: Duration) -> Transport {
        Transport {
            timeout,
            state: Mutex::new(TransportState::default()),
            cv: Condvar::new(),
        }
    }

    /// Mark the world as failed; wakes everything that is blocked.
    pub(crate) fn poison(&self, why: String) {
        let mut st = self.state.lock().unwrap();
        if st.poison.is_none() {
            st.poison = Some(why);
        }
        self.cv.notify_all();
    }

    /// Deposit `payload` for `rank` into the group's next round. Returns the
    /// round's key and per-kind sequence number without blocking, so callers
    /// can log the sequence id even if the round later hangs.
    pub(crate) fn collective_join(
        &self,
        rank: usize,
        group: &[usize],
        kind: CollectiveKind,
        payload: Payload,
    ) -> Result<(u64, u64), RtError> {
        debug_assert!(group.contains(&rank), "rank {rank} not in group {group:?}");
        let key = group.to_vec();
        let mut st = self.state.lock().unwrap();
        if let Some(p) = &st.poison {
            return Err(RtError::Aborted { origin: p.clone() });
        }
        let gs = st.groups.entry(key.clone()).or_default();
        let idx = {
            let c = gs.member_next.entry(rank).or_insert(0);
            let i = *c;
            *c += 1;
            i
        };
        if !gs.rounds.contains_key(&idx) {
            let seq = {
                let c = gs.kind_seq.entry(kind).or_insert(0);
                let s = *c;
                *c += 1;
                s
            };
            gs.rounds.insert(
                idx,
                Round {
                    kind,
                    seq_id: seq,
                    expected: key.clone(),
                    deposits: BTreeMap::new(),
                    complete: false,
                    error: None,
                    taken: 0,
                },
            );
        }
        let round = gs.rounds.get_mut(&idx).unwrap();
        let seq_id = round.seq_id;
        if round.kind != kind {
            round.error = Some(format!(
                "collective mismatch on group {key:?}: rank {rank} called {kind}, round {seq_id} is {}",
                round.kind
            ));
            round.complete = true;
            self.cv.notify_all();
        } else {
            round.deposits.insert(rank, payload);
            if round.deposits.len() == round.expected.len() {
                round.complete = true;
                self.cv.notify_all();
            }
        }
        Ok((idx, seq_id))
    }

    /// Block until the round joined via [`Self::collective_join`] completes,
    /// then return all deposits in group order.
    pub(crate) fn collective_wait(
        &self,
        rank: usize,
        group: &[usize],
        idx: u64,
        seq_id: u64,
        kind: CollectiveKind,
    ) -> Result<Vec<Payload>, RtError> {
        let key = group.to_vec();
        let deadline = Instant::now() + self.timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            {
                let gs = st.groups.get(&key).unwrap();
                let round = gs.rounds.get(&idx).unwrap();
                if round.complete {
                    break;
                }
            }
            if let Some(p) = &st.poison {
                return Err(RtError::Aborted { origin: p.clone() });
            }
            let now = Instant::now();
            if now >= deadline {
                let why = format!(
                    "rank {rank} timed out waiting for {kind} seq {seq_id} on group {key:?}"
                );
                if st.poison.is_none() {
                    st.poison = Some(why.clone());
                }
                self.cv.notify_all();
                return Err(RtError::Timeout { what: why });
            }
            let (guard, _) = self.cv.wait_timeout(st, deadline - now).unwrap();
            st = guard;
        }

        let gs = st.groups.get_mut(&key).unwrap();
        let round = gs.rounds.get_mut(&idx).unwrap();
        if let Some(e) = &round.error {
            return Err(RtError::Mismatch(e.clone()));
        }
        let parts: Vec<Payload> = round
            .expected
            .iter()
            .map(|r| round.deposits[r].clone())
            .collect();
        round.taken += 1;
        if round.taken == round.expected.len() {
            gs.rounds.remove(&idx);
        }
        Ok(parts)
    }

    /// Buffered FIFO send; never blocks.
    pub(crate) fn send(&self, src: usize, dst: usize, payload: Payload) -> Result<u64, RtError> {
        let mut st = self.state.lock().unwrap();
        if let Some(p) = &st.poison {
            return Err(RtError::Aborted { origin: p.clone() });
        }
        let ch = st.channels.entry((src, dst)).or_default();
        let seq = ch.pushed;
        ch.pushed += 1;
        ch.queue.push_back((seq, payload));
        self.cv.notify_all();
        Ok(seq)
    }

    /// Pop the next message on channel `(src, dst)`, blocking until one
    /// arrives or the timeout expires.
    pub(crate) fn recv(&self, src: usize, dst: usize) -> Result<(u64, Payload), RtError> {
        let deadline = Instant::now() + self.timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(p) = &st.poison {
                return Err(RtError::Aborted { origin: p.clone() });
            }
            if let Some(ch) = st.channels.get_mut(&(src, dst)) {
                if let Some((seq, payload)) = ch.queue.pop_front() {
                    ch.popped += 1;
                    return Ok((seq, payload));
                }
            }
            let now = Instant::now();
            if now >= deadline {
                let next = st.channels.get(&(src, dst)).map(|c| c.popped).unwrap_or(0);
                let why = format!(
                    "rank {dst} timed out waiting for recv seq {next} on channel {src}->{dst}"
                );
                if st.poison.is_none() {
                    st.poison = Some(why.clone());
                }
                self.cv.notify_all();
                return Err(RtError::Timeout { what: why });
            }
            let (guard, _) = self.cv.wait_timeout(st, deadline - now).unwrap();
            st = guard;
        }
    }
}
