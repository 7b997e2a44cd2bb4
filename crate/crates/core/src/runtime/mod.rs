//! Simulated multi-rank world.
//!
//! [`spawn_world`] runs one worker thread per rank. Workers interact only
//! through rendezvous collectives and FIFO p2p channels on an in-memory
//! transport; reductions apply in ascending rank order, so results are
//! bit-identical across runs regardless of thread interleaving. Every
//! operation is logged to a flight recorder and accounted in a per-rank cost
//! ledger.
//!
//! A failing rank (error, panic, or timeout) poisons the world: blocked peers
//! wake with an abort error and the caller receives a [`WorldError`] carrying
//! the recorder snapshot for hang analysis.

mod ledger;
pub mod mesh;
pub mod recorder;
mod transport;

pub use ledger::{CostLedger, WorldLedger};
pub use mesh::{DeviceMesh, MeshError};
pub use recorder::{
    analyze_recorder, read_dump, write_dump, CollectiveKind, CollectiveRecord, HangReport,
};

use crate::tensor::{DType, Tensor, TensorError};
use std::cell::Cell;
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;
use transport::{Payload, Transport};

#[derive(Debug, Error)]
pub enum RtError {
    #[error("{what}")]
    Timeout { what: String },
    #[error("aborted: {origin}")]
    Aborted { origin: String },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{0}")]
    Other(String),
}

impl RtError {
    /// True when this failure is a cascade from another rank's failure.
    pub fn is_cascade(&self) -> bool {
        matches!(self, RtError::Aborted { .. })
    }
}

pub type RtResult<T> = std::result::Result<T, RtError>;

#[derive(Debug, Clone, Copy)]
pub struct WorldOptions {
    /// Wall-clock bound for each blocking call.
    pub timeout: Duration,
}

impl Default for WorldOptions {
    fn default() -> Self {
        WorldOptions {
            timeout: Duration::from_secs(30),
        }
    }
}

impl WorldOptions {
    pub fn with_timeout(timeout: Duration) -> WorldOptions {
        WorldOptions { timeout }
    }
}

/// Results of a world that ran to completion on every rank.
#[derive(Debug)]
pub struct WorldRun<T> {
    /// Per-rank return values, indexed by rank.
    pub results: Vec<T>,
    pub records: Vec<CollectiveRecord>,
    pub ledger: WorldLedger,
}

/// A world in which at least one rank failed.
#[derive(Debug, Error)]
pub struct WorldError {
    /// Failures by rank; cascades are included and flagged in the message.
    pub failures: Vec<(usize, String)>,
    pub records: Vec<CollectiveRecord>,
    pub ledger: WorldLedger,
}

impl std::fmt::Display for WorldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "world aborted;")?;
        for (rank, why) in &self.failures {
            write!(f, " rank {rank}: {why};")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Min,
}

/// Shared per-rank state handed to the world entry function.
pub struct RankCtx {
    rank: usize,
    world_size: usize,
    transport: Arc<Transport>,
    recorders: Arc<Vec<Mutex<Vec<CollectiveRecord>>>>,
    ledgers: Arc<Vec<Mutex<CostLedger>>>,
    clock: Cell<u64>,
}

/// Ring-model byte volume per rank for a collective over `n` payload bytes
/// in a group of `w`. Shared with the analytic performance model.
pub fn ring_bytes(kind: CollectiveKind, n: u64, w: u64) -> u64 {
    if w <= 1 {
        return 0;
    }
    match kind {
        CollectiveKind::AllReduce => 2 * n * (w - 1) / w,
        CollectiveKind::AllGather | CollectiveKind::ReduceScatter => n * (w - 1) / w,
        CollectiveKind::Broadcast => n,
        _ => n,
    }
}

impl RankCtx {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    fn tick(&self) -> u64 {
        let t = self.clock.get() + 1;
        self.clock.set(t);
        t
    }

    fn record_enqueue(
        &self,
        kind: CollectiveKind,
        group: &[usize],
        peer: Option<usize>,
        bytes: u64,
        label: &str,
    ) -> usize {
        let mut recs = self.recorders[self.rank].lock().unwrap();
        recs.push(CollectiveRecord {
            seq_id: 0, // patched at completion; unknown before the round exists
            kind,
            group: group.to_vec(),
            rank: self.rank,
            peer,
            bytes,
            enqueue_t: self.tick(),
            start_t: None,
            end_t: None,
            label: label.to_string(),
        });
        recs.len() - 1
    }

    fn record_complete(&self, idx: usize, seq_id: u64, bytes: u64) {
        let start = self.tick();
        let end = self.tick();
        let mut recs = self.recorders[self.rank].lock().unwrap();
        let r = &mut recs[idx];
        r.seq_id = seq_id;
        r.start_t = Some(start);
        r.end_t = Some(end);
        r.bytes = bytes;
    }

    /// Patch the sequence id of a record that will stay incomplete.
    fn record_seq(&self, idx: usize, seq_id: u64) {
        let mut recs = self.recorders[self.rank].lock().unwrap();
        recs[idx].seq_id = seq_id;
    }

    fn with_ledger<R>(&self, f: impl FnOnce(&mut CostLedger) -> R) -> R {
        f(&mut self.ledgers[self.rank].lock().unwrap())
    }

    /// Enqueue a record, join the round, patch the sequence id, then block.
    fn exchange(
        &self,
        group: &[usize],
        kind: CollectiveKind,
        payload: Payload,
        label: &str,
    ) -> RtResult<(usize, u64, Vec<Payload>)> {
        let bytes = payload.byte_size();
        let rec = self.record_enqueue(kind, group, None, bytes, label);
        let (idx, seq) = self
            .transport
            .collective_join(self.rank, group, kind, payload)?;
        self.record_seq(rec, seq);
        let parts = self
            .transport
            .collective_wait(self.rank, group, idx, seq, kind)?;
        Ok((rec, seq, parts))
    }

    fn finish_collective(
        &self,
        idx_bytes: (usize, u64, u64),
        kind: CollectiveKind,
        seq: u64,
        label: &str,
    ) {
        let (idx, sent, received) = idx_bytes;
        self.record_complete(idx, seq, sent.max(received));
        self.with_ledger(|l| l.record_op(&kind.to_string(), sent, received, label));
    }

    /// Synchronize the group; moves no payload.
    pub fn barrier(&self, group: &[usize], label: &str) -> RtResult<()> {
        let (rec, seq, _) = self.exchange(group, CollectiveKind::Barrier, Payload::Empty, label)?;
        self.finish_collective((rec, 0, 0), CollectiveKind::Barrier, seq, label);
        Ok(())
    }

    /// Element-wise reduction over the group, applied in ascending rank order.
    pub fn all_reduce(
        &self,
        group: &[usize],
        t: &Tensor,
        op: ReduceOp,
        label: &str,
    ) -> RtResult<Tensor> {
        let (rec, seq, parts) = self.exchange(
            group,
            CollectiveKind::AllReduce,
            Payload::Tensor(t.clone()),
            label,
        )?;
        let tensors = into_tensors(parts)?;
        for other in &tensors[1..] {
            if other.shape() != tensors[0].shape() || other.dtype() != tensors[0].dtype() {
                return Err(RtError::Mismatch(format!(
                    "all_reduce shape mismatch across group {group:?}: {:?} vs {:?}",
                    tensors[0].shape(),
                    other.shape()
                )));
            }
        }
        let mut acc = tensors[0].clone();
        for other in &tensors[1..] {
            let a = acc.data_mut();
            for (x, y) in a.iter_mut().zip(other.data()) {
                *x = match op {
                    ReduceOp::Sum => *x + y,
                    ReduceOp::Max => x.max(*y),
                    ReduceOp::Min => x.min(*y),
                };
            }
        }
        let vol = ring_bytes(CollectiveKind::AllReduce, t.byte_size(), group.len() as u64);
        self.finish_collective((rec, vol, vol), CollectiveKind::AllReduce, seq, label);
        Ok(acc)
    }

    /// Gather each member's tensor; returns the parts in group order.
    pub fn all_gather_parts(
        &self,
        group: &[usize],
        t: &Tensor,
        label: &str,
    ) -> RtResult<Vec<Tensor>> {
        let (rec, seq, parts) = self.exchange(
            group,
            CollectiveKind::AllGather,
            Payload::Tensor(t.clone()),
            label,
        )?;
        let tensors = into_tensors(parts)?;
        let total: u64 = tensors.iter().map(|p| p.byte_size()).sum();
        let mine = t.byte_size();
        let sent = mine * (group.len() as u64 - 1);
        let received = total - mine;
        self.finish_collective((rec, sent, received), CollectiveKind::AllGather, seq, label);
        Ok(tensors)
    }

    /// Gather and concatenate along `dim`. Parts may have unequal extents
    /// along `dim` (uneven shards), all other extents must agree.
    pub fn all_gather_dim(
        &self,
        group: &[usize],
        t: &Tensor,
        dim: usize,
        label: &str,
    ) -> RtResult<Tensor> {
        let parts = self.all_gather_parts(group, t, label)?;
        Ok(Tensor::cat(&parts, dim)?)
    }

    /// Sum-reduce across the group, scattering equal chunks of `dim` back;
    /// the extent along `dim` must divide evenly by the group size.
    pub fn reduce_scatter_dim(
        &self,
        group: &[usize],
        t: &Tensor,
        dim: usize,
        label: &str,
    ) -> RtResult<Tensor> {
        let w = group.len();
        if !t.shape()[dim].is_multiple_of(w) {
            return Err(RtError::Mismatch(format!(
                "reduce_scatter dim {dim} extent {} not divisible by group size {w}",
                t.shape()[dim]
            )));
        }
        let (rec, seq, parts) = self.exchange(
            group,
            CollectiveKind::ReduceScatter,
            Payload::Tensor(t.clone()),
            label,
        )?;
        let tensors = into_tensors(parts)?;
        for other in &tensors[1..] {
            if other.shape() != tensors[0].shape() {
                return Err(RtError::Mismatch(format!(
                    "reduce_scatter shape mismatch across group {group:?}"
                )));
            }
        }
        let chunk = t.shape()[dim] / w;
        let my_pos = group.iter().position(|&r| r == self.rank).unwrap();
        let lo = my_pos * chunk;
        let mut acc = tensors[0].narrow(dim, lo, lo + chunk)?;
        for other in &tensors[1..] {
            let piece = other.narrow(dim, lo, lo + chunk)?;
            for (x, y) in acc.data_mut().iter_mut().zip(piece.data()) {
                *x += y;
            }
        }
        let vol = ring_bytes(CollectiveKind::ReduceScatter, t.byte_size(), w as u64);
        self.finish_collective((rec, vol, vol), CollectiveKind::ReduceScatter, seq, label);
        Ok(acc)
    }

    /// Root's tensor delivered to the whole group.
    pub fn broadcast(
        &self,
        group: &[usize],
        t: Option<&Tensor>,
        root: usize,
        label: &str,
    ) -> RtResult<Tensor> {
        let payload = if self.rank == root {
            Payload::Tensor(t.expect("root must supply the tensor").clone())
        } else {
            Payload::Empty
        };
        let (rec, seq, parts) = self.exchange(group, CollectiveKind::Broadcast, payload, label)?;
        let root_pos = group.iter().position(|&r| r == root).ok_or_else(|| {
            RtError::Mismatch(format!("broadcast root {root} not in group {group:?}"))
        })?;
        let out = match &parts[root_pos] {
            Payload::Tensor(t) => t.clone(),
            _ => return Err(RtError::Mismatch("broadcast root sent no tensor".into())),
        };
        let n = out.byte_size();
        let (sent, received) = if self.rank == root {
            (n * (group.len() as u64 - 1), 0)
        } else {
            (0, n)
        };
        self.finish_collective((rec, sent, received), CollectiveKind::Broadcast, seq, label);
        Ok(out)
    }

    /// Personalized exchange: `parts[i]` goes to `group[i]`; returns one part
    /// from each member, in group order.
    pub fn all_to_all(
        &self,
        group: &[usize],
        parts: Vec<Tensor>,
        label: &str,
    ) -> RtResult<Vec<Tensor>> {
        if parts.len() != group.len() {
            return Err(RtError::Mismatch(format!(
                "all_to_all needs {} parts, got {}",
                group.len(),
                parts.len()
            )));
        }
        let my_pos = group.iter().position(|&r| r == self.rank).unwrap();
        let sent: u64 = parts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != my_pos)
            .map(|(_, p)| p.byte_size())
            .sum();
        let stacked = pack_parts(&parts);
        let (rec, seq, deposits) = self.exchange(
            group,
            CollectiveKind::AllToAll,
            Payload::Bytes(stacked),
            label,
        )?;
        let mut out = Vec::with_capacity(group.len());
        let mut received = 0u64;
        for (i, dep) in deposits.iter().enumerate() {
            let bytes = match dep {
                Payload::Bytes(b) => b,
                _ => return Err(RtError::Mismatch("all_to_all payload corrupted".into())),
            };
            let them = unpack_parts(bytes)
                .map_err(|e| RtError::Mismatch(format!("all_to_all decode: {e}")))?;
            if them.len() != group.len() {
                return Err(RtError::Mismatch(
                    "all_to_all member sent wrong part count".into(),
                ));
            }
            let part = them.into_iter().nth(my_pos).unwrap();
            if i != my_pos {
                received += part.byte_size();
            }
            out.push(part);
        }
        self.finish_collective((rec, sent, received), CollectiveKind::AllToAll, seq, label);
        Ok(out)
    }

    /// All-gather of opaque byte blobs (metadata exchange).
    pub fn gather_bytes(
        &self,
        group: &[usize],
        bytes: Vec<u8>,
        label: &str,
    ) -> RtResult<Vec<Vec<u8>>> {
        let mine = bytes.len() as u64;
        let (rec, seq, parts) = self.exchange(
            group,
            CollectiveKind::AllGather,
            Payload::Bytes(bytes),
            label,
        )?;
        let mut out = Vec::with_capacity(parts.len());
        let mut total = 0u64;
        for p in parts {
            match p {
                Payload::Bytes(b) => {
                    total += b.len() as u64;
                    out.push(b);
                }
                _ => return Err(RtError::Mismatch("gather_bytes payload corrupted".into())),
            }
        }
        let sent = mine * (group.len() as u64 - 1);
        let received = total - mine;
        self.finish_collective((rec, sent, received), CollectiveKind::AllGather, seq, label);
        Ok(out)
    }

    /// FIFO buffered send to `dst`.
    pub fn send(&self, dst: usize, t: &Tensor, label: &str) -> RtResult<()> {
        let group = [self.rank, dst];
        let idx = self.record_enqueue(
            CollectiveKind::Send,
            &group,
            Some(dst),
            t.byte_size(),
            label,
        );
        let seq = self
            .transport
            .send(self.rank, dst, Payload::Tensor(t.clone()))?;
        self.record_complete(idx, seq, t.byte_size());
        self.with_ledger(|l| l.record_op("send", t.byte_size(), 0, label));
        Ok(())
    }

    /// Blocking receive of the next message from `src`; the payload must match
    /// the declared shape and dtype.
    pub fn recv(&self, src: usize, shape: &[usize], dtype: DType, label: &str) -> RtResult<Tensor> {
        let group = [src, self.rank];
        let idx = self.record_enqueue(CollectiveKind::Recv, &group, Some(src), 0, label);
        let (seq, payload) = self.transport.recv(src, self.rank)?;
        let t = match payload {
            Payload::Tensor(t) => t,
            _ => {
                return Err(RtError::Mismatch(format!(
                    "channel {src}->{} seq {seq}: non-tensor payload",
                    self.rank
                )))
            }
        };
        if t.shape() != shape || t.dtype() != dtype {
            self.record_seq(idx, seq);
            return Err(RtError::Mismatch(format!(
                "channel {src}->{} seq {seq}: arriving {:?} {:?} does not match declared {:?} {:?}",
                self.rank,
                t.shape(),
                t.dtype(),
                shape,
                dtype
            )));
        }
        self.record_complete(idx, seq, t.byte_size());
        self.with_ledger(|l| l.record_op("recv", 0, t.byte_size(), label));
        Ok(t)
    }

    pub fn ledger_activation_alloc(&self, bytes: u64) {
        self.with_ledger(|l| l.activation_alloc(bytes));
    }

    pub fn ledger_activation_free(&self, bytes: u64) {
        self.with_ledger(|l| l.activation_free(bytes));
    }

    pub fn ledger_param_alloc(&self, bytes: u64) {
        self.with_ledger(|l| l.param_alloc(bytes));
    }

    pub fn ledger_param_free(&self, bytes: u64) {
        self.with_ledger(|l| l.param_free(bytes));
    }

    pub fn ledger_mark_overlappable(&self, bytes: u64) {
        self.with_ledger(|l| l.mark_overlappable(bytes));
    }

    pub fn ledger_snapshot(&self) -> CostLedger {
        self.with_ledger(|l| l.clone())
    }
}

fn into_tensors(parts: Vec<Payload>) -> RtResult<Vec<Tensor>> {
    parts
        .into_iter()
        .map(|p| match p {
            Payload::Tensor(t) => Ok(t),
            _ => Err(RtError::Mismatch("expected tensor payload".into())),
        })
        .collect()
}

fn pack_parts(parts: &[Tensor]) -> Vec<u8> {
    serde_json::to_vec(parts).expect("tensors serialize")
}

fn unpack_parts(bytes: &[u8]) -> Result<Vec<Tensor>, serde_json::Error> {
    serde_json::from_slice(bytes)
}

/// Run `entry` on every rank of a simulated world of `world_size` ranks.
///
/// Returns when all workers finish. Any rank failure (error, panic, timeout)
/// poisons the world and surfaces as a [`WorldError`] carrying the flight
/// recorder snapshot and ledgers gathered so far.
pub fn spawn_world<T, F>(
    world_size: usize,
    opts: WorldOptions,
    entry: F,
) -> Result<WorldRun<T>, WorldError>
where
    T: Send,
    F: Fn(RankCtx) -> RtResult<T> + Sync,
{
    assert!(world_size >= 1, "world needs at least one rank");
    let transport = Arc::new(Transport::new(opts.timeout));
    let recorders: Arc<Vec<Mutex<Vec<CollectiveRecord>>>> =
        Arc::new((0..world_size).map(|_| Mutex::new(Vec::new())).collect());
    let ledgers: Arc<Vec<Mutex<CostLedger>>> = Arc::new(
        (0..world_size)
            .map(|_| Mutex::new(CostLedger::default()))
            .collect(),
    );

    let entry = &entry;
    let mut outcomes: Vec<RtResult<T>> = Vec::with_capacity(world_size);
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(world_size);
        for rank in 0..world_size {
            let transport = Arc::clone(&transport);
            let recorders = Arc::clone(&recorders);
            let ledgers = Arc::clone(&ledgers);
            handles.push(scope.spawn(move || {
                let ctx = RankCtx {
                    rank,
                    world_size,
                    transport: Arc::clone(&transport),
                    recorders,
                    ledgers,
                    clock: Cell::new(0),
                };
                let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| entry(ctx)));
                match out {
                    Ok(Ok(v)) => Ok(v),
                    Ok(Err(e)) => {
                        if !e.is_cascade() {
                            transport.poison(format!("rank {rank} failed: {e}"));
                        }
                        Err(e)
                    }
                    Err(panic) => {
                        let msg = panic_message(panic);
                        transport.poison(format!("rank {rank} panicked: {msg}"));
                        Err(RtError::Other(format!("panicked: {msg}")))
                    }
                }
            }));
        }
        for h in handles {
            outcomes.push(h.join().expect("worker wrapper never panics"));
        }
    });

    let records: Vec<CollectiveRecord> = {
        let mut all: Vec<CollectiveRecord> = recorders
            .iter()
            .flat_map(|m| m.lock().unwrap().clone())
            .collect();
        all.sort_by_key(|r| (r.rank, r.enqueue_t));
        all
    };
    let ledger = WorldLedger {
        per_rank: ledgers.iter().map(|m| m.lock().unwrap().clone()).collect(),
    };

    if outcomes.iter().all(|o| o.is_ok()) {
        Ok(WorldRun {
            results: outcomes.into_iter().map(|o| o.unwrap()).collect(),
            records,
            ledger,
        })
    } else {
        let failures = outcomes
            .iter()
            .enumerate()
            .filter_map(|(rank, o)| o.as_ref().err().map(|e| (rank, e.to_string())))
            .collect();
        Err(WorldError {
            failures,
            records,
            ledger,
        })
    }
}

fn panic_message(panic: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = panic.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast() -> WorldOptions {
        WorldOptions::with_timeout(Duration::from_millis(500))
    }

    #[test]
    fn single_rank_returns_value() {
        let run = spawn_world(1, fast(), |_ctx| Ok(42)).unwrap();
        assert_eq!(run.results, vec![42]);
    }

    #[test]
    fn each_rank_returns_its_rank() {
        let run = spawn_world(4, fast(), |ctx| Ok(ctx.rank())).unwrap();
        assert_eq!(run.results, vec![0, 1, 2, 3]);
    }

    #[test]
    fn all_reduce_sums_in_rank_order() {
        let run = spawn_world(4, fast(), |ctx| {
            let group: Vec<usize> = (0..4).collect();
            let t = Tensor::from_vec(&[1], vec![ctx.rank() as f64])?;
            ctx.all_reduce(&group, &t, ReduceOp::Sum, "t")
        })
        .unwrap();
        for r in run.results {
            assert_eq!(r.data(), &[6.0]);
        }
    }

    #[test]
    fn all_gather_concats_by_rank() {
        let run = spawn_world(4, fast(), |ctx| {
            let group: Vec<usize> = (0..4).collect();
            let t = Tensor::from_vec(&[1], vec![ctx.rank() as f64])?;
            ctx.all_gather_dim(&group, &t, 0, "t")
        })
        .unwrap();
        for r in run.results {
            assert_eq!(r.data(), &[0.0, 1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn reduce_scatter_keeps_own_chunk() {
        let run = spawn_world(2, fast(), |ctx| {
            let vals = if ctx.rank() == 0 {
                vec![1.0, 2.0]
            } else {
                vec![10.0, 20.0]
            };
            let t = Tensor::from_vec(&[2], vals)?;
            ctx.reduce_scatter_dim(&[0, 1], &t, 0, "t")
        })
        .unwrap();
        assert_eq!(run.results[0].data(), &[11.0]);
        assert_eq!(run.results[1].data(), &[22.0]);
    }

    #[test]
    fn send_recv_fifo_order() {
        let run = spawn_world(2, fast(), |ctx| {
            if ctx.rank() == 0 {
                ctx.send(1, &Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0])?, "a")?;
                ctx.send(1, &Tensor::from_vec(&[1], vec![9.0])?, "b")?;
                Ok(Tensor::zeros(&[1]))
            } else {
                let first = ctx.recv(0, &[3], DType::F64, "a")?;
                assert_eq!(first.data(), &[1.0, 2.0, 3.0]);
                ctx.recv(0, &[1], DType::F64, "b")
            }
        })
        .unwrap();
        assert_eq!(run.results[1].data(), &[9.0]);
    }

    #[test]
    fn recv_wrong_shape_names_channel_and_seq() {
        let err = spawn_world(2, fast(), |ctx| {
            if ctx.rank() == 0 {
                ctx.send(1, &Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0])?, "x")?;
                ctx.barrier(&[0, 1], "sync")?;
            } else {
                let e = ctx.recv(0, &[2], DType::F64, "x").unwrap_err();
                let msg = e.to_string();
                assert!(msg.contains("0->1"), "message: {msg}");
                assert!(msg.contains("seq 0"), "message: {msg}");
                return Err(e);
            }
            Ok(())
        })
        .unwrap_err();
        assert!(err.failures.iter().any(|(rank, _)| *rank == 1));
    }

    #[test]
    fn straggler_timeout_identifiable_in_records() {
        let err = spawn_world(3, fast(), |ctx| {
            if ctx.rank() == 2 {
                // Straggler: never joins the barrier.
                std::thread::sleep(Duration::from_millis(900));
                return Ok(());
            }
            ctx.barrier(&[0, 1, 2], "step")?;
            Ok(())
        })
        .unwrap_err();
        let report = analyze_recorder(&err.records);
        assert!(!report.is_clean());
        let hang = &report.collectives[0];
        assert_eq!(hang.kind, CollectiveKind::Barrier);
        assert_eq!(hang.missing, vec![2]);
        assert_eq!(hang.seq_id, 0);
    }

    #[test]
    fn bytes_conserved_over_world() {
        let run = spawn_world(4, fast(), |ctx| {
            let group: Vec<usize> = (0..4).collect();
            let t = Tensor::from_vec(&[8], vec![ctx.rank() as f64; 8])?;
            ctx.all_reduce(&group, &t, ReduceOp::Sum, "r")?;
            ctx.all_gather_dim(&group, &t, 0, "g")?;
            if ctx.rank() == 0 {
                ctx.send(3, &t, "p")?;
            }
            if ctx.rank() == 3 {
                ctx.recv(0, &[8], DType::F64, "p")?;
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(run.ledger.total_sent(), run.ledger.total_received());
    }

    #[test]
    fn determinism_identical_records_across_runs() {
        let go = || {
            spawn_world(4, fast(), |ctx| {
                let group: Vec<usize> = (0..4).collect();
                let t = Tensor::from_vec(&[4], vec![ctx.rank() as f64 * 0.1; 4])?;
                let a = ctx.all_reduce(&group, &t, ReduceOp::Sum, "a")?;
                let b = ctx.all_gather_dim(&group, &a, 0, "b")?;
                ctx.reduce_scatter_dim(&group, &b, 0, "c")
            })
            .unwrap()
        };
        let r1 = go();
        let r2 = go();
        for (a, b) in r1.results.iter().zip(&r2.results) {
            assert_eq!(a.data(), b.data());
        }
        let key = |rs: &[CollectiveRecord]| -> Vec<(u64, String, usize, u64, u64)> {
            rs.iter()
                .map(|r| (r.seq_id, r.kind.to_string(), r.rank, r.enqueue_t, r.bytes))
                .collect()
        };
        assert_eq!(key(&r1.records), key(&r2.records));
    }

    #[test]
    fn clean_run_analyzes_clean() {
        let run = spawn_world(2, fast(), |ctx| ctx.barrier(&[0, 1], "only")).unwrap();
        assert!(analyze_recorder(&run.records).is_clean());
    }

    #[test]
    fn missing_collective_fault_names_rank_kind_seq() {
        let err = spawn_world(4, fast(), |ctx| {
            let group: Vec<usize> = (0..4).collect();
            let t = Tensor::scalar(1.0);
            for _ in 0..7 {
                ctx.all_reduce(&group, &t, ReduceOp::Sum, "loop")?;
            }
            if ctx.rank() == 2 {
                // Fault injection: this rank never issues round 7.
                return Ok(());
            }
            ctx.all_reduce(&group, &t, ReduceOp::Sum, "loop")?;
            Ok(())
        })
        .unwrap_err();
        let report = analyze_recorder(&err.records);
        let hang = report
            .collectives
            .iter()
            .find(|c| c.kind == CollectiveKind::AllReduce)
            .expect("all_reduce hang reported");
        assert_eq!(hang.seq_id, 7);
        assert_eq!(hang.missing, vec![2]);
    }
}
