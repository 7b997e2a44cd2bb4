//! Flight recorder: per-operation enqueue/start/end logging and hang analysis.
//!
//! Every collective and p2p call appends a record when it is enqueued and
//! fills in the start/end timestamps when it completes. Timestamps are
//! per-rank logical counters, so a repeated run produces an identical log.
//! After a crashed or stuck run, [`analyze_recorder`] names the ranks and
//! operations involved.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    ReduceScatter,
    Broadcast,
    AllToAll,
    Send,
    Recv,
    Barrier,
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CollectiveKind::AllReduce => "all_reduce",
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::ReduceScatter => "reduce_scatter",
            CollectiveKind::Broadcast => "broadcast",
            CollectiveKind::AllToAll => "all_to_all",
            CollectiveKind::Send => "send",
            CollectiveKind::Recv => "recv",
            CollectiveKind::Barrier => "barrier",
        };
        f.write_str(s)
    }
}

/// One recorded operation from one rank's point of view.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectiveRecord {
    /// Monotonic per (group, kind) sequence number; per channel for p2p.
    pub seq_id: u64,
    pub kind: CollectiveKind,
    /// Participating ranks; `[src, dst]` for p2p.
    pub group: Vec<usize>,
    /// The rank that issued this record.
    pub rank: usize,
    /// Peer rank for send/recv.
    pub peer: Option<usize>,
    pub bytes: u64,
    pub enqueue_t: u64,
    pub start_t: Option<u64>,
    pub end_t: Option<u64>,
    pub label: String,
}

impl CollectiveRecord {
    pub fn completed(&self) -> bool {
        self.end_t.is_some()
    }
}

/// Write records as JSON lines sorted by `(rank, enqueue_t)`.
pub fn write_dump(path: &Path, records: &[CollectiveRecord]) -> std::io::Result<()> {
    let mut sorted: Vec<&CollectiveRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.rank, r.enqueue_t));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in sorted {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dump(path: &Path) -> std::io::Result<Vec<CollectiveRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

/// The earliest collective round a group failed to complete.
#[derive(Debug, Clone, Serialize)]
pub struct CollectiveHang {
    pub group: Vec<usize>,
    pub kind: CollectiveKind,
    pub seq_id: u64,
    /// Highest sequence number completed by every member, if any.
    pub completed_by_all_through: Option<u64>,
    /// Members with no record at all for this round.
    pub missing: Vec<usize>,
    /// Members that enqueued the round but never finished it.
    pub incomplete: Vec<usize>,
    /// Last enqueued sequence number per member.
    pub last_enqueued: BTreeMap<usize, u64>,
    pub label: String,
}

/// A p2p channel whose completed sends and receives do not line up.
#[derive(Debug, Clone, Serialize)]
pub struct ChannelHang {
    pub src: usize,
    pub dst: usize,
    pub sends_completed: u64,
    pub recvs_completed: u64,
    pub last_send_completed: Option<u64>,
    pub last_recv_completed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct HangReport {
    pub collectives: Vec<CollectiveHang>,
    pub channels: Vec<ChannelHang>,
}

impl HangReport {
    pub fn is_clean(&self) -> bool {
        self.collectives.is_empty() && self.channels.is_empty()
    }
}

impl fmt::Display for HangReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            return writeln!(f, "clean run: all recorded operations completed");
        }
        for c in &self.collectives {
            writeln!(
                f,
                "group {:?}: {} seq {} did not complete (label \"{}\")",
                c.group, c.kind, c.seq_id, c.label
            )?;
            if let Some(t) = c.completed_by_all_through {
                writeln!(f, "  completed by all through seq {t}")?;
            }
            if !c.missing.is_empty() {
                writeln!(f, "  ranks that never called it: {:?}", c.missing)?;
            }
            if !c.incomplete.is_empty() {
                writeln!(f, "  ranks stuck in it: {:?}", c.incomplete)?;
            }
            for (rank, seq) in &c.last_enqueued {
                writeln!(f, "  rank {rank} last enqueued seq {seq}")?;
            }
        }
        for ch in &self.channels {
            writeln!(
                f,
                "channel {} -> {}: {} sends vs {} recvs completed (last send seq {:?}, last recv seq {:?})",
                ch.src,
                ch.dst,
                ch.sends_completed,
                ch.recvs_completed,
                ch.last_send_completed,
                ch.last_recv_completed
            )?;
        }
        Ok(())
    }
}

/// Inspect a (possibly truncated) record log and report the earliest
/// incomplete collective per group and any unbalanced p2p channels.
pub fn analyze_recorder(records: &[CollectiveRecord]) -> HangReport {
    let mut report = HangReport::default();

    // Collectives grouped by (group, kind).
    let mut by_group: BTreeMap<(Vec<usize>, CollectiveKind), Vec<&CollectiveRecord>> =
        BTreeMap::new();
    let mut channels: BTreeMap<(usize, usize), Vec<&CollectiveRecord>> = BTreeMap::new();
    for r in records {
        match r.kind {
            CollectiveKind::Send | CollectiveKind::Recv => {
                let key = match r.kind {
                    CollectiveKind::Send => (r.rank, r.peer.unwrap_or(usize::MAX)),
                    _ => (r.peer.unwrap_or(usize::MAX), r.rank),
                };
                channels.entry(key).or_default().push(r);
            }
            _ => {
                by_group
                    .entry((r.group.clone(), r.kind))
                    .or_default()
                    .push(r);
            }
        }
    }

    for ((group, kind), recs) in &by_group {
        let members: BTreeSet<usize> = group.iter().copied().collect();
        let max_seq = recs.iter().map(|r| r.seq_id).max().unwrap_or(0);
        let mut completed_through: Option<u64> = None;
        let mut hang: Option<CollectiveHang> = None;
        for seq in 0..=max_seq {
            let at_seq: Vec<&&CollectiveRecord> = recs.iter().filter(|r| r.seq_id == seq).collect();
            let done: BTreeSet<usize> = at_seq
                .iter()
                .filter(|r| r.completed())
                .map(|r| r.rank)
                .collect();
            if done == members {
                completed_through = Some(seq);
                continue;
            }
            let present: BTreeSet<usize> = at_seq.iter().map(|r| r.rank).collect();
            let missing: Vec<usize> = members.difference(&present).copied().collect();
            let incomplete: Vec<usize> = at_seq
                .iter()
                .filter(|r| !r.completed())
                .map(|r| r.rank)
                .collect();
            let mut last_enqueued = BTreeMap::new();
            for r in recs.iter() {
                let e = last_enqueued.entry(r.rank).or_insert(r.seq_id);
                *e = (*e).max(r.seq_id);
            }
            hang = Some(CollectiveHang {
                group: group.clone(),
                kind: *kind,
                seq_id: seq,
                completed_by_all_through: completed_through,
                missing,
                incomplete,
                last_enqueued,
                label: at_seq.first().map(|r| r.label.clone()).unwrap_or_default(),
            });
            break;
        }
        if let Some(h) = hang {
            report.collectives.push(h);
        }
    }

    for ((src, dst), recs) in &channels {
        let sends: Vec<&&CollectiveRecord> = recs
            .iter()
            .filter(|r| r.kind == CollectiveKind::Send)
            .collect();
        let recvs: Vec<&&CollectiveRecord> = recs
            .iter()
            .filter(|r| r.kind == CollectiveKind::Recv)
            .collect();
        let sends_completed = sends.iter().filter(|r| r.completed()).count() as u64;
        let recvs_completed = recvs.iter().filter(|r| r.completed()).count() as u64;
        let pending_recvs = recvs.iter().any(|r| !r.completed());
        if sends_completed != recvs_completed || pending_recvs {
            report.channels.push(ChannelHang {
                src: *src,
                dst: *dst,
                sends_completed,
                recvs_completed,
                last_send_completed: sends
                    .iter()
                    .filter(|r| r.completed())
                    .map(|r| r.seq_id)
                    .max(),
                last_recv_completed: recvs
                    .iter()
                    .filter(|r| r.completed())
                    .map(|r| r.seq_id)
                    .max(),
            });
        }
    }

    report
}
