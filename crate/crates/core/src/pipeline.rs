//! Pipeline parallelism: stage splitting by parameter name, a compute-action
//! schedule IR with a communication-insertion pass, schedule validation, a
//! runtime executor, and discrete-event bubble analysis.
//!
//! Schedules are built as per-rank lists of compute actions only; a separate
//! pass inserts matched send/receive pairs, posting receives in each
//! channel's send order (hoisted ahead of the dependent compute where
//! needed). The validator then proves completeness, FIFO consistency, and
//! deadlock freedom before anything executes.

use crate::data::TokenBatch;
use crate::model::ModelConfig;
use crate::parallel::{ModelPart, ParallelEnv, PartOutput};
use crate::runtime::{ReduceOp, RtError, RtResult};
use crate::tensor::{DType, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Gpipe,
    OneFOneB,
    Interleaved1F1B,
    ZeroBubble,
}

impl ScheduleKind {
    pub fn parse(name: &str) -> Result<ScheduleKind, String> {
        match name {
            "gpipe" => Ok(ScheduleKind::Gpipe),
            "1f1b" => Ok(ScheduleKind::OneFOneB),
            "interleaved_1f1b" => Ok(ScheduleKind::Interleaved1F1B),
            "zero_bubble" => Ok(ScheduleKind::ZeroBubble),
            other => Err(format!(
                "unknown schedule {other:?} (want gpipe, 1f1b, interleaved_1f1b, or zero_bubble)"
            )),
        }
    }

    /// Looped schedules place several stages on each rank.
    pub fn supports_multiple_stages(&self) -> bool {
        matches!(self, ScheduleKind::Interleaved1F1B)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub degree: usize,
    pub split_points: Vec<String>,
    pub schedule: ScheduleKind,
    pub microbatches: usize,
}

impl PipelineConfig {
    pub fn stages(&self) -> usize {
        self.split_points.len() + 1
    }

    pub fn stages_per_rank(&self) -> usize {
        self.stages() / self.degree
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.microbatches == 0 {
            return Err(PipelineError::Invalid("microbatches must be >= 1".into()));
        }
        if !self.stages().is_multiple_of(self.degree) {
            return Err(PipelineError::Invalid(format!(
                "{} stages not divisible by pipeline degree {}",
                self.stages(),
                self.degree
            )));
        }
        let v = self.stages_per_rank();
        if v > 1 && !self.schedule.supports_multiple_stages() {
            return Err(PipelineError::Invalid(format!(
                "schedule {:?} runs one stage per rank; got {v}",
                self.schedule
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Invalid(String),
    #[error("unknown split point {0:?}")]
    UnknownSplit(String),
    #[error("schedule invalid: {0}")]
    Schedule(String),
}

/// Owner rank of a global stage id (round-robin for looped schedules).
pub fn stage_owner(stage: usize, degree: usize) -> usize {
    stage % degree
}

/// Unit index ranges (over `0..n_layers+2`) per stage, split before each
/// named parameter prefix. `layers.k` splits before block `k`; `norm` splits
/// before the final norm + output head.
pub fn split_unit_ranges(
    cfg: &ModelConfig,
    split_points: &[String],
) -> Result<Vec<std::ops::Range<usize>>, PipelineError> {
    let total = ModelPart::total_units(cfg);
    let mut boundaries = Vec::with_capacity(split_points.len());
    for sp in split_points {
        let unit = if sp == "norm" || sp == "norm.weight" || sp == "output" {
            total - 1
        } else if let Some(rest) = sp.strip_prefix("layers.") {
            let layer: usize = rest
                .split('.')
                .next()
                .unwrap_or("")
                .parse()
                .map_err(|_| PipelineError::UnknownSplit(sp.clone()))?;
            if layer >= cfg.n_layers {
                return Err(PipelineError::UnknownSplit(sp.clone()));
            }
            layer + 1
        } else {
            return Err(PipelineError::UnknownSplit(sp.clone()));
        };
        boundaries.push(unit);
    }
    let mut sorted = boundaries.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted != boundaries {
        return Err(PipelineError::Invalid(
            "split points must be unique and in layer order".into(),
        ));
    }
    let mut ranges = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for b in boundaries {
        if b == 0 {
            return Err(PipelineError::Invalid(
                "cannot split before the embedding".into(),
            ));
        }
        ranges.push(start..b);
        start = b;
    }
    ranges.push(start..total);
    Ok(ranges)
}

/// Schedule IR: one action of one pipeline rank. Peers are pipeline-group
/// positions, not world ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Forward {
        stage: usize,
        mb: usize,
    },
    BackwardInput {
        stage: usize,
        mb: usize,
    },
    BackwardWeight {
        stage: usize,
        mb: usize,
    },
    SendAct {
        stage: usize,
        mb: usize,
        peer: usize,
    },
    RecvAct {
        stage: usize,
        mb: usize,
        peer: usize,
    },
    SendGrad {
        stage: usize,
        mb: usize,
        peer: usize,
    },
    RecvGrad {
        stage: usize,
        mb: usize,
        peer: usize,
    },
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Forward { stage, mb } => write!(f, "F(s={stage},mb={mb})"),
            Action::BackwardInput { stage, mb } => write!(f, "BI(s={stage},mb={mb})"),
            Action::BackwardWeight { stage, mb } => write!(f, "BW(s={stage},mb={mb})"),
            Action::SendAct { stage, mb, peer } => {
                write!(f, "SendAct(s={stage},mb={mb},to={peer})")
            }
            Action::RecvAct { stage, mb, peer } => {
                write!(f, "RecvAct(s={stage},mb={mb},from={peer})")
            }
            Action::SendGrad { stage, mb, peer } => {
                write!(f, "SendGrad(s={stage},mb={mb},to={peer})")
            }
            Action::RecvGrad { stage, mb, peer } => {
                write!(f, "RecvGrad(s={stage},mb={mb},from={peer})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSchedule {
    /// Per pipeline-rank ordered action lists.
    pub actions: Vec<Vec<Action>>,
    pub degree: usize,
    pub stages: usize,
    pub microbatches: usize,
}

impl PipelineSchedule {
    /// Text dump, one action per line: `rank R: F(s=1,mb=3)`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (rank, list) in self.actions.iter().enumerate() {
            for a in list {
                out.push_str(&format!("rank {rank}: {a}\n"));
            }
        }
        out
    }
}

/// Compute-only action lists for the named schedule.
pub fn build_compute_schedule(
    kind: ScheduleKind,
    degree: usize,
    stages: usize,
    microbatches: usize,
) -> Vec<Vec<Action>> {
    let m = microbatches;
    let v = stages / degree;
    let mut per_rank = Vec::with_capacity(degree);
    for r in 0..degree {
        let mut list = Vec::new();
        match kind {
            ScheduleKind::Gpipe => {
                for mb in 0..m {
                    list.push(Action::Forward { stage: r, mb });
                }
                for mb in 0..m {
                    list.push(Action::BackwardInput { stage: r, mb });
                    list.push(Action::BackwardWeight { stage: r, mb });
                }
            }
            ScheduleKind::OneFOneB => {
                let warmup = (degree - 1 - r).min(m);
                for mb in 0..warmup {
                    list.push(Action::Forward { stage: r, mb });
                }
                for j in 0..m - warmup {
                    list.push(Action::Forward {
                        stage: r,
                        mb: warmup + j,
                    });
                    list.push(Action::BackwardInput { stage: r, mb: j });
                    list.push(Action::BackwardWeight { stage: r, mb: j });
                }
                for mb in m - warmup..m {
                    list.push(Action::BackwardInput { stage: r, mb });
                    list.push(Action::BackwardWeight { stage: r, mb });
                }
            }
            ScheduleKind::ZeroBubble => {
                // 1F1B ordering for forwards and input-gradients; weight
                // gradients are deferred and drained into the cooldown.
                let warmup = (degree - 1 - r).min(m);
                let mut pending: VecDeque<usize> = VecDeque::new();
                for mb in 0..warmup {
                    list.push(Action::Forward { stage: r, mb });
                }
                for j in 0..m - warmup {
                    list.push(Action::Forward {
                        stage: r,
                        mb: warmup + j,
                    });
                    list.push(Action::BackwardInput { stage: r, mb: j });
                    pending.push_back(j);
                }
                for mb in m - warmup..m {
                    list.push(Action::BackwardInput { stage: r, mb });
                    pending.push_back(mb);
                    if let Some(w) = pending.pop_front() {
                        list.push(Action::BackwardWeight { stage: r, mb: w });
                    }
                }
                while let Some(w) = pending.pop_front() {
                    list.push(Action::BackwardWeight { stage: r, mb: w });
                }
            }
            ScheduleKind::Interleaved1F1B => {
                // Forward order: microbatch groups of up to `degree`, chunk-
                // major within each group. Backward order mirrors it with
                // chunks reversed.
                let mut f_order = Vec::with_capacity(m * v);
                let mut b_order = Vec::with_capacity(m * v);
                let mut mb0 = 0;
                while mb0 < m {
                    let g = degree.min(m - mb0);
                    for c in 0..v {
                        for j in 0..g {
                            f_order.push((r + c * degree, mb0 + j));
                        }
                    }
                    for c in (0..v).rev() {
                        for j in 0..g {
                            b_order.push((r + c * degree, mb0 + j));
                        }
                    }
                    mb0 += g;
                }
                let total = m * v;
                let warmup = ((degree - 1 - r) * 2 + (v - 1) * degree).min(total);
                for &(stage, mb) in &f_order[..warmup] {
                    list.push(Action::Forward { stage, mb });
                }
                for i in 0..total - warmup {
                    let (fs, fmb) = f_order[warmup + i];
                    list.push(Action::Forward { stage: fs, mb: fmb });
                    let (bs, bmb) = b_order[i];
                    list.push(Action::BackwardInput { stage: bs, mb: bmb });
                    list.push(Action::BackwardWeight { stage: bs, mb: bmb });
                }
                for &(bs, bmb) in &b_order[total - warmup..] {
                    list.push(Action::BackwardInput { stage: bs, mb: bmb });
                    list.push(Action::BackwardWeight { stage: bs, mb: bmb });
                }
            }
        }
        per_rank.push(list);
    }
    per_rank
}

/// Message identity on a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct MsgKey {
    grad: bool,
    stage: usize,
    mb: usize,
}

/// Insert matched send/receive pairs between adjacent stages. Sends follow
/// their producing compute; receives are posted in each channel's send order,
/// ahead of their dependent compute.
pub fn insert_comms(
    compute: Vec<Vec<Action>>,
    degree: usize,
    stages: usize,
    microbatches: usize,
) -> PipelineSchedule {
    // Pass 1: place sends and record each channel's send order.
    let mut with_sends: Vec<Vec<Action>> = Vec::with_capacity(degree);
    let mut channel_order: HashMap<(usize, usize), Vec<MsgKey>> = HashMap::new();
    for (r, list) in compute.iter().enumerate() {
        let mut out = Vec::with_capacity(list.len() * 2);
        for &a in list {
            out.push(a);
            match a {
                Action::Forward { stage, mb } if stage + 1 < stages => {
                    let peer = stage_owner(stage + 1, degree);
                    if peer != r {
                        out.push(Action::SendAct { stage, mb, peer });
                        channel_order.entry((r, peer)).or_default().push(MsgKey {
                            grad: false,
                            stage,
                            mb,
                        });
                    }
                }
                Action::BackwardInput { stage, mb } if stage > 0 => {
                    let peer = stage_owner(stage - 1, degree);
                    if peer != r {
                        out.push(Action::SendGrad { stage, mb, peer });
                        channel_order.entry((r, peer)).or_default().push(MsgKey {
                            grad: true,
                            stage,
                            mb,
                        });
                    }
                }
                _ => {}
            }
        }
        with_sends.push(out);
    }
    // Pass 2: post receives in channel send order before dependent computes.
    let mut final_lists: Vec<Vec<Action>> = Vec::with_capacity(degree);
    for (r, list) in with_sends.into_iter().enumerate() {
        let mut taken: HashMap<(usize, usize), usize> = HashMap::new();
        let mut out = Vec::with_capacity(list.len() * 2);
        for a in list {
            let needed: Option<((usize, usize), MsgKey)> = match a {
                Action::Forward { stage, mb } if stage > 0 => {
                    let src = stage_owner(stage - 1, degree);
                    (src != r).then_some((
                        (src, r),
                        MsgKey {
                            grad: false,
                            stage: stage - 1,
                            mb,
                        },
                    ))
                }
                Action::BackwardInput { stage, mb } if stage + 1 < stages => {
                    let src = stage_owner(stage + 1, degree);
                    (src != r).then_some((
                        (src, r),
                        MsgKey {
                            grad: true,
                            stage: stage + 1,
                            mb,
                        },
                    ))
                }
                _ => None,
            };
            if let Some((chan, key)) = needed {
                let order = channel_order.get(&chan).cloned().unwrap_or_default();
                let cursor = taken.entry(chan).or_insert(0);
                while *cursor < order.len() {
                    let msg = order[*cursor];
                    *cursor += 1;
                    out.push(recv_action(msg, chan.0));
                    if msg == key {
                        break;
                    }
                }
            }
            out.push(a);
        }
        final_lists.push(out);
    }
    PipelineSchedule {
        actions: final_lists,
        degree,
        stages,
        microbatches,
    }
}

fn recv_action(msg: MsgKey, src: usize) -> Action {
    if msg.grad {
        // A gradient produced by `stage` is consumed by `stage - 1`.
        Action::RecvGrad {
            stage: msg.stage,
            mb: msg.mb,
            peer: src,
        }
    } else {
        // An activation produced by `stage` is consumed by `stage + 1`.
        Action::RecvAct {
            stage: msg.stage + 1,
            mb: msg.mb,
            peer: src,
        }
    }
}

/// Build and wire a complete schedule.
pub fn build_schedule(cfg: &PipelineConfig) -> Result<PipelineSchedule, PipelineError> {
    cfg.validate()?;
    let compute = build_compute_schedule(cfg.schedule, cfg.degree, cfg.stages(), cfg.microbatches);
    Ok(insert_comms(
        compute,
        cfg.degree,
        cfg.stages(),
        cfg.microbatches,
    ))
}

/// Check completeness, placement, intra-rank ordering, send/receive matching,
/// channel FIFO consistency, and global deadlock freedom. Returns the first
/// violated constraint.
pub fn validate_schedule(s: &PipelineSchedule) -> Result<(), PipelineError> {
    let err = |msg: String| Err(PipelineError::Schedule(msg));
    let stages = s.stages;
    let m = s.microbatches;

    // (c) Completeness: each microbatch exactly once per compute kind per stage,
    // on the owning rank.
    let mut seen = vec![[0usize; 3]; stages * m];
    for (r, list) in s.actions.iter().enumerate() {
        for (i, a) in list.iter().enumerate() {
            let (stage, mb, slot) = match a {
                Action::Forward { stage, mb } => (*stage, *mb, 0),
                Action::BackwardInput { stage, mb } => (*stage, *mb, 1),
                Action::BackwardWeight { stage, mb } => (*stage, *mb, 2),
                _ => continue,
            };
            if stage >= stages || mb >= m {
                return err(format!("rank {r} action {i}: {a} out of range"));
            }
            if stage_owner(stage, s.degree) != r {
                return err(format!("rank {r} action {i}: {a} on foreign stage"));
            }
            seen[stage * m + mb][slot] += 1;
        }
    }
    for stage in 0..stages {
        for mb in 0..m {
            let c = seen[stage * m + mb];
            if c != [1, 1, 1] {
                return err(format!(
                    "stage {stage} mb {mb}: compute counts F/BI/BW = {c:?}, want [1, 1, 1]"
                ));
            }
        }
    }

    // Intra-rank ordering. Positions of every action by identity.
    let pos =
        |r: usize, want: &Action| -> Option<usize> { s.actions[r].iter().position(|a| a == want) };
    for stage in 0..stages {
        let r = stage_owner(stage, s.degree);
        for mb in 0..m {
            let f = pos(r, &Action::Forward { stage, mb }).unwrap();
            let bi = pos(r, &Action::BackwardInput { stage, mb }).unwrap();
            let bw = pos(r, &Action::BackwardWeight { stage, mb }).unwrap();
            if f > bi {
                return err(format!("stage {stage} mb {mb}: backward before forward"));
            }
            if bi > bw {
                return err(format!(
                    "stage {stage} mb {mb}: weight gradient before input gradient"
                ));
            }
            // Same-rank adjacent stages (no channel) must still respect order.
            if stage + 1 < stages && stage_owner(stage + 1, s.degree) == r {
                let f_next = pos(
                    r,
                    &Action::Forward {
                        stage: stage + 1,
                        mb,
                    },
                )
                .unwrap();
                if f_next < f {
                    return err(format!(
                        "stage {} mb {mb}: forward before its input",
                        stage + 1
                    ));
                }
                let bi_next = pos(
                    r,
                    &Action::BackwardInput {
                        stage: stage + 1,
                        mb,
                    },
                )
                .unwrap();
                if bi < bi_next {
                    return err(format!(
                        "stage {stage} mb {mb}: backward before stage {} gradient",
                        stage + 1
                    ));
                }
            }
        }
    }

    // Comm matching and FIFO consistency per channel.
    let mut sends: HashMap<(usize, usize), Vec<(MsgKey, usize)>> = HashMap::new();
    let mut recvs: HashMap<(usize, usize), Vec<(MsgKey, usize)>> = HashMap::new();
    for (r, list) in s.actions.iter().enumerate() {
        for (i, a) in list.iter().enumerate() {
            match a {
                Action::SendAct { stage, mb, peer } => sends.entry((r, *peer)).or_default().push((
                    MsgKey {
                        grad: false,
                        stage: *stage,
                        mb: *mb,
                    },
                    i,
                )),
                Action::SendGrad { stage, mb, peer } => {
                    sends.entry((r, *peer)).or_default().push((
                        MsgKey {
                            grad: true,
                            stage: *stage,
                            mb: *mb,
                        },
                        i,
                    ))
                }
                Action::RecvAct { stage, mb, peer } => recvs.entry((*peer, r)).or_default().push((
                    MsgKey {
                        grad: false,
                        stage: stage - 1,
                        mb: *mb,
                    },
                    i,
                )),
                Action::RecvGrad { stage, mb, peer } => {
                    recvs.entry((*peer, r)).or_default().push((
                        MsgKey {
                            grad: true,
                            stage: *stage,
                            mb: *mb,
                        },
                        i,
                    ))
                }
                _ => {}
            }
        }
    }
    for (chan, slist) in &sends {
        let rlist = match recvs.get(chan) {
            Some(r) => r,
            None => return err(format!("channel {chan:?}: sends with no receives")),
        };
        if slist.len() != rlist.len() {
            return err(format!(
                "channel {chan:?}: {} sends vs {} receives",
                slist.len(),
                rlist.len()
            ));
        }
        for (k, ((skey, _), (rkey, _))) in slist.iter().zip(rlist).enumerate() {
            if skey != rkey {
                return err(format!(
                    "channel {chan:?} FIFO violation at message {k}: send {skey:?} vs recv {rkey:?}"
                ));
            }
        }
    }
    for chan in recvs.keys() {
        if !sends.contains_key(chan) {
            return err(format!("channel {chan:?}: receives with no sends"));
        }
    }

    // Receives must precede the compute that consumes their payload.
    for (r, list) in s.actions.iter().enumerate() {
        for (i, a) in list.iter().enumerate() {
            let recv_pos = match a {
                Action::Forward { stage, mb } if *stage > 0 => {
                    let src = stage_owner(stage - 1, s.degree);
                    if src == r {
                        None
                    } else {
                        Some(pos(
                            r,
                            &Action::RecvAct {
                                stage: *stage,
                                mb: *mb,
                                peer: src,
                            },
                        ))
                    }
                }
                Action::BackwardInput { stage, mb } if stage + 1 < stages => {
                    let src = stage_owner(stage + 1, s.degree);
                    if src == r {
                        None
                    } else {
                        Some(pos(
                            r,
                            &Action::RecvGrad {
                                stage: stage + 1,
                                mb: *mb,
                                peer: src,
                            },
                        ))
                    }
                }
                _ => None,
            };
            if let Some(rp) = recv_pos {
                match rp {
                    Some(p) if p < i => {}
                    Some(_) => return err(format!("rank {r}: {a} runs before its receive")),
                    None => return err(format!("rank {r}: {a} has no matching receive")),
                }
            }
            // Sends must follow their producing compute.
            let produced = match a {
                Action::SendAct { stage, mb, .. } => Some(Action::Forward {
                    stage: *stage,
                    mb: *mb,
                }),
                Action::SendGrad { stage, mb, .. } => Some(Action::BackwardInput {
                    stage: *stage,
                    mb: *mb,
                }),
                _ => None,
            };
            if let Some(p) = produced {
                match pos(r, &p) {
                    Some(pp) if pp < i => {}
                    _ => return err(format!("rank {r}: {a} sends before computing")),
                }
            }
        }
    }

    // Global happens-before acyclicity: program order plus message edges.
    let mut id_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut n = 0;
    for (r, list) in s.actions.iter().enumerate() {
        for i in 0..list.len() {
            id_of.insert((r, i), n);
            n += 1;
        }
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for (r, list) in s.actions.iter().enumerate() {
        for i in 1..list.len() {
            adj[id_of[&(r, i - 1)]].push(id_of[&(r, i)]);
            indeg[id_of[&(r, i)]] += 1;
        }
    }
    for (chan, slist) in &sends {
        let rlist = &recvs[chan];
        for ((_, si), (_, ri)) in slist.iter().zip(rlist) {
            adj[id_of[&(chan.0, *si)]].push(id_of[&(chan.1, *ri)]);
            indeg[id_of[&(chan.1, *ri)]] += 1;
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut visited = 0;
    while let Some(x) = queue.pop_front() {
        visited += 1;
        for &y in &adj[x] {
            indeg[y] -= 1;
            if indeg[y] == 0 {
                queue.push_back(y);
            }
        }
    }
    if visited != n {
        let mut stuck = Vec::new();
        'outer: for (r, list) in s.actions.iter().enumerate() {
            for (i, a) in list.iter().enumerate() {
                if indeg[id_of[&(r, i)]] > 0 {
                    stuck.push(format!("rank {r}: {a}"));
                    if stuck.len() >= 4 {
                        break 'outer;
                    }
                }
            }
        }
        return err(format!(
            "deadlock: {} actions blocked in a dependency cycle, e.g. {}",
            n - visited,
            stuck.join("; ")
        ));
    }
    Ok(())
}

/// Integer unit costs for timeline analysis. Communication actions cost zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitCosts {
    pub forward: u64,
    pub backward_input: u64,
    pub backward_weight: u64,
}

impl Default for UnitCosts {
    fn default() -> Self {
        // Backward costs twice forward, split evenly between its halves.
        UnitCosts {
            forward: 1,
            backward_input: 1,
            backward_weight: 1,
        }
    }
}

impl UnitCosts {
    /// Forward and (whole) backward both cost one unit.
    pub fn uniform() -> UnitCosts {
        UnitCosts {
            forward: 1,
            backward_input: 1,
            backward_weight: 0,
        }
    }
}

/// Exact rational bubble fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Ratio {
        let g = gcd(num.max(1), den.max(1));
        if num == 0 {
            return Ratio { num: 0, den: 1 };
        }
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some((self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128)))
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone)]
pub struct TimelineReport {
    pub makespan: u64,
    /// Total compute time of the busiest rank.
    pub busy_max: u64,
    pub bubble_fraction: Ratio,
    /// Max over ranks and time of microbatches forwarded but not yet
    /// backwarded on a stage the rank owns.
    pub peak_inflight: usize,
    /// `(rank, action, start, end)` spans for inspection.
    pub spans: Vec<(usize, Action, u64, u64)>,
}

/// Discrete-event replay of a schedule under unit costs.
pub fn bubble_analysis(s: &PipelineSchedule, costs: UnitCosts) -> TimelineReport {
    // Matched message end-times keyed by (channel, index in channel order).
    let mut send_end: HashMap<(usize, usize, MsgKey), u64> = HashMap::new();
    let mut cursor = vec![0usize; s.degree];
    let mut clock = vec![0u64; s.degree];
    let mut spans = Vec::new();
    let mut inflight = vec![0i64; s.degree];
    let mut peak_inflight = 0i64;
    let cost_of = |a: &Action| match a {
        Action::Forward { .. } => costs.forward,
        Action::BackwardInput { .. } => costs.backward_input,
        Action::BackwardWeight { .. } => costs.backward_weight,
        _ => 0,
    };
    let total: usize = s.actions.iter().map(|l| l.len()).sum();
    let mut done = 0;
    while done < total {
        let mut progressed = false;
        for r in 0..s.degree {
            while cursor[r] < s.actions[r].len() {
                let a = s.actions[r][cursor[r]];
                // A receive waits for its matched send's completion.
                let ready_at = match a {
                    Action::RecvAct { stage, mb, peer } => {
                        match send_end.get(&(
                            peer,
                            r,
                            MsgKey {
                                grad: false,
                                stage: stage - 1,
                                mb,
                            },
                        )) {
                            Some(&t) => t,
                            None => break,
                        }
                    }
                    Action::RecvGrad { stage, mb, peer } => {
                        match send_end.get(&(
                            peer,
                            r,
                            MsgKey {
                                grad: true,
                                stage,
                                mb,
                            },
                        )) {
                            Some(&t) => t,
                            None => break,
                        }
                    }
                    _ => 0,
                };
                let start = clock[r].max(ready_at);
                let end = start + cost_of(&a);
                clock[r] = end;
                match a {
                    Action::SendAct { stage, mb, peer } => {
                        send_end.insert(
                            (
                                r,
                                peer,
                                MsgKey {
                                    grad: false,
                                    stage,
                                    mb,
                                },
                            ),
                            end,
                        );
                    }
                    Action::SendGrad { stage, mb, peer } => {
                        send_end.insert(
                            (
                                r,
                                peer,
                                MsgKey {
                                    grad: true,
                                    stage,
                                    mb,
                                },
                            ),
                            end,
                        );
                    }
                    Action::Forward { .. } => {
                        inflight[r] += 1;
                        peak_inflight = peak_inflight.max(inflight[r]);
                    }
                    Action::BackwardInput { .. } => {
                        inflight[r] -= 1;
                    }
                    _ => {}
                }
                spans.push((r, a, start, end));
                cursor[r] += 1;
                done += 1;
                progressed = true;
            }
        }
        assert!(
            progressed,
            "schedule deadlocked in timeline (validate first)"
        );
    }
    let makespan = clock.iter().copied().max().unwrap_or(0);
    let busy_max = (0..s.degree)
        .map(|r| s.actions[r].iter().map(&cost_of).sum::<u64>())
        .max()
        .unwrap_or(0);
    TimelineReport {
        makespan,
        busy_max,
        bubble_fraction: Ratio::new(makespan.saturating_sub(busy_max), makespan.max(1)),
        peak_inflight: peak_inflight.max(0) as usize,
        spans,
    }
}

/// Execute this rank's action list over the live transport.
///
/// `parts` maps the stages this rank owns to their model parts; `batch` is
/// the rank's local (data- and context-sharded) full batch, split into
/// `microbatches` along the batch dim. Returns the step loss (mean of the
/// microbatch losses), identical on every pipeline rank.
pub fn execute_rank_schedule(
    env: &ParallelEnv,
    schedule: &PipelineSchedule,
    pp_pos: usize,
    pp_group: &[usize],
    parts: &mut BTreeMap<usize, ModelPart>,
    batch: &TokenBatch,
    grad_scale: f64,
) -> RtResult<f64> {
    let m = schedule.microbatches;
    let mut inbox: HashMap<(bool, usize, usize), Tensor> = HashMap::new();
    let mut act_out: HashMap<(usize, usize), Tensor> = HashMap::new();
    let mut grad_out: HashMap<(usize, usize), Tensor> = HashMap::new();
    let mut losses = vec![0.0f64; 0];
    let mb_rows = batch.batch / m;
    for &a in &schedule.actions[pp_pos] {
        match a {
            Action::Forward { stage, mb } => {
                let part = parts
                    .get_mut(&stage)
                    .ok_or_else(|| RtError::Other(format!("stage {stage} not on this rank")))?;
                let incoming = if part.first {
                    None
                } else {
                    Some(inbox.remove(&(false, stage, mb)).ok_or_else(|| {
                        RtError::Other(format!("activation for stage {stage} mb {mb} not received"))
                    })?)
                };
                let mb_batch = batch.microbatch(mb, m);
                match part.forward(env, mb as u64, incoming, &mb_batch)? {
                    PartOutput::Acts(t) => {
                        act_out.insert((stage, mb), t);
                    }
                    PartOutput::Loss(l) => {
                        if losses.is_empty() {
                            losses = vec![0.0; m];
                        }
                        losses[mb] = l;
                    }
                }
            }
            Action::BackwardInput { stage, mb } => {
                let part = parts.get_mut(&stage).expect("validated ownership");
                let incoming = if part.last {
                    None
                } else {
                    // Gradients are keyed by their producing stage (stage + 1).
                    Some(inbox.remove(&(true, stage + 1, mb)).ok_or_else(|| {
                        RtError::Other(format!("gradient for stage {stage} mb {mb} not received"))
                    })?)
                };
                if let Some(d) = part.backward_input(env, mb as u64, incoming, grad_scale)? {
                    grad_out.insert((stage, mb), d);
                }
            }
            Action::BackwardWeight { stage, mb } => {
                parts
                    .get_mut(&stage)
                    .expect("validated ownership")
                    .backward_weights(mb as u64);
            }
            Action::SendAct { stage, mb, peer } => {
                let t = act_out.remove(&(stage, mb)).ok_or_else(|| {
                    RtError::Other(format!("no activation to send for {stage}/{mb}"))
                })?;
                env.ctx.send(pp_group[peer], &t, "pp.act")?;
            }
            Action::RecvAct { stage, mb, peer } => {
                let shape = parts
                    .values()
                    .next()
                    .expect("rank owns at least one stage")
                    .boundary_shape(env, mb_rows);
                let t = env.ctx.recv(pp_group[peer], &shape, DType::F64, "pp.act")?;
                inbox.insert((false, stage, mb), t);
            }
            Action::SendGrad { stage, mb, peer } => {
                let t = grad_out.remove(&(stage, mb)).ok_or_else(|| {
                    RtError::Other(format!("no gradient to send for {stage}/{mb}"))
                })?;
                env.ctx.send(pp_group[peer], &t, "pp.grad")?;
            }
            Action::RecvGrad { stage, mb, peer } => {
                let shape = parts
                    .values()
                    .next()
                    .expect("rank owns at least one stage")
                    .boundary_shape(env, mb_rows);
                let t = env
                    .ctx
                    .recv(pp_group[peer], &shape, DType::F64, "pp.grad")?;
                inbox.insert((true, stage, mb), t);
            }
        }
    }
    // Every rank reports the step loss: the last stage's microbatch mean,
    // reduced across the pipeline group.
    let my_loss = if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / m as f64
    };
    let summed =
        env.ctx
            .all_reduce(pp_group, &Tensor::scalar(my_loss), ReduceOp::Sum, "pp.loss")?;
    Ok(summed.data()[0])
}
