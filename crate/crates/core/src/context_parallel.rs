//! Context parallelism: causal load-balanced sequence sharding and ring
//! attention.
//!
//! The sequence splits into `2W` contiguous chunks for a group of `W` ranks;
//! rank `r` holds chunks `{r, 2W-1-r}`. Pairing an early chunk with a late one
//! equalizes the causal attention work across ranks exactly. Attention runs
//! against every key/value chunk — fetched either by one all-gather or by
//! rotating blocks around a p2p ring — and partial results merge with running
//! log-sum-exp renormalization in fixed ascending chunk order, so both rotate
//! methods produce bit-identical outputs.

use crate::data::TokenBatch;
use crate::runtime::{RankCtx, RtError, RtResult};
use crate::tensor::{DType, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotateMethod {
    /// Gather all key/value shards once.
    Allgather,
    /// Rotate key/value blocks around the ring, one peer per step.
    AlltoallP2pRing,
}

/// Per-buffer sharding description: which dim is the sequence dim and whether
/// the unsharded original should be kept around after the scope ends.
#[derive(Debug, Clone, Copy)]
pub struct CpShardSpec {
    pub seq_dim: usize,
    pub restore: bool,
}

/// One rank's view of a context-parallel group.
#[derive(Debug, Clone)]
pub struct CpEnv {
    pub group: Vec<usize>,
    pub degree: usize,
    /// Position within the group.
    pub pos: usize,
    pub rotate: RotateMethod,
    pub global_seq: usize,
}

impl CpEnv {
    pub fn new(
        group: Vec<usize>,
        rank: usize,
        rotate: RotateMethod,
        global_seq: usize,
    ) -> RtResult<CpEnv> {
        let degree = group.len();
        if !global_seq.is_multiple_of(2 * degree) {
            return Err(RtError::Other(format!(
                "sequence length {global_seq} not divisible by 2*cp ({})",
                2 * degree
            )));
        }
        let pos = group
            .iter()
            .position(|&r| r == rank)
            .ok_or_else(|| RtError::Other("rank not in cp group".into()))?;
        Ok(CpEnv {
            group,
            degree,
            pos,
            rotate,
            global_seq,
        })
    }

    pub fn chunk_len(&self) -> usize {
        self.global_seq / (2 * self.degree)
    }

    /// Chunk ids this position owns: `{pos, 2W-1-pos}`.
    pub fn my_chunks(&self) -> (usize, usize) {
        (self.pos, 2 * self.degree - 1 - self.pos)
    }

    pub fn local_seq(&self) -> usize {
        2 * self.chunk_len()
    }

    /// Global start positions of the two local chunks.
    pub fn chunk_starts(&self) -> (usize, usize) {
        let len = self.chunk_len();
        let (a, b) = self.my_chunks();
        (a * len, b * len)
    }

    /// Slice one buffer's sequence dim down to this rank's two chunks.
    pub fn shard_tensor(&self, t: &Tensor, seq_dim: usize) -> RtResult<Tensor> {
        if t.shape()[seq_dim] != self.global_seq {
            return Err(RtError::Other(format!(
                "buffer seq dim {} has extent {}, expected {}",
                seq_dim,
                t.shape()[seq_dim],
                self.global_seq
            )));
        }
        let len = self.chunk_len();
        let (s1, s2) = self.chunk_starts();
        let a = t.narrow(seq_dim, s1, s1 + len)?;
        let b = t.narrow(seq_dim, s2, s2 + len)?;
        Ok(Tensor::cat(&[a, b], seq_dim)?)
    }

    /// Shard a token batch (both ids and labels are sequence-dim buffers).
    pub fn shard_batch(&self, batch: &TokenBatch) -> TokenBatch {
        let len = self.chunk_len();
        let (s1, s2) = self.chunk_starts();
        let a = batch.narrow_seq(s1, s1 + len);
        let b = batch.narrow_seq(s2, s2 + len);
        let mut input_ids = Vec::with_capacity(batch.batch * 2 * len);
        let mut labels = Vec::with_capacity(batch.batch * 2 * len);
        for row in 0..batch.batch {
            input_ids.extend_from_slice(&a.input_ids[row * len..(row + 1) * len]);
            input_ids.extend_from_slice(&b.input_ids[row * len..(row + 1) * len]);
            labels.extend_from_slice(&a.labels[row * len..(row + 1) * len]);
            labels.extend_from_slice(&b.labels[row * len..(row + 1) * len]);
        }
        TokenBatch {
            input_ids,
            labels,
            batch: batch.batch,
            seq: 2 * len,
        }
    }

    /// Global position of local sequence index `i`.
    pub fn global_pos(&self, i: usize) -> usize {
        let len = self.chunk_len();
        let (s1, s2) = self.chunk_starts();
        if i < len {
            s1 + i
        } else {
            s2 + (i - len)
        }
    }

    /// Owner group position and local half of a global chunk id.
    fn chunk_owner(&self, chunk: usize) -> (usize, usize) {
        let w = self.degree;
        if chunk < w {
            (chunk, 0)
        } else {
            (2 * w - 1 - chunk, 1)
        }
    }
}

/// Shard a set of buffers per their specs (the scope entry operation).
pub fn shard_sequence(env: &CpEnv, buffers: &[(Tensor, CpShardSpec)]) -> RtResult<Vec<Tensor>> {
    buffers
        .iter()
        .map(|(t, spec)| env.shard_tensor(t, spec.seq_dim))
        .collect()
}

/// State ring attention keeps for its backward pass: inputs, outputs, and the
/// per-row softmax statistics. Score blocks are recomputed chunk by chunk.
pub struct RingSaved {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub out: Tensor,
    row_max: Vec<f64>,
    row_sum: Vec<f64>,
    causal: bool,
}

impl RingSaved {
    pub fn saved_bytes(&self) -> u64 {
        self.q.byte_size()
            + self.k.byte_size()
            + self.v.byte_size()
            + self.out.byte_size()
            + 8 * (self.row_max.len() + self.row_sum.len()) as u64
    }
}

/// Fetch all key/value chunks (ascending chunk id) via the configured method.
fn collect_kv_chunks(
    ctx: &RankCtx,
    env: &CpEnv,
    k: &Tensor,
    v: &Tensor,
) -> RtResult<Vec<(Tensor, Tensor)>> {
    let w = env.degree;
    let len = env.chunk_len();
    let mut per_pos: Vec<Option<(Tensor, Tensor)>> = vec![None; w];
    match env.rotate {
        RotateMethod::Allgather => {
            let ks = ctx.all_gather_parts(&env.group, k, "cp.ring.allgather_k")?;
            let vs = ctx.all_gather_parts(&env.group, v, "cp.ring.allgather_v")?;
            for (p, (kp, vp)) in ks.into_iter().zip(vs).enumerate() {
                per_pos[p] = Some((kp, vp));
            }
        }
        RotateMethod::AlltoallP2pRing => {
            let mut cur_k = k.clone();
            let mut cur_v = v.clone();
            let mut holder = env.pos;
            per_pos[holder] = Some((cur_k.clone(), cur_v.clone()));
            let next = env.group[(env.pos + 1) % w];
            let prev = env.group[(env.pos + w - 1) % w];
            for _ in 0..w.saturating_sub(1) {
                ctx.send(next, &cur_k, "cp.ring.rotate_k")?;
                ctx.send(next, &cur_v, "cp.ring.rotate_v")?;
                cur_k = ctx.recv(prev, cur_k.shape(), DType::F64, "cp.ring.rotate_k")?;
                cur_v = ctx.recv(prev, cur_v.shape(), DType::F64, "cp.ring.rotate_v")?;
                holder = (holder + w - 1) % w;
                per_pos[holder] = Some((cur_k.clone(), cur_v.clone()));
            }
        }
    }
    // Split each position's two chunks and order by global chunk id.
    let mut chunks = Vec::with_capacity(2 * w);
    for chunk in 0..2 * w {
        let (owner_pos, half) = env.chunk_owner(chunk);
        let (kp, vp) = per_pos[owner_pos]
            .as_ref()
            .expect("collected all positions");
        let lo = half * len;
        chunks.push((kp.narrow(1, lo, lo + len)?, vp.narrow(1, lo, lo + len)?));
    }
    Ok(chunks)
}

/// Ring attention over local shards `[heads, local_seq, head_dim]` laid out
/// by [`CpEnv::shard_tensor`]. The gathered output across the group equals
/// full-sequence attention.
pub fn ring_attention(
    ctx: &RankCtx,
    env: &CpEnv,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: bool,
) -> RtResult<(Tensor, RingSaved)> {
    let (heads, s_loc, hd) = match q.shape() {
        [h, s, d] => (*h, *s, *d),
        other => {
            return Err(RtError::Other(format!(
                "ring_attention wants 3-D q, got {other:?}"
            )))
        }
    };
    let len = env.chunk_len();
    debug_assert_eq!(s_loc, 2 * len);
    let scale = 1.0 / (hd as f64).sqrt();
    let kv = collect_kv_chunks(ctx, env, k, v)?;

    let rows = heads * s_loc;
    let mut acc = vec![0.0f64; rows * hd];
    let mut row_max = vec![f64::NEG_INFINITY; rows];
    let mut row_sum = vec![0.0f64; rows];
    let qd = q.data();

    for (chunk, (kc, vc)) in kv.iter().enumerate() {
        let col_start = chunk * len;
        let kd = kc.data();
        let vd = vc.data();
        for h in 0..heads {
            for i in 0..s_loc {
                let gi = env.global_pos(i);
                let visible = if causal {
                    if col_start > gi {
                        0
                    } else {
                        (gi + 1 - col_start).min(len)
                    }
                } else {
                    len
                };
                if visible == 0 {
                    continue;
                }
                let row = h * s_loc + i;
                let qrow = &qd[row * hd..(row + 1) * hd];
                let mut scores = vec![0.0f64; visible];
                let mut m_blk = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let krow = &kd[(h * len + j) * hd..(h * len + j + 1) * hd];
                    *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    m_blk = m_blk.max(*s);
                }
                let mut l_blk = 0.0;
                let mut o_blk = vec![0.0f64; hd];
                for (j, s) in scores.iter().enumerate() {
                    let e = (s - m_blk).exp();
                    l_blk += e;
                    let vrow = &vd[(h * len + j) * hd..(h * len + j + 1) * hd];
                    for (o, val) in o_blk.iter_mut().zip(vrow) {
                        *o += e * val;
                    }
                }
                // Log-sum-exp merge with the running stats.
                let m_old = row_max[row];
                if m_old == f64::NEG_INFINITY {
                    row_max[row] = m_blk;
                    row_sum[row] = l_blk;
                    acc[row * hd..(row + 1) * hd].copy_from_slice(&o_blk);
                } else {
                    let m_new = m_old.max(m_blk);
                    let f_old = (m_old - m_new).exp();
                    let f_blk = (m_blk - m_new).exp();
                    row_sum[row] = row_sum[row] * f_old + l_blk * f_blk;
                    for (a, o) in acc[row * hd..(row + 1) * hd].iter_mut().zip(&o_blk) {
                        *a = *a * f_old + o * f_blk;
                    }
                    row_max[row] = m_new;
                }
            }
        }
    }

    let mut out = vec![0.0f64; rows * hd];
    for row in 0..rows {
        let l = row_sum[row];
        if l > 0.0 {
            for d in 0..hd {
                out[row * hd + d] = acc[row * hd + d] / l;
            }
        }
    }
    let out = Tensor::from_vec(&[heads, s_loc, hd], out)?;
    let saved = RingSaved {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        out: out.clone(),
        row_max,
        row_sum,
        causal,
    };
    Ok((out, saved))
}

/// Backward of [`ring_attention`]: recomputes score blocks chunk by chunk
/// using the saved softmax statistics, then exchanges each rank's key/value
/// gradient contributions so every rank ends with the gradients of its own
/// shards.
pub fn ring_attention_backward(
    ctx: &RankCtx,
    env: &CpEnv,
    saved: &RingSaved,
    d_out: &Tensor,
) -> RtResult<(Tensor, Tensor, Tensor)> {
    let (heads, s_loc, hd) = match saved.q.shape() {
        [h, s, d] => (*h, *s, *d),
        _ => unreachable!(),
    };
    let w = env.degree;
    let len = env.chunk_len();
    let scale = 1.0 / (hd as f64).sqrt();
    let kv = collect_kv_chunks(ctx, env, &saved.k, &saved.v)?;

    let qd = saved.q.data();
    let od = saved.out.data();
    let dod = d_out.data();
    // delta_i = dOut_i . Out_i collapses the softmax normalizer's gradient.
    let rows = heads * s_loc;
    let mut delta = vec![0.0f64; rows];
    for row in 0..rows {
        delta[row] = (0..hd).map(|d| dod[row * hd + d] * od[row * hd + d]).sum();
    }

    let mut d_q = vec![0.0f64; saved.q.numel()];
    // Gradients for every chunk in the global sequence; exchanged afterwards.
    let mut d_k_chunks: Vec<Vec<f64>> = (0..2 * w).map(|_| vec![0.0; heads * len * hd]).collect();
    let mut d_v_chunks: Vec<Vec<f64>> = (0..2 * w).map(|_| vec![0.0; heads * len * hd]).collect();

    for (chunk, (kc, vc)) in kv.iter().enumerate() {
        let col_start = chunk * len;
        let kd = kc.data();
        let vd = vc.data();
        let dk = &mut d_k_chunks[chunk];
        let dv = &mut d_v_chunks[chunk];
        for h in 0..heads {
            for i in 0..s_loc {
                let gi = env.global_pos(i);
                let visible = if saved.causal {
                    if col_start > gi {
                        0
                    } else {
                        (gi + 1 - col_start).min(len)
                    }
                } else {
                    len
                };
                if visible == 0 {
                    continue;
                }
                let row = h * s_loc + i;
                if saved.row_sum[row] == 0.0 {
                    continue;
                }
                let qrow = &qd[row * hd..(row + 1) * hd];
                let dorow = &dod[row * hd..(row + 1) * hd];
                for j in 0..visible {
                    let krow = &kd[(h * len + j) * hd..(h * len + j + 1) * hd];
                    let vrow = &vd[(h * len + j) * hd..(h * len + j + 1) * hd];
                    let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    let p = (s - saved.row_max[row]).exp() / saved.row_sum[row];
                    if p == 0.0 {
                        continue;
                    }
                    let dp: f64 = dorow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    let ds = p * (dp - delta[row]) * scale;
                    for d in 0..hd {
                        d_q[row * hd + d] += ds * krow[d];
                        dk[(h * len + j) * hd + d] += ds * qrow[d];
                        dv[(h * len + j) * hd + d] += p * dorow[d];
                    }
                }
            }
        }
    }

    // Route each chunk's gradient to its owner and sum contributions.
    let pack = |chunks: &[Vec<f64>]| -> RtResult<Vec<Tensor>> {
        (0..w)
            .map(|pos| {
                let first = pos;
                let second = 2 * w - 1 - pos;
                let mut data = Vec::with_capacity(heads * 2 * len * hd);
                // Interleave per head so the packed tensor is [heads, 2*len, hd].
                for h in 0..heads {
                    data.extend_from_slice(&chunks[first][h * len * hd..(h + 1) * len * hd]);
                    data.extend_from_slice(&chunks[second][h * len * hd..(h + 1) * len * hd]);
                }
                Ok(Tensor::from_vec(&[heads, 2 * len, hd], data)?)
            })
            .collect()
    };
    let sum_parts = |parts: Vec<Tensor>| -> Tensor {
        let mut acc = Tensor::zeros(&[heads, 2 * len, hd]);
        for p in parts {
            for (a, b) in acc.data_mut().iter_mut().zip(p.data()) {
                *a += b;
            }
        }
        acc
    };
    let d_k_parts = ctx.all_to_all(&env.group, pack(&d_k_chunks)?, "cp.ring.grad_k")?;
    let d_v_parts = ctx.all_to_all(&env.group, pack(&d_v_chunks)?, "cp.ring.grad_v")?;
    Ok((
        Tensor::from_vec(saved.q.shape(), d_q)?,
        sum_parts(d_k_parts),
        sum_parts(d_v_parts),
    ))
}

/// Count of unmasked causal score pairs a rank evaluates; the load-balanced
/// layout makes this identical across ranks.
pub fn causal_pair_count(global_seq: usize, degree: usize, pos: usize) -> usize {
    let len = global_seq / (2 * degree);
    let count_chunk = |chunk: usize| {
        // Columns fully visible from earlier chunks plus the triangular self block.
        chunk * len * len + len * (len + 1) / 2
    };
    let (a, b) = (pos, 2 * degree - 1 - pos);
    count_chunk(a) + count_chunk(b)
}
