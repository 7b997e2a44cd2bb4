//! The sharded execution engine: forward, backward, gradient reduction, and
//! optimizer steps for a contiguous slice of the model.
//!
//! Activations flow as `[batch, seq, dim]` tensors. With tensor parallelism
//! the sequence dim between blocks is sequence-sharded (`seq / tp` rows per
//! rank); attention and feed-forward interiors regather the sequence, compute
//! on column- or row-sharded weights, and reduce-scatter back. With context
//! parallelism the whole part runs on its two load-balanced sequence chunks
//! and attention runs as ring attention over the cp group.

use super::float8::{quantize, Float8Config, ScalingState};
use super::tp::{loss_parallel_ce, loss_parallel_ce_backward, LossParallelOut, TpPlan, TpStyle};
use super::{
    ACConfig, AcMode, DataParallelConfig, ParallelEnv, ReshardPolicy, ShardedParam, TpSlice,
};
use crate::context_parallel::{ring_attention, ring_attention_backward, RingSaved};
use crate::data::TokenBatch;
use crate::model::{MetaModel, ModelConfig, Sgd, ROPE_THETA};
use crate::runtime::{ring_bytes, CollectiveKind, ReduceOp, RtError, RtResult};
use crate::tensor::{self, build_freqs_cis, matmul, matmul_backward, Tensor};
use std::collections::BTreeMap;

const MM_WQ: usize = 0;
const MM_WK: usize = 1;
const MM_WV: usize = 2;
const MM_WO: usize = 3;
const MM_W1: usize = 4;
const MM_W3: usize = 5;
const MM_W2: usize = 6;

// Parameter order within a block unit.
const B_ATT_NORM: usize = 0;
const B_WQ: usize = 1;
const B_WK: usize = 2;
const B_WV: usize = 3;
const B_WO: usize = 4;
const B_FFN_NORM: usize = 5;
const B_W1: usize = 6;
const B_W3: usize = 7;
const B_W2: usize = 8;

const H_NORM: usize = 0;
const H_OUT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Embedding,
    Block(usize),
    Head,
}

pub struct Unit {
    pub kind: UnitKind,
    pub params: Vec<ShardedParam>,
}

/// Where backward weight gradients go: straight into the parameters, or into
/// the per-microbatch deferral buffer.
#[derive(Debug, Clone, Copy)]
struct GradSink {
    defer_for: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SavePolicy {
    Everything,
    InputOnly,
    OpLevel,
}

/// Per-matmul float8 record: the scales used, so recomputation and backward
/// reproduce the forward bit-for-bit.
type F8Scales = Vec<Option<(f64, f64)>>;

struct BlockActs {
    input: Tensor,
    x1: Tensor,
    x1_full: Tensor,
    q_rot: Tensor,
    k_rot: Tensor,
    v_heads: Tensor,
    attn: AttnSaved,
    attn_flat: Tensor,
    h_mid: Tensor,
    x2: Tensor,
    x2_full: Tensor,
    a1: Tensor,
    a3: Tensor,
    act: Tensor,
    f8: F8Scales,
}

enum AttnSaved {
    Sdpa { probs: Tensor },
    Ring(Box<RingSaved>),
}

impl BlockActs {
    fn bytes(&self) -> u64 {
        let attn = match &self.attn {
            AttnSaved::Sdpa { probs } => probs.byte_size(),
            AttnSaved::Ring(r) => r.saved_bytes(),
        };
        self.input.byte_size()
            + self.x1.byte_size()
            + self.x1_full.byte_size()
            + self.q_rot.byte_size()
            + self.k_rot.byte_size()
            + self.v_heads.byte_size()
            + attn
            + self.attn_flat.byte_size()
            + self.h_mid.byte_size()
            + self.x2.byte_size()
            + self.x2_full.byte_size()
            + self.a1.byte_size()
            + self.a3.byte_size()
            + self.act.byte_size()
    }
}

enum BlockSaved {
    Acts(Box<BlockActs>),
    Input {
        input: Tensor,
        f8: F8Scales,
    },
    /// Flagged high-intensity op outputs are kept; the rest recomputes.
    OpLevel {
        input: Tensor,
        ops: Vec<Tensor>,
        f8: F8Scales,
    },
}

enum LossSaved {
    Naive {
        probs: Tensor,
    },
    Parallel {
        out: LossParallelOut,
        logits_local: Tensor,
        vocab_lo: usize,
    },
}

struct HeadSaved {
    input: Tensor,
    x_full: Tensor,
    loss: LossSaved,
    labels: Vec<usize>,
    normalizer: f64,
}

enum UnitSaved {
    Embedding {
        ids: Vec<usize>,
        dims: (usize, usize),
    },
    Block {
        state: BlockSaved,
        bytes: u64,
    },
    Head {
        state: Box<HeadSaved>,
        bytes: u64,
    },
}

pub enum PartOutput {
    /// Boundary activations for the next stage: `[batch, seq_sp, dim]`.
    Acts(Tensor),
    /// Microbatch loss (mean over the microbatch's logical tokens).
    Loss(f64),
}

pub struct PartBuild<'a> {
    pub meta: &'a MetaModel,
    /// Unit index range over `0..n_layers + 2` (0 is the embedding,
    /// `n_layers + 1` the final norm + output head).
    pub unit_range: std::ops::Range<usize>,
    pub dp: DataParallelConfig,
    /// How each block module participates in tensor parallelism.
    pub plan: TpPlan,
    pub ac: ACConfig,
    pub f8: Float8Config,
    pub master_seed: u64,
    /// Keep parameters gathered across microbatches (pipeline stages).
    pub zero2: bool,
}

impl<'a> PartBuild<'a> {
    pub fn new(meta: &'a MetaModel) -> PartBuild<'a> {
        PartBuild {
            meta,
            unit_range: 0..ModelPart::total_units(&meta.cfg),
            dp: DataParallelConfig::default(),
            plan: TpPlan::llama(),
            ac: ACConfig::default(),
            f8: Float8Config::default(),
            master_seed: 0,
            zero2: false,
        }
    }
}

fn slice_for_style(style: TpStyle, fqn: &str) -> RtResult<TpSlice> {
    match style {
        TpStyle::Colwise => Ok(TpSlice::Dim(1)),
        TpStyle::Rowwise => Ok(TpSlice::Dim(0)),
        TpStyle::SequenceParallel => Ok(TpSlice::Replicated),
        TpStyle::PrepareInput => Err(RtError::Other(format!(
            "{fqn}: input-preparation style carries no weight slicing"
        ))),
    }
}

pub struct ModelPart {
    pub cfg: ModelConfig,
    pub dp: DataParallelConfig,
    pub ac: ACConfig,
    pub f8: Float8Config,
    pub units: Vec<Unit>,
    pub first: bool,
    pub last: bool,
    zero2: bool,
    freqs_local: Tensor,
    f8_states: BTreeMap<String, (ScalingState, ScalingState)>,
    saved: BTreeMap<u64, Vec<UnitSaved>>,
    /// Weight gradients computed by a deferred-weight backward, keyed by
    /// microbatch, waiting for the matching backward-weight action.
    pending_weight_grads: BTreeMap<u64, Vec<(usize, usize, Tensor)>>,
}

fn to_heads(t: &Tensor, b: usize, s: usize, heads: usize, hd: usize) -> RtResult<Tensor> {
    let x = t.reshape(&[b, s, heads, hd])?;
    let x = tensor::permute(&x, &[0, 2, 1, 3])?;
    Ok(x.reshape(&[b * heads, s, hd])?)
}

fn from_heads(t: &Tensor, b: usize, s: usize, heads: usize, hd: usize) -> RtResult<Tensor> {
    let x = t.reshape(&[b, heads, s, hd])?;
    let x = tensor::permute(&x, &[0, 2, 1, 3])?;
    Ok(x.reshape(&[b * s, heads * hd])?)
}

impl ModelPart {
    pub fn total_units(cfg: &ModelConfig) -> usize {
        cfg.n_layers + 2
    }

    pub fn build(env: &ParallelEnv, b: PartBuild) -> RtResult<ModelPart> {
        let cfg = b.meta.cfg.clone();
        let tp = &env.tp;
        if !cfg.n_heads.is_multiple_of(tp.degree) {
            return Err(RtError::Other(format!(
                "n_heads {} not divisible by tp degree {}",
                cfg.n_heads, tp.degree
            )));
        }
        b.plan
            .validate()
            .map_err(|e| RtError::Other(format!("tensor-parallel plan: {e}")))?;
        let dp_degree = env.dp_shard_degree();
        let dp_pos = env.dp_shard_pos();
        let mut units = Vec::new();
        let total = Self::total_units(&cfg);
        assert!(b.unit_range.end <= total);
        let mk = |fqn: &str, shape: &[usize], slice: TpSlice| {
            ShardedParam::build(fqn, shape, slice, tp, dp_degree, dp_pos, b.master_seed)
        };
        // Module path within a block -> slicing, from the plan.
        let planned = |module: &str, fqn: &str| -> RtResult<TpSlice> {
            match b.plan.style_of(module) {
                Some(style) => slice_for_style(style, fqn),
                None => Err(RtError::Other(format!("plan gap: {module} ({fqn})"))),
            }
        };
        for u in b.unit_range.clone() {
            if u == 0 {
                units.push(Unit {
                    kind: UnitKind::Embedding,
                    params: vec![mk(
                        "tok_embeddings.weight",
                        &[cfg.vocab_size, cfg.dim],
                        TpSlice::Dim(0),
                    )],
                });
            } else if u <= cfg.n_layers {
                let l = u - 1;
                let d = cfg.dim;
                let f = cfg.ffn_hidden;
                let p = |module: &str, shape: &[usize]| -> RtResult<ShardedParam> {
                    let fqn = format!("layers.{l}.{module}.weight");
                    Ok(mk(&fqn, shape, planned(module, &fqn)?))
                };
                units.push(Unit {
                    kind: UnitKind::Block(l),
                    params: vec![
                        p("attention_norm", &[d])?,
                        p("attention.wq", &[d, d])?,
                        p("attention.wk", &[d, d])?,
                        p("attention.wv", &[d, d])?,
                        p("attention.wo", &[d, d])?,
                        p("ffn_norm", &[d])?,
                        p("mlp.w1", &[d, f])?,
                        p("mlp.w3", &[d, f])?,
                        p("mlp.w2", &[f, d])?,
                    ],
                });
            } else {
                units.push(Unit {
                    kind: UnitKind::Head,
                    params: vec![
                        mk("norm.weight", &[cfg.dim], TpSlice::Replicated),
                        mk("output.weight", &[cfg.dim, cfg.vocab_size], TpSlice::Dim(1)),
                    ],
                });
            }
        }
        let freqs_full = build_freqs_cis(cfg.seq_len, cfg.head_dim(), ROPE_THETA);
        let freqs_local = match &env.cp {
            Some(cp) if cp.degree > 1 => cp.shard_tensor(&freqs_full, 0)?,
            _ => freqs_full,
        };
        let first = b.unit_range.start == 0;
        let last = b.unit_range.end == total;
        // Shards are resident from initialization on.
        let resident: u64 = units
            .iter()
            .flat_map(|u| u.params.iter())
            .map(|p| p.shard().byte_size())
            .sum();
        env.ctx.ledger_param_alloc(resident);
        Ok(ModelPart {
            cfg,
            dp: b.dp,
            ac: b.ac,
            f8: b.f8,
            units,
            first,
            last,
            zero2: b.zero2,
            freqs_local,
            f8_states: BTreeMap::new(),
            saved: BTreeMap::new(),
            pending_weight_grads: BTreeMap::new(),
        })
    }

    /// Boundary activation shape for a microbatch of `rows` samples.
    pub fn boundary_shape(&self, env: &ParallelEnv, rows: usize) -> Vec<usize> {
        let s_cp = self.cfg.seq_len / env.cp_degree();
        vec![rows, s_cp / env.tp.degree, self.cfg.dim]
    }

    fn policy_for(&self, block: usize) -> SavePolicy {
        match self.ac.mode {
            AcMode::None => SavePolicy::Everything,
            AcMode::Full => SavePolicy::InputOnly,
            AcMode::SelectiveLayer(k) => {
                if block.is_multiple_of(k.max(1)) {
                    SavePolicy::InputOnly
                } else {
                    SavePolicy::Everything
                }
            }
            AcMode::SelectiveOp => SavePolicy::OpLevel,
        }
    }

    fn unshard_unit(&mut self, env: &ParallelEnv, u: usize) -> RtResult<()> {
        for p in &mut self.units[u].params {
            p.unshard(env, &self.dp)?;
        }
        Ok(())
    }

    fn reshard_unit(&mut self, env: &ParallelEnv, u: usize) {
        for p in &mut self.units[u].params {
            p.reshard(env.ctx);
        }
    }

    /// Gather every unit's parameters (pipeline ZeRO-2: once per step).
    pub fn unshard_all(&mut self, env: &ParallelEnv) -> RtResult<()> {
        for u in 0..self.units.len() {
            self.unshard_unit(env, u)?;
        }
        Ok(())
    }

    pub fn reshard_all(&mut self, env: &ParallelEnv) {
        for u in 0..self.units.len() {
            self.reshard_unit(env, u);
        }
    }

    fn gather_sp(&self, env: &ParallelEnv, t: &Tensor, label: &str) -> RtResult<Tensor> {
        if env.tp.enabled() {
            env.ctx.all_gather_dim(&env.tp.group, t, 1, label)
        } else {
            Ok(t.clone())
        }
    }

    fn scatter_sp(&self, env: &ParallelEnv, t: &Tensor, label: &str) -> RtResult<Tensor> {
        if env.tp.enabled() {
            env.ctx.reduce_scatter_dim(&env.tp.group, t, 1, label)
        } else {
            Ok(t.clone())
        }
    }

    /// Forward matmul for slot `mm` of a block: plain, or float8-quantized
    /// with per-tensor scales (reused verbatim when recomputing).
    fn mm_forward(
        &mut self,
        fqn: &str,
        x: &Tensor,
        w: &Tensor,
        reuse: Option<(f64, f64)>,
    ) -> RtResult<(Tensor, Option<(f64, f64)>)> {
        if !self.f8.enabled {
            return Ok((matmul(x, w)?, None));
        }
        let (sx, sw) = match reuse {
            Some(s) => s,
            None => {
                let states = self.f8_states.entry(fqn.to_string()).or_default();
                let sx = states.0.scale_for(&self.f8, x.max_abs());
                let sw = states.1.scale_for(&self.f8, w.max_abs());
                (sx, sw)
            }
        };
        let x_hat = dequantized(x, sx);
        let w_hat = dequantized(w, sw);
        let raw = matmul(&x_hat, &w_hat)?;
        let rounded: Vec<f64> = raw.data().iter().map(|&v| v as f32 as f64).collect();
        Ok((Tensor::from_vec(raw.shape(), rounded)?, Some((sx, sw))))
    }

    fn mm_backward_of(
        x: &Tensor,
        w: &Tensor,
        d_out: &Tensor,
        scales: Option<(f64, f64)>,
    ) -> RtResult<(Tensor, Tensor)> {
        let (dx, dw) = match scales {
            None => matmul_backward(x, w, d_out)?,
            Some((sx, sw)) => {
                let x_hat = dequantized(x, sx);
                let w_hat = dequantized(w, sw);
                matmul_backward(&x_hat, &w_hat, d_out)?
            }
        };
        Ok((dx, dw))
    }

    /// Rowwise projection with its tensor-parallel reduction, optionally
    /// chunked along the sequence so interior reductions could overlap with
    /// the remaining chunk compute.
    #[allow(clippy::too_many_arguments)]
    fn rowwise_project(
        &mut self,
        env: &ParallelEnv,
        fqn: &str,
        x_rows: &Tensor, // [b*s, in_local]
        w: &Tensor,
        dims: (usize, usize),
        reuse: Option<(f64, f64)>,
        label: &str,
    ) -> RtResult<(Tensor, Option<(f64, f64)>)> {
        let (b, s) = dims;
        let d = self.cfg.dim;
        let k = env.tp.async_chunks;
        let chunkable = env.tp.enabled() && k > 1 && s % (k * env.tp.degree) == 0;
        if !chunkable {
            let (out_rows, scales) = self.mm_forward(fqn, x_rows, w, reuse)?;
            let partial = out_rows.reshape(&[b, s, d])?;
            let out = self.scatter_sp(env, &partial, label)?;
            return Ok((out, scales));
        }
        // Quantization scales (when float8 is on) cover the whole tensor, so
        // chunking changes only the communication pattern, not the values.
        let scales = if self.f8.enabled {
            match reuse {
                Some(s) => Some(s),
                None => {
                    let states = self.f8_states.entry(fqn.to_string()).or_default();
                    let sx = states.0.scale_for(&self.f8, x_rows.max_abs());
                    let sw = states.1.scale_for(&self.f8, w.max_abs());
                    Some((sx, sw))
                }
            }
        } else {
            None
        };
        let span = s / k;
        let mut outs = Vec::with_capacity(k);
        for c in 0..k {
            let x_span =
                x_rows
                    .reshape(&[b, s, x_rows.shape()[1]])?
                    .narrow(1, c * span, (c + 1) * span)?;
            let rows = x_span.reshape(&[b * span, x_rows.shape()[1]])?;
            let (out_rows, _) = match scales {
                None => (matmul(&rows, w)?, None::<(f64, f64)>),
                Some((sx, sw)) => {
                    let raw = matmul(&dequantized(&rows, sx), &dequantized(w, sw))?;
                    let rounded: Vec<f64> = raw.data().iter().map(|&v| v as f32 as f64).collect();
                    (Tensor::from_vec(raw.shape(), rounded)?, None)
                }
            };
            let partial = out_rows.reshape(&[b, span, d])?;
            let reduced = self.scatter_sp(env, &partial, label)?;
            if c + 1 < k {
                env.ctx.ledger_mark_overlappable(ring_bytes(
                    CollectiveKind::ReduceScatter,
                    partial.byte_size(),
                    env.tp.degree as u64,
                ));
            }
            outs.push(reduced);
        }
        Ok((Tensor::cat(&outs, 1)?, scales))
    }

    /// Run one block's forward math, returning the output and everything a
    /// direct backward pass would need. `f8_reuse` pins quantization scales
    /// during recomputation.
    fn run_block(
        &mut self,
        env: &ParallelEnv,
        u: usize,
        input: &Tensor,
        f8_reuse: Option<&F8Scales>,
    ) -> RtResult<(Tensor, Box<BlockActs>)> {
        let cfg = self.cfg.clone();
        let eps = cfg.norm_eps;
        let (b, s_sp, d) = match input.shape() {
            [b, s, d] => (*b, *s, *d),
            other => return Err(RtError::Other(format!("block input not 3-D: {other:?}"))),
        };
        let h_loc = cfg.n_heads / env.tp.degree;
        let hd = cfg.head_dim();
        let reuse = |slot: usize| f8_reuse.and_then(|v| v[slot]);
        let fqns: Vec<String> = self.units[u].params.iter().map(|p| p.fqn.clone()).collect();
        let fqn = |slot: usize| fqns[slot].clone();

        let x1 = tensor::rms_norm(input, self.units[u].params[B_ATT_NORM].weight(), eps)?;
        let x1_full = self.gather_sp(env, &x1, "tp.block_gather")?;
        let s = x1_full.shape()[1];
        let _ = s_sp;
        let flat = x1_full.reshape(&[b * s, d])?;

        let wq = self.units[u].params[B_WQ].weight().clone();
        let wk = self.units[u].params[B_WK].weight().clone();
        let wv = self.units[u].params[B_WV].weight().clone();
        let (q, f8_q) = self.mm_forward(&fqn(B_WQ), &flat, &wq, reuse(MM_WQ))?;
        let (kproj, f8_k) = self.mm_forward(&fqn(B_WK), &flat, &wk, reuse(MM_WK))?;
        let (vproj, f8_v) = self.mm_forward(&fqn(B_WV), &flat, &wv, reuse(MM_WV))?;

        let freqs = &self.freqs_local;
        let q_rot = tensor::rotary_apply(&to_heads(&q, b, s, h_loc, hd)?, freqs)?;
        let k_rot = tensor::rotary_apply(&to_heads(&kproj, b, s, h_loc, hd)?, freqs)?;
        let v_heads = to_heads(&vproj, b, s, h_loc, hd)?;

        let (attn_out, attn) = match &env.cp {
            Some(cp) if cp.degree > 1 => {
                let (out, saved) = ring_attention(env.ctx, cp, &q_rot, &k_rot, &v_heads, true)?;
                (out, AttnSaved::Ring(Box::new(saved)))
            }
            _ => {
                let sdpa = tensor::sdpa(&q_rot, &k_rot, &v_heads, true)?;
                (sdpa.out, AttnSaved::Sdpa { probs: sdpa.probs })
            }
        };
        let attn_flat = from_heads(&attn_out, b, s, h_loc, hd)?;
        let wo = self.units[u].params[B_WO].weight().clone();
        let (attn_sp, f8_o) = self.rowwise_project(
            env,
            &fqn(B_WO),
            &attn_flat,
            &wo,
            (b, s),
            reuse(MM_WO),
            "tp.block_scatter",
        )?;
        let h_mid = tensor::add(input, &attn_sp)?;

        let x2 = tensor::rms_norm(&h_mid, self.units[u].params[B_FFN_NORM].weight(), eps)?;
        let x2_full = self.gather_sp(env, &x2, "tp.block_gather")?;
        let flat2 = x2_full.reshape(&[b * s, d])?;
        let w1 = self.units[u].params[B_W1].weight().clone();
        let w3 = self.units[u].params[B_W3].weight().clone();
        let (a1, f8_1) = self.mm_forward(&fqn(B_W1), &flat2, &w1, reuse(MM_W1))?;
        let (a3, f8_3) = self.mm_forward(&fqn(B_W3), &flat2, &w3, reuse(MM_W3))?;
        let act = tensor::mul(&tensor::silu(&a1), &a3)?;
        let w2 = self.units[u].params[B_W2].weight().clone();
        let (mlp_sp, f8_2) = self.rowwise_project(
            env,
            &fqn(B_W2),
            &act,
            &w2,
            (b, s),
            reuse(MM_W2),
            "tp.block_scatter",
        )?;
        let out = tensor::add(&h_mid, &mlp_sp)?;

        let acts = Box::new(BlockActs {
            input: input.clone(),
            x1,
            x1_full,
            q_rot,
            k_rot,
            v_heads,
            attn,
            attn_flat,
            h_mid,
            x2,
            x2_full,
            a1,
            a3,
            act,
            f8: vec![f8_q, f8_k, f8_v, f8_o, f8_1, f8_3, f8_2],
        });
        Ok((out, acts))
    }

    fn sink_grad(&mut self, sink: GradSink, u: usize, pidx: usize, g: Tensor) {
        if let Some(mb) = sink.defer_for {
            self.pending_weight_grads
                .entry(mb)
                .or_default()
                .push((u, pidx, g));
        } else {
            self.units[u].params[pidx].accumulate_grad(&g);
        }
    }

    /// Apply the weight gradients deferred by a split backward (the
    /// backward-weight half of a zero-bubble style schedule).
    pub fn backward_weights(&mut self, mb: u64) {
        if let Some(list) = self.pending_weight_grads.remove(&mb) {
            for (u, p, g) in list {
                self.units[u].params[p].accumulate_grad(&g);
            }
        }
    }

    /// Exact backward through one block given its forward state.
    fn block_backward_math(
        &mut self,
        env: &ParallelEnv,
        u: usize,
        acts: &BlockActs,
        d_out: &Tensor,
        sink: GradSink,
    ) -> RtResult<Tensor> {
        let cfg = self.cfg.clone();
        let eps = cfg.norm_eps;
        let (b, s_sp, d) = match d_out.shape() {
            [b, s, d] => (*b, *s, *d),
            _ => unreachable!(),
        };
        let _ = s_sp;
        let s = acts.x1_full.shape()[1];
        let h_loc = cfg.n_heads / env.tp.degree;
        let hd = cfg.head_dim();

        // Feed-forward path.
        let d_mlp_full = self.gather_sp(env, d_out, "tp.bwd_gather")?;
        let d_mlp_rows = d_mlp_full.reshape(&[b * s, d])?;
        let w2 = self.units[u].params[B_W2].weight().clone();
        let (d_act, d_w2) = Self::mm_backward_of(&acts.act, &w2, &d_mlp_rows, acts.f8[MM_W2])?;
        self.sink_grad(sink, u, B_W2, d_w2);
        let d_a3 = tensor::mul(&d_act, &tensor::silu(&acts.a1))?;
        let d_a1 = tensor::silu_backward(&acts.a1, &tensor::mul(&d_act, &acts.a3)?)?;
        let flat2 = acts.x2_full.reshape(&[b * s, d])?;
        let w1 = self.units[u].params[B_W1].weight().clone();
        let w3 = self.units[u].params[B_W3].weight().clone();
        let (d_flat2_a, d_w1) = Self::mm_backward_of(&flat2, &w1, &d_a1, acts.f8[MM_W1])?;
        let (d_flat2_b, d_w3) = Self::mm_backward_of(&flat2, &w3, &d_a3, acts.f8[MM_W3])?;
        self.sink_grad(sink, u, B_W1, d_w1);
        self.sink_grad(sink, u, B_W3, d_w3);
        let d_x2_full = tensor::add(&d_flat2_a, &d_flat2_b)?.reshape(&[b, s, d])?;
        let d_x2 = self.scatter_sp(env, &d_x2_full, "tp.bwd_scatter")?;
        let (d_hmid_norm, d_ffn_norm) = tensor::rms_norm_backward(
            &acts.h_mid,
            self.units[u].params[B_FFN_NORM].weight(),
            eps,
            &d_x2,
        )?;
        self.sink_grad(sink, u, B_FFN_NORM, d_ffn_norm);
        let d_h_mid = tensor::add(d_out, &d_hmid_norm)?;

        // Attention path.
        let d_attn_full = self.gather_sp(env, &d_h_mid, "tp.bwd_gather")?;
        let d_attn_rows = d_attn_full.reshape(&[b * s, d])?;
        let wo = self.units[u].params[B_WO].weight().clone();
        let (d_attn_flat, d_wo) =
            Self::mm_backward_of(&acts.attn_flat, &wo, &d_attn_rows, acts.f8[MM_WO])?;
        self.sink_grad(sink, u, B_WO, d_wo);
        let d_attn_heads = {
            let x = d_attn_flat.reshape(&[b, s, h_loc, hd])?;
            tensor::permute(&x, &[0, 2, 1, 3])?.reshape(&[b * h_loc, s, hd])?
        };
        let (d_q_rot, d_k_rot, d_v_heads) = match &acts.attn {
            AttnSaved::Sdpa { probs } => tensor::sdpa_backward(
                &acts.q_rot,
                &acts.k_rot,
                &acts.v_heads,
                probs,
                &d_attn_heads,
            )?,
            AttnSaved::Ring(saved) => {
                let cp = env.cp.as_ref().expect("ring state implies cp env");
                ring_attention_backward(env.ctx, cp, saved, &d_attn_heads)?
            }
        };
        let freqs = &self.freqs_local;
        let d_q = from_heads(&tensor::rotary_backward(&d_q_rot, freqs)?, b, s, h_loc, hd)?;
        let d_k = from_heads(&tensor::rotary_backward(&d_k_rot, freqs)?, b, s, h_loc, hd)?;
        let d_v = from_heads(&d_v_heads, b, s, h_loc, hd)?;
        let flat1 = acts.x1_full.reshape(&[b * s, d])?;
        let wq = self.units[u].params[B_WQ].weight().clone();
        let wk = self.units[u].params[B_WK].weight().clone();
        let wv = self.units[u].params[B_WV].weight().clone();
        let (d_flat_q, d_wq) = Self::mm_backward_of(&flat1, &wq, &d_q, acts.f8[MM_WQ])?;
        let (d_flat_k, d_wk) = Self::mm_backward_of(&flat1, &wk, &d_k, acts.f8[MM_WK])?;
        let (d_flat_v, d_wv) = Self::mm_backward_of(&flat1, &wv, &d_v, acts.f8[MM_WV])?;
        self.sink_grad(sink, u, B_WQ, d_wq);
        self.sink_grad(sink, u, B_WK, d_wk);
        self.sink_grad(sink, u, B_WV, d_wv);
        let d_x1_full =
            tensor::add(&tensor::add(&d_flat_q, &d_flat_k)?, &d_flat_v)?.reshape(&[b, s, d])?;
        let d_x1 = self.scatter_sp(env, &d_x1_full, "tp.bwd_scatter")?;
        let (d_input_norm, d_attn_norm) = tensor::rms_norm_backward(
            &acts.input,
            self.units[u].params[B_ATT_NORM].weight(),
            eps,
            &d_x1,
        )?;
        self.sink_grad(sink, u, B_ATT_NORM, d_attn_norm);
        tensor::add(&d_h_mid, &d_input_norm).map_err(Into::into)
    }

    fn embed_forward(
        &mut self,
        env: &ParallelEnv,
        batch: &TokenBatch,
    ) -> RtResult<(Tensor, UnitSaved)> {
        let p = &self.units[0].params[0];
        let w = p.weight();
        let d = self.cfg.dim;
        let lo = p.tp_offsets[0];
        let width = p.tp_shape[0];
        let mut rows = vec![0.0f64; batch.input_ids.len() * d];
        for (i, &id) in batch.input_ids.iter().enumerate() {
            if id >= self.cfg.vocab_size {
                return Err(RtError::Other(format!(
                    "token id {id} out of vocab {}",
                    self.cfg.vocab_size
                )));
            }
            if id >= lo && id < lo + width {
                let src = &w.data()[(id - lo) * d..(id - lo + 1) * d];
                rows[i * d..(i + 1) * d].copy_from_slice(src);
            }
        }
        let partial = Tensor::from_vec(&[batch.batch, batch.seq, d], rows)?;
        let h = if env.tp.enabled() {
            env.ctx
                .reduce_scatter_dim(&env.tp.group, &partial, 1, "tp.embed_scatter")?
        } else {
            partial
        };
        let saved = UnitSaved::Embedding {
            ids: batch.input_ids.clone(),
            dims: (batch.batch, batch.seq),
        };
        Ok((h, saved))
    }

    fn embed_backward(
        &mut self,
        env: &ParallelEnv,
        saved: &UnitSaved,
        d: &Tensor,
        sink: GradSink,
    ) -> RtResult<()> {
        let (ids, _) = match saved {
            UnitSaved::Embedding { ids, dims } => (ids, dims),
            _ => unreachable!(),
        };
        let d_full = if env.tp.enabled() {
            env.ctx
                .all_gather_dim(&env.tp.group, d, 1, "tp.embed_gather")?
        } else {
            d.clone()
        };
        let p = &self.units[0].params[0];
        let dim = self.cfg.dim;
        let lo = p.tp_offsets[0];
        let width = p.tp_shape[0];
        let rows = d_full.reshape(&[ids.len(), dim])?;
        let mut grad = vec![0.0f64; width * dim];
        for (i, &id) in ids.iter().enumerate() {
            if id >= lo && id < lo + width {
                let src = &rows.data()[i * dim..(i + 1) * dim];
                for (g, v) in grad[(id - lo) * dim..(id - lo + 1) * dim]
                    .iter_mut()
                    .zip(src)
                {
                    *g += v;
                }
            }
        }
        self.sink_grad(sink, 0, 0, Tensor::from_vec(&[width, dim], grad)?);
        Ok(())
    }

    fn head_forward(
        &mut self,
        env: &ParallelEnv,
        u: usize,
        input: &Tensor,
        batch: &TokenBatch,
    ) -> RtResult<(f64, UnitSaved)> {
        let eps = self.cfg.norm_eps;
        let (b, _, d) = match input.shape() {
            [b, s, d] => (*b, *s, *d),
            _ => unreachable!(),
        };
        let x_f = tensor::rms_norm(input, self.units[u].params[H_NORM].weight(), eps)?;
        let x_full = self.gather_sp(env, &x_f, "tp.head_gather")?;
        let s = x_full.shape()[1];
        let flat = x_full.reshape(&[b * s, d])?;
        let w_out = self.units[u].params[H_OUT].weight().clone();
        let logits_local = matmul(&flat, &w_out)?;
        let cp_degree = env.cp_degree();
        let normalizer = (b * s * cp_degree) as f64;
        let labels = batch.labels.clone();
        let (mut loss, loss_saved) = if env.tp.enabled() && env.tp.loss_parallel {
            let vocab_lo = self.units[u].params[H_OUT].tp_offsets[1];
            let out = loss_parallel_ce(
                env.ctx,
                &env.tp,
                &logits_local,
                &labels,
                vocab_lo,
                self.cfg.vocab_size,
                normalizer,
            )?;
            (
                out.loss,
                LossSaved::Parallel {
                    out,
                    logits_local: logits_local.clone(),
                    vocab_lo,
                },
            )
        } else {
            let logits = if env.tp.enabled() {
                let parts =
                    env.ctx
                        .all_gather_parts(&env.tp.group, &logits_local, "tp.logit_gather")?;
                Tensor::cat(&parts, 1)?
            } else {
                logits_local
            };
            let (mean_loss, probs) = tensor::softmax_cross_entropy(&logits, &labels)?;
            let loss = mean_loss * (b * s) as f64 / normalizer;
            (loss, LossSaved::Naive { probs })
        };
        if let Some(cp) = &env.cp {
            if cp.degree > 1 {
                loss = env
                    .ctx
                    .all_reduce(&cp.group, &Tensor::scalar(loss), ReduceOp::Sum, "cp.loss")?
                    .data()[0];
            }
        }
        let saved = HeadSaved {
            input: input.clone(),
            x_full,
            loss: loss_saved,
            labels,
            normalizer,
        };
        let bytes = saved.input.byte_size()
            + saved.x_full.byte_size()
            + match &saved.loss {
                LossSaved::Naive { probs } => probs.byte_size(),
                LossSaved::Parallel { logits_local, .. } => logits_local.byte_size() + 16,
            };
        Ok((
            loss,
            UnitSaved::Head {
                state: Box::new(saved),
                bytes,
            },
        ))
    }

    fn head_backward(
        &mut self,
        env: &ParallelEnv,
        u: usize,
        saved: &HeadSaved,
        grad_scale: f64,
        sink: GradSink,
    ) -> RtResult<Tensor> {
        let eps = self.cfg.norm_eps;
        let (b, s, d) = match saved.x_full.shape() {
            [b, s, d] => (*b, *s, *d),
            _ => unreachable!(),
        };
        let d_logits = match &saved.loss {
            LossSaved::Naive { probs } => {
                // Undo the row-mean and apply the logical-token normalizer.
                let base = tensor::softmax_cross_entropy_backward(probs, &saved.labels)?;
                let rows = (b * s) as f64;
                let d_full = tensor::scale(&base, grad_scale * rows / saved.normalizer);
                if env.tp.enabled() {
                    // Slice this rank's vocab columns.
                    let lo = self.units[u].params[H_OUT].tp_offsets[1];
                    let width = self.units[u].params[H_OUT].tp_shape[1];
                    d_full.narrow(1, lo, lo + width)?
                } else {
                    d_full
                }
            }
            LossSaved::Parallel {
                out,
                logits_local,
                vocab_lo,
            } => loss_parallel_ce_backward(
                out,
                logits_local,
                &saved.labels,
                *vocab_lo,
                saved.normalizer,
                grad_scale,
            )?,
        };
        let flat = saved.x_full.reshape(&[b * s, d])?;
        let w_out = self.units[u].params[H_OUT].weight().clone();
        let (d_flat, d_w_out) = matmul_backward(&flat, &w_out, &d_logits)?;
        self.sink_grad(sink, u, H_OUT, d_w_out);
        let d_x_full = d_flat.reshape(&[b, s, d])?;
        let d_x_f = self.scatter_sp(env, &d_x_full, "tp.bwd_scatter")?;
        let (d_input, d_norm) = tensor::rms_norm_backward(
            &saved.input,
            self.units[u].params[H_NORM].weight(),
            eps,
            &d_x_f,
        )?;
        self.sink_grad(sink, u, H_NORM, d_norm);
        Ok(d_input)
    }

    /// Forward one microbatch. `incoming` is the previous stage's boundary
    /// activation (absent on the first stage); `batch` is this rank's local
    /// (data- and context-sharded) microbatch.
    pub fn forward(
        &mut self,
        env: &ParallelEnv,
        mb: u64,
        incoming: Option<Tensor>,
        batch: &TokenBatch,
    ) -> RtResult<PartOutput> {
        let mut saved_units: Vec<UnitSaved> = Vec::with_capacity(self.units.len());
        let mut h = incoming;
        let mut loss = None;
        for u in 0..self.units.len() {
            self.unshard_unit(env, u)?;
            match self.units[u].kind {
                UnitKind::Embedding => {
                    debug_assert!(h.is_none(), "embedding stage got an incoming activation");
                    let (out, saved) = self.embed_forward(env, batch)?;
                    h = Some(out);
                    saved_units.push(saved);
                }
                UnitKind::Block(block_idx) => {
                    let input = h.take().expect("block needs an activation");
                    let policy = self.policy_for(block_idx);
                    let (out, acts) = self.run_block(env, u, &input, None)?;
                    let state = match policy {
                        SavePolicy::Everything => BlockSaved::Acts(acts),
                        SavePolicy::InputOnly => BlockSaved::Input {
                            input,
                            f8: acts.f8.clone(),
                        },
                        SavePolicy::OpLevel => BlockSaved::OpLevel {
                            input,
                            ops: vec![
                                acts.q_rot.clone(),
                                acts.v_heads.clone(),
                                acts.a1.clone(),
                                acts.attn_flat.clone(),
                            ],
                            f8: acts.f8.clone(),
                        },
                    };
                    let bytes = match &state {
                        BlockSaved::Acts(a) => a.bytes(),
                        BlockSaved::Input { input, .. } => input.byte_size(),
                        BlockSaved::OpLevel { input, ops, .. } => {
                            input.byte_size() + ops.iter().map(|t| t.byte_size()).sum::<u64>()
                        }
                    };
                    env.ctx.ledger_activation_alloc(bytes);
                    saved_units.push(UnitSaved::Block { state, bytes });
                    h = Some(out);
                }
                UnitKind::Head => {
                    let input = h.take().expect("head needs an activation");
                    let (l, saved) = self.head_forward(env, u, &input, batch)?;
                    if let UnitSaved::Head { bytes, .. } = &saved {
                        env.ctx.ledger_activation_alloc(*bytes);
                    }
                    saved_units.push(saved);
                    loss = Some(l);
                }
            }
            if !self.zero2 {
                let reshard = match self.dp.reshard_after_forward {
                    ReshardPolicy::Always => true,
                    ReshardPolicy::Never => false,
                    ReshardPolicy::DefaultExceptLast => u + 1 < self.units.len(),
                };
                if reshard {
                    self.reshard_unit(env, u);
                }
            }
        }
        self.saved.insert(mb, saved_units);
        match loss {
            Some(l) => Ok(PartOutput::Loss(l)),
            None => Ok(PartOutput::Acts(h.expect("non-last part produces acts"))),
        }
    }

    /// Backward one microbatch. `incoming` is the gradient of this part's
    /// boundary output (absent on the last stage, whose gradient starts at the
    /// loss). Returns the gradient for the previous stage's output.
    pub fn backward(
        &mut self,
        env: &ParallelEnv,
        mb: u64,
        incoming: Option<Tensor>,
        grad_scale: f64,
    ) -> RtResult<Option<Tensor>> {
        self.backward_impl(env, mb, incoming, grad_scale, false)
    }

    /// Backward that computes input gradients now and defers weight-gradient
    /// application to [`Self::backward_weights`].
    pub fn backward_input(
        &mut self,
        env: &ParallelEnv,
        mb: u64,
        incoming: Option<Tensor>,
        grad_scale: f64,
    ) -> RtResult<Option<Tensor>> {
        self.backward_impl(env, mb, incoming, grad_scale, true)
    }

    fn backward_impl(
        &mut self,
        env: &ParallelEnv,
        mb: u64,
        incoming: Option<Tensor>,
        grad_scale: f64,
        defer_weights: bool,
    ) -> RtResult<Option<Tensor>> {
        let saved_units = self
            .saved
            .remove(&mb)
            .ok_or_else(|| RtError::Other(format!("no saved forward state for microbatch {mb}")))?;
        let sink = GradSink {
            defer_for: defer_weights.then_some(mb),
        };
        let mut d: Option<Tensor> = incoming;
        for (u, saved) in saved_units.into_iter().enumerate().rev() {
            self.unshard_unit(env, u)?;
            match saved {
                UnitSaved::Head { state, bytes } => {
                    debug_assert!(d.is_none(), "last stage starts backward at its loss");
                    let out = self.head_backward(env, u, &state, grad_scale, sink)?;
                    env.ctx.ledger_activation_free(bytes);
                    d = Some(out);
                }
                UnitSaved::Block { state, bytes } => {
                    let d_out = d.take().expect("block backward needs a gradient");
                    let acts: Box<BlockActs> = match state {
                        BlockSaved::Acts(a) => a,
                        BlockSaved::Input { input, f8 } | BlockSaved::OpLevel { input, f8, .. } => {
                            // Deterministic recomputation (same collectives,
                            // same float8 scales) rebuilds the forward state.
                            let (_, acts) = self.run_block(env, u, &input, Some(&f8))?;
                            env.ctx.ledger_activation_alloc(acts.bytes());
                            env.ctx.ledger_activation_free(acts.bytes());
                            acts
                        }
                    };
                    let out = self.block_backward_math(env, u, &acts, &d_out, sink)?;
                    env.ctx.ledger_activation_free(bytes);
                    d = Some(out);
                }
                UnitSaved::Embedding { .. } => {
                    let d_out = d.take().expect("embedding backward needs a gradient");
                    let saved_ref = saved;
                    self.embed_backward(env, &saved_ref, &d_out, sink)?;
                    d = None;
                }
            }
            if !self.zero2 && self.dp.reshard_after_forward != ReshardPolicy::Never {
                self.reshard_unit(env, u);
            }
        }
        Ok(d)
    }

    /// Reduce all accumulated gradients (tp-replicated params across tp, then
    /// cp, then the data-parallel shard and replicate groups).
    pub fn reduce_gradients(&mut self, env: &ParallelEnv) -> RtResult<()> {
        let dp = self.dp.clone();
        for unit in &mut self.units {
            for p in &mut unit.params {
                p.reduce_grad(env, &dp)?;
            }
        }
        Ok(())
    }

    pub fn optimizer_step(&mut self, opt: &mut Sgd) {
        for unit in &mut self.units {
            for p in &mut unit.params {
                if let Some(g) = p.take_grad_shard() {
                    let fqn = p.fqn.clone();
                    opt.step(&fqn, p.shard_mut(), &g);
                }
            }
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &ShardedParam> {
        self.units.iter().flat_map(|u| u.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ShardedParam> {
        self.units.iter_mut().flat_map(|u| u.params.iter_mut())
    }
}

fn dequantized(t: &Tensor, scale: f64) -> Tensor {
    let q = quantize(t, scale);
    let inv = 1.0 / scale;
    Tensor::from_vec(t.shape(), q.data().iter().map(|&v| v * inv).collect())
        .expect("shape preserved")
}
