//! SPMD transforms: fully sharded / hybrid data parallelism, tensor and
//! sequence parallelism, loss parallel, emulated float8 linears, activation
//! checkpointing, and the sharded execution engine that composes them.
//!
//! The engine is organized around [`ModelPart`]: a contiguous slice of the
//! model's units (embedding, blocks, final head) owned by one rank, with every
//! parameter stored as a dim-0 shard of its tensor-parallel slice. Pipeline
//! stages are parts; a non-pipelined model is a single part owning everything.

mod float8;
mod part;
mod tp;

pub use float8::{
    dynamic_scale, float8_linear, float8_linear_backward, quantize, Float8Config, Float8Saved,
    Float8Strategy, ScalingState,
};
pub use part::{ModelPart, PartBuild, PartOutput};
pub use tp::{
    chunked_tp_matmul, loss_parallel_ce, loss_parallel_ce_backward, LossParallelOut, TpEnv, TpPlan,
    TpStyle,
};

use crate::context_parallel::CpEnv;
use crate::dtensor::{chunk_range, reduce_scatter_chunked};
use crate::runtime::{RankCtx, ReduceOp, RtResult};
use crate::tensor::{init_param_region, scale, DType, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReshardPolicy {
    /// Reshard each unit after its forward except the part's last unit, which
    /// the backward pass would immediately regather anyway.
    DefaultExceptLast,
    Always,
    Never,
}

/// Data-parallel sharding configuration (degrees already resolved).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataParallelConfig {
    pub shard_degree: usize,
    pub replicate_degree: usize,
    pub param_compute_dtype: DType,
    pub reduce_dtype: DType,
    pub reshard_after_forward: ReshardPolicy,
}

impl Default for DataParallelConfig {
    fn default() -> Self {
        DataParallelConfig {
            shard_degree: 1,
            replicate_degree: 1,
            param_compute_dtype: DType::F64,
            reduce_dtype: DType::F64,
            reshard_after_forward: ReshardPolicy::DefaultExceptLast,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcMode {
    None,
    Full,
    /// Checkpoint every k-th block (k = 1 is the same as full).
    SelectiveLayer(usize),
    /// Save flagged high-intensity op outputs, recompute the rest.
    SelectiveOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ACConfig {
    pub mode: AcMode,
}

impl Default for ACConfig {
    fn default() -> Self {
        ACConfig { mode: AcMode::None }
    }
}

impl ACConfig {
    pub fn validate(&self) -> Result<(), String> {
        if let AcMode::SelectiveLayer(k) = self.mode {
            if k == 0 {
                return Err("selective layer period must be at least 1".into());
            }
        }
        Ok(())
    }
}

/// One rank's communication environment for a training step.
pub struct ParallelEnv<'a> {
    pub ctx: &'a RankCtx,
    pub tp: TpEnv,
    pub cp: Option<CpEnv>,
    pub dp_shard_group: Vec<usize>,
    pub dp_replicate_group: Vec<usize>,
}

impl<'a> ParallelEnv<'a> {
    /// Degenerate single-rank environment.
    pub fn single(ctx: &'a RankCtx) -> ParallelEnv<'a> {
        ParallelEnv {
            ctx,
            tp: TpEnv::single(ctx.rank()),
            cp: None,
            dp_shard_group: vec![ctx.rank()],
            dp_replicate_group: vec![ctx.rank()],
        }
    }

    pub fn dp_shard_degree(&self) -> usize {
        self.dp_shard_group.len()
    }

    pub fn dp_shard_pos(&self) -> usize {
        self.dp_shard_group
            .iter()
            .position(|&r| r == self.ctx.rank())
            .expect("rank in own dp group")
    }

    pub fn cp_degree(&self) -> usize {
        self.cp.as_ref().map(|c| c.degree).unwrap_or(1)
    }
}

/// How tensor parallelism slices one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpSlice {
    /// Full tensor on every tp rank; gradients all-reduce across tp.
    Replicated,
    /// Shard this tensor dim equally across the tp group.
    Dim(usize),
}

/// One parameter of a [`ModelPart`]: a dim-0 data-parallel shard of this
/// rank's tensor-parallel slice, plus transient gathered/gradient storage.
#[derive(Debug)]
pub struct ShardedParam {
    pub fqn: String,
    pub global_shape: Vec<usize>,
    /// Offsets of the tp slice within the global tensor.
    pub tp_offsets: Vec<usize>,
    /// Shape of the tp slice.
    pub tp_shape: Vec<usize>,
    pub tp_replicated: bool,
    /// Row range of the dp shard within the tp slice's dim 0.
    pub dp_rows: (usize, usize),
    shard: Tensor,
    gathered: Option<Tensor>,
    gathered_ledger_bytes: u64,
    grad: Option<Tensor>,
    grad_shard: Option<Tensor>,
}

impl ShardedParam {
    pub fn build(
        fqn: &str,
        global_shape: &[usize],
        slice: TpSlice,
        tp: &TpEnv,
        dp_shard_degree: usize,
        dp_pos: usize,
        master_seed: u64,
    ) -> ShardedParam {
        let mut tp_offsets = vec![0usize; global_shape.len()];
        let mut tp_shape = global_shape.to_vec();
        let tp_replicated = match slice {
            TpSlice::Replicated => tp.degree > 1,
            TpSlice::Dim(d) => {
                let (lo, hi) = chunk_range(global_shape[d], tp.degree, tp.pos);
                tp_offsets[d] = lo;
                tp_shape[d] = hi - lo;
                false
            }
        };
        let (row_lo, row_hi) = chunk_range(tp_shape[0], dp_shard_degree, dp_pos);
        let mut offsets = tp_offsets.clone();
        let mut lengths = tp_shape.clone();
        offsets[0] += row_lo;
        lengths[0] = row_hi - row_lo;
        let shard = init_param_region(fqn, global_shape, master_seed, &offsets, &lengths);
        ShardedParam {
            fqn: fqn.to_string(),
            global_shape: global_shape.to_vec(),
            tp_offsets,
            tp_shape,
            tp_replicated,
            dp_rows: (row_lo, row_hi),
            shard,
            gathered: None,
            gathered_ledger_bytes: 0,
            grad: None,
            grad_shard: None,
        }
    }

    pub fn shard(&self) -> &Tensor {
        &self.shard
    }

    pub fn shard_mut(&mut self) -> &mut Tensor {
        &mut self.shard
    }

    /// Replace the shard contents (checkpoint load).
    pub fn load_shard(&mut self, t: Tensor) {
        debug_assert_eq!(t.shape(), self.shard.shape());
        self.shard = t;
    }

    /// Hyperrectangle of the global tensor this rank's shard covers.
    pub fn shard_region(&self) -> (Vec<usize>, Vec<usize>) {
        let mut offsets = self.tp_offsets.clone();
        let mut lengths = self.tp_shape.clone();
        offsets[0] += self.dp_rows.0;
        lengths[0] = self.dp_rows.1 - self.dp_rows.0;
        (offsets, lengths)
    }

    pub fn is_gathered(&self) -> bool {
        self.gathered.is_some()
    }

    /// The full tp-local weight; panic if not gathered.
    pub fn weight(&self) -> &Tensor {
        self.gathered
            .as_ref()
            .expect("parameter used before unshard")
    }

    /// Materialize the full tp slice by all-gathering dp shards. The gather
    /// travels (and is ledgered) in the compute dtype; the result is stored
    /// back under the f64 tag with its values already rounded, so downstream
    /// kernels see one dtype.
    pub fn unshard(&mut self, env: &ParallelEnv, dp: &DataParallelConfig) -> RtResult<()> {
        if self.gathered.is_some() {
            return Ok(());
        }
        let casted = self.shard.cast(dp.param_compute_dtype);
        let full = if env.dp_shard_degree() > 1 {
            let parts = env
                .ctx
                .all_gather_parts(&env.dp_shard_group, &casted, "fsdp.unshard")?;
            Tensor::cat(&parts, 0)?
        } else {
            casted
        };
        self.gathered_ledger_bytes = full.byte_size();
        env.ctx.ledger_param_alloc(self.gathered_ledger_bytes);
        self.gathered = Some(full.cast(DType::F64));
        Ok(())
    }

    pub fn reshard(&mut self, ctx: &RankCtx) {
        if self.gathered.take().is_some() {
            ctx.ledger_param_free(self.gathered_ledger_bytes);
            self.gathered_ledger_bytes = 0;
        }
    }

    /// Accumulate a gradient of the full tp slice.
    pub fn accumulate_grad(&mut self, g: &Tensor) {
        debug_assert_eq!(g.shape(), self.tp_shape.as_slice());
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.clone()),
        }
    }

    /// Reduce the accumulated gradient across tp (replicated params only),
    /// cp, the dp shard group (pre-divided, sum reduce-scatter), and the dp
    /// replicate group.
    pub fn reduce_grad(&mut self, env: &ParallelEnv, dp: &DataParallelConfig) -> RtResult<()> {
        let mut g = match self.grad.take() {
            Some(g) => g,
            None => Tensor::zeros(&self.tp_shape),
        };
        if self.tp_replicated && env.tp.enabled() {
            g = env
                .ctx
                .all_reduce(&env.tp.group, &g, ReduceOp::Sum, "tp.grad_reduce")?;
        }
        if let Some(cp) = &env.cp {
            if cp.degree > 1 {
                g = env
                    .ctx
                    .all_reduce(&cp.group, &g, ReduceOp::Sum, "cp.grad_reduce")?;
            }
        }
        let s = env.dp_shard_degree();
        if s > 1 {
            g = scale(&g, 1.0 / s as f64).cast(dp.reduce_dtype);
            g = reduce_scatter_chunked(env.ctx, &env.dp_shard_group, &g, 0, "fsdp.grad_reduce")?;
        } else {
            g = g.cast(dp.reduce_dtype);
        }
        let r = env.dp_replicate_group.len();
        if r > 1 {
            g = scale(&g, 1.0 / r as f64);
            g = env.ctx.all_reduce(
                &env.dp_replicate_group,
                &g,
                ReduceOp::Sum,
                "hsdp.grad_allreduce",
            )?;
        }
        self.grad_shard = Some(g.cast(DType::F64));
        Ok(())
    }

    pub fn take_grad_shard(&mut self) -> Option<Tensor> {
        self.grad_shard.take()
    }

    pub fn grad_shard(&self) -> Option<&Tensor> {
        self.grad_shard.as_ref()
    }

    /// Reconstruct the full global tensor (test and checkpoint-conversion path).
    pub fn full_tensor(&self, env: &ParallelEnv) -> RtResult<Tensor> {
        let mut t = if env.dp_shard_degree() > 1 {
            let parts = env
                .ctx
                .all_gather_parts(&env.dp_shard_group, &self.shard, "param.full")?;
            Tensor::cat(&parts, 0)?
        } else {
            self.shard.clone()
        };
        if env.tp.enabled() && !self.tp_replicated {
            let dim = self
                .tp_offsets
                .iter()
                .position(|&o| o != 0)
                .unwrap_or_else(|| {
                    self.tp_shape
                        .iter()
                        .zip(&self.global_shape)
                        .position(|(a, b)| a != b)
                        .unwrap_or(0)
                });
            t = env
                .ctx
                .all_gather_dim(&env.tp.group, &t, dim, "param.full")?;
        }
        Ok(t)
    }
}
