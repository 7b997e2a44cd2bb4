//! Tensor and sequence parallelism: sharding plans, loss-parallel
//! cross-entropy, and chunked matmul for communication overlap.

use crate::dtensor::{sharded_matmul, DTensor, MatmulStyle, Placement};
use crate::runtime::{ring_bytes, CollectiveKind, RankCtx, ReduceOp, RtError, RtResult};
use crate::tensor::{matmul, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// How one module of a transformer block participates in tensor parallelism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TpStyle {
    /// Weight sharded on its output-feature dim; output sharded on last dim.
    Colwise,
    /// Weight sharded on its input-feature dim; output is a partial sum.
    Rowwise,
    /// Computed on sequence-sharded activations (norms).
    SequenceParallel,
    /// Module boundary that regathers sequence shards to replicated input.
    PrepareInput,
}

/// Map from module paths (relative to a block, e.g. `attention.wq`) to styles.
#[derive(Debug, Clone, PartialEq)]
pub struct TpPlan {
    pub entries: BTreeMap<String, TpStyle>,
}

impl TpPlan {
    /// The standard plan for this crate's transformer block.
    pub fn llama() -> TpPlan {
        let mut entries = BTreeMap::new();
        entries.insert("attention_norm".into(), TpStyle::SequenceParallel);
        entries.insert("attention".into(), TpStyle::PrepareInput);
        entries.insert("attention.wq".into(), TpStyle::Colwise);
        entries.insert("attention.wk".into(), TpStyle::Colwise);
        entries.insert("attention.wv".into(), TpStyle::Colwise);
        entries.insert("attention.wo".into(), TpStyle::Rowwise);
        entries.insert("ffn_norm".into(), TpStyle::SequenceParallel);
        entries.insert("mlp".into(), TpStyle::PrepareInput);
        entries.insert("mlp.w1".into(), TpStyle::Colwise);
        entries.insert("mlp.w3".into(), TpStyle::Colwise);
        entries.insert("mlp.w2".into(), TpStyle::Rowwise);
        TpPlan { entries }
    }

    pub fn style_of(&self, module: &str) -> Option<TpStyle> {
        self.entries.get(module).copied()
    }

    /// Every attention/MLP weight of a block must appear exactly once.
    pub fn validate(&self) -> Result<(), String> {
        const REQUIRED: [&str; 7] = [
            "attention.wq",
            "attention.wk",
            "attention.wv",
            "attention.wo",
            "mlp.w1",
            "mlp.w3",
            "mlp.w2",
        ];
        for module in REQUIRED {
            match self.style_of(module) {
                Some(TpStyle::Colwise) | Some(TpStyle::Rowwise) => {}
                Some(other) => {
                    return Err(format!("{module} has non-matmul style {other:?}"));
                }
                None => return Err(format!("plan gap: {module} is missing")),
            }
        }
        Ok(())
    }
}

/// One rank's view of its tensor-parallel group.
#[derive(Debug, Clone)]
pub struct TpEnv {
    pub group: Vec<usize>,
    pub degree: usize,
    pub pos: usize,
    pub loss_parallel: bool,
    /// Matmul chunk count for communication overlap; 1 disables chunking.
    pub async_chunks: usize,
}

impl TpEnv {
    pub fn new(group: Vec<usize>, rank: usize, loss_parallel: bool, async_chunks: usize) -> TpEnv {
        let degree = group.len();
        let pos = group
            .iter()
            .position(|&r| r == rank)
            .expect("rank in group");
        TpEnv {
            group,
            degree,
            pos,
            loss_parallel,
            async_chunks: async_chunks.max(1),
        }
    }

    pub fn single(rank: usize) -> TpEnv {
        TpEnv::new(vec![rank], rank, false, 1)
    }

    pub fn enabled(&self) -> bool {
        self.degree > 1
    }
}

/// Loss-parallel cross-entropy over vocab-sharded logits.
///
/// `logits_local` is `[rows, vocab/tp]`, this rank owning global columns
/// `[vocab_lo, vocab_lo + width)`. The loss equals naive cross-entropy on the
/// gathered logits — computed via an all-reduce of row maxima, one of local
/// exp-sums, and one of the owner rank's target logit, never materializing the
/// full vocabulary on any rank. Row losses are summed and divided by
/// `normalizer` (total token count of the logical batch).
pub struct LossParallelOut {
    pub loss: f64,
    /// Row-wise softmax pieces needed by the backward pass.
    row_max: Vec<f64>,
    row_sum: Vec<f64>,
}

pub fn loss_parallel_ce(
    ctx: &RankCtx,
    env: &TpEnv,
    logits_local: &Tensor,
    targets: &[usize],
    vocab_lo: usize,
    global_vocab: usize,
    normalizer: f64,
) -> RtResult<LossParallelOut> {
    let (rows, width) = match logits_local.shape() {
        [r, w] => (*r, *w),
        other => {
            return Err(RtError::Other(format!(
                "loss_parallel_ce wants 2-D logits, got {other:?}"
            )))
        }
    };
    if rows != targets.len() {
        return Err(RtError::Other(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    for &t in targets {
        if t >= global_vocab {
            return Err(RtError::Other(format!(
                "target {t} out of vocab {global_vocab}"
            )));
        }
    }
    let ld = logits_local.data();
    let mut local_max = vec![f64::NEG_INFINITY; rows];
    for r in 0..rows {
        for c in 0..width {
            local_max[r] = local_max[r].max(ld[r * width + c]);
        }
    }
    let gmax = ctx
        .all_reduce(
            &env.group,
            &Tensor::from_vec(&[rows], local_max)?,
            ReduceOp::Max,
            "loss_parallel.max",
        )?
        .data()
        .to_vec();
    let mut local_sum = vec![0.0f64; rows];
    let mut local_target = vec![0.0f64; rows];
    for r in 0..rows {
        for c in 0..width {
            local_sum[r] += (ld[r * width + c] - gmax[r]).exp();
        }
        let t = targets[r];
        if t >= vocab_lo && t < vocab_lo + width {
            local_target[r] = ld[r * width + (t - vocab_lo)] - gmax[r];
        }
    }
    let gsum = ctx
        .all_reduce(
            &env.group,
            &Tensor::from_vec(&[rows], local_sum)?,
            ReduceOp::Sum,
            "loss_parallel.sumexp",
        )?
        .data()
        .to_vec();
    let gtarget = ctx
        .all_reduce(
            &env.group,
            &Tensor::from_vec(&[rows], local_target)?,
            ReduceOp::Sum,
            "loss_parallel.target",
        )?
        .data()
        .to_vec();
    let mut loss = 0.0;
    for r in 0..rows {
        loss += gsum[r].ln() - gtarget[r];
    }
    Ok(LossParallelOut {
        loss: loss / normalizer,
        row_max: gmax,
        row_sum: gsum,
    })
}

/// Gradient of [`loss_parallel_ce`] with respect to the local logits:
/// `(softmax − onehot) * scale / normalizer`, correctly vocab-sharded.
pub fn loss_parallel_ce_backward(
    out: &LossParallelOut,
    logits_local: &Tensor,
    targets: &[usize],
    vocab_lo: usize,
    normalizer: f64,
    scale: f64,
) -> RtResult<Tensor> {
    let (rows, width) = (logits_local.shape()[0], logits_local.shape()[1]);
    let ld = logits_local.data();
    let mut grad = vec![0.0f64; rows * width];
    let k = scale / normalizer;
    for r in 0..rows {
        for c in 0..width {
            let p = (ld[r * width + c] - out.row_max[r]).exp() / out.row_sum[r];
            grad[r * width + c] = p * k;
        }
        let t = targets[r];
        if t >= vocab_lo && t < vocab_lo + width {
            grad[r * width + (t - vocab_lo)] -= k;
        }
    }
    Ok(Tensor::from_vec(&[rows, width], grad)?)
}

/// Rowwise-sharded matmul computed in `chunks` row slices, each followed by
/// its own reduction; numerically identical to the unchunked product, with the
/// interior (overlappable) communication slices credited in the ledger.
pub fn chunked_tp_matmul(
    ctx: &RankCtx,
    x: &DTensor,
    w: &DTensor,
    chunks: usize,
) -> RtResult<Tensor> {
    if chunks < 1 {
        return Err(RtError::Other("chunk count must be at least 1".into()));
    }
    if chunks == 1 {
        let partial = sharded_matmul(x, w, MatmulStyle::Rowwise)?;
        return partial
            .redistribute(ctx, &[Placement::Replicate])
            .map(|dt| dt.local);
    }
    let rows = x.local.shape()[0];
    let group = x.mesh.ranks().to_vec();
    let w_members = group.len() as u64;
    let base = rows / chunks;
    let rem = rows % chunks;
    let mut outs = Vec::with_capacity(chunks);
    let mut start = 0usize;
    for c in 0..chunks {
        // Spread the remainder over the leading chunks.
        let len = base + usize::from(c < rem);
        if len == 0 {
            continue;
        }
        let x_chunk = x.local.narrow(0, start, start + len)?;
        start += len;
        let partial = matmul(&x_chunk, &w.local)?;
        let reduced = ctx.all_reduce(&group, &partial, ReduceOp::Sum, "async_tp.chunk")?;
        if c + 1 < chunks {
            ctx.ledger_mark_overlappable(ring_bytes(
                CollectiveKind::AllReduce,
                partial.byte_size(),
                w_members,
            ));
        }
        outs.push(reduced);
    }
    Ok(Tensor::cat(&outs, 0)?)
}
