//! Distributed tensors: a global tensor stored as per-rank local shards.
//!
//! A [`DTensor`] pairs a local shard with a [`DeviceMesh`] and one
//! [`Placement`] per mesh dimension. `Shard(d)` splits tensor dim `d` across
//! that mesh dimension with ceiling-division chunks (trailing ranks may hold
//! empty shards), `Replicate` copies, and `Partial` holds unreduced per-rank
//! addends. Redistribution between placements is built from all-gather,
//! all-reduce, reduce-scatter, and local slicing, and always preserves the
//! reconstructed global tensor.

use crate::runtime::{DeviceMesh, RankCtx, ReduceOp, RtError, RtResult};
use crate::tensor::{matmul, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    /// Split tensor dimension `.0` across this mesh dimension.
    Shard(usize),
    Replicate,
    /// Unreduced per-rank addends (sum semantics).
    Partial,
}

impl Placement {
    pub fn is_shard(&self) -> bool {
        matches!(self, Placement::Shard(_))
    }
}

/// Ceiling-division chunk `pos` of `extent` split `ways` ways: chunk `c`
/// covers `[c*ceil(n/w), min((c+1)*ceil(n/w), n))`; trailing chunks may be empty.
pub fn chunk_range(extent: usize, ways: usize, pos: usize) -> (usize, usize) {
    let chunk = extent.div_ceil(ways);
    let start = (pos * chunk).min(extent);
    let end = ((pos + 1) * chunk).min(extent);
    (start, end)
}

/// Chunk lengths for all positions.
pub fn chunk_lengths(extent: usize, ways: usize) -> Vec<usize> {
    (0..ways)
        .map(|p| {
            let (s, e) = chunk_range(extent, ways, p);
            e - s
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DTensor {
    pub local: Tensor,
    pub mesh: DeviceMesh,
    pub placements: Vec<Placement>,
    pub global_shape: Vec<usize>,
}

fn validate_placements(
    global_shape: &[usize],
    mesh: &DeviceMesh,
    placements: &[Placement],
) -> RtResult<()> {
    if placements.len() != mesh.ndim() {
        return Err(RtError::Other(format!(
            "{} placements for a {}-d mesh",
            placements.len(),
            mesh.ndim()
        )));
    }
    let mut seen = vec![false; global_shape.len()];
    for p in placements {
        if let Placement::Shard(d) = p {
            if *d >= global_shape.len() {
                return Err(RtError::Other(format!(
                    "Shard({d}) out of range for global shape {global_shape:?}"
                )));
            }
            if seen[*d] {
                return Err(RtError::Other(format!(
                    "tensor dim {d} sharded by more than one mesh dim"
                )));
            }
            seen[*d] = true;
        }
    }
    Ok(())
}

impl DTensor {
    /// Shard a full tensor (present identically on every rank) onto the mesh.
    pub fn distribute(
        ctx: &RankCtx,
        full: &Tensor,
        mesh: &DeviceMesh,
        placements: &[Placement],
    ) -> RtResult<DTensor> {
        validate_placements(full.shape(), mesh, placements)?;
        let coords = mesh.coords_of(ctx.rank())?;
        let mut local = full.clone();
        let mut zero_out = false;
        for (dim, p) in placements.iter().enumerate() {
            match p {
                Placement::Shard(d) => {
                    let (s, e) = chunk_range(local.shape()[*d], mesh.shape()[dim], coords[dim]);
                    local = local.narrow(*d, s, e)?;
                }
                Placement::Replicate => {}
                Placement::Partial => {
                    // Canonical partial decomposition: coordinate 0 holds the
                    // addend, the rest hold zeros.
                    if coords[dim] != 0 {
                        zero_out = true;
                    }
                }
            }
        }
        if zero_out {
            local = Tensor::zeros(local.shape());
        }
        Ok(DTensor {
            local,
            mesh: mesh.clone(),
            placements: placements.to_vec(),
            global_shape: full.shape().to_vec(),
        })
    }

    /// Wrap an already-correct local shard without communication.
    pub fn from_local(
        local: Tensor,
        mesh: &DeviceMesh,
        placements: &[Placement],
        global_shape: &[usize],
    ) -> RtResult<DTensor> {
        validate_placements(global_shape, mesh, placements)?;
        Ok(DTensor {
            local,
            mesh: mesh.clone(),
            placements: placements.to_vec(),
            global_shape: global_shape.to_vec(),
        })
    }

    /// The hyperrectangle of the global tensor this rank holds, as
    /// `(offsets, lengths)` per tensor dim. Partial placements hold addends,
    /// not regions, and return an error.
    pub fn local_region(&self, rank: usize) -> RtResult<(Vec<usize>, Vec<usize>)> {
        let coords = self.mesh.coords_of(rank)?;
        let mut offsets = vec![0usize; self.global_shape.len()];
        let mut lengths = self.global_shape.clone();
        for (dim, p) in self.placements.iter().enumerate() {
            match p {
                Placement::Shard(d) => {
                    let (s, e) =
                        chunk_range(self.global_shape[*d], self.mesh.shape()[dim], coords[dim]);
                    offsets[*d] = s;
                    lengths[*d] = e - s;
                }
                Placement::Replicate => {}
                Placement::Partial => {
                    return Err(RtError::Other(
                        "partial placement holds addends, not a region".into(),
                    ))
                }
            }
        }
        Ok((offsets, lengths))
    }

    /// Reconstruct the full tensor; every rank returns the identical value.
    pub fn full_tensor(&self, ctx: &RankCtx) -> RtResult<Tensor> {
        let mut t = self.local.clone();
        for (dim, p) in self.placements.iter().enumerate() {
            let group = self.mesh.group_along_index(dim, ctx.rank())?;
            match p {
                Placement::Shard(d) => {
                    t = ctx.all_gather_dim(&group, &t, *d, "dtensor.full_tensor")?;
                }
                Placement::Partial => {
                    t = ctx.all_reduce(&group, &t, ReduceOp::Sum, "dtensor.full_tensor")?;
                }
                Placement::Replicate => {}
            }
        }
        Ok(t)
    }

    /// Move to `new_placements` on the same mesh, preserving the global value.
    ///
    /// Transitions run in three phases so no intermediate state double-shards
    /// a tensor dim: changing shards gather out first, then partials resolve
    /// (all-reduce to replicate, reduce-scatter to shard), then replicated
    /// dims slice down to their target shards.
    pub fn redistribute(&self, ctx: &RankCtx, new_placements: &[Placement]) -> RtResult<DTensor> {
        validate_placements(&self.global_shape, &self.mesh, new_placements)?;
        for (src, tgt) in self.placements.iter().zip(new_placements) {
            if matches!(tgt, Placement::Partial) && !matches!(src, Placement::Partial) {
                return Err(RtError::Other(format!(
                    "unsupported transition {src:?} -> Partial"
                )));
            }
        }
        let coords = self.mesh.coords_of(ctx.rank())?;
        let mut current = self.placements.clone();
        let mut local = self.local.clone();

        // Phase A: gather out every shard that changes.
        for dim in 0..current.len() {
            if current[dim] == new_placements[dim] {
                continue;
            }
            if let Placement::Shard(d) = current[dim] {
                let group = self.mesh.group_along_index(dim, ctx.rank())?;
                local = ctx.all_gather_dim(&group, &local, d, "dtensor.redistribute.unshard")?;
                current[dim] = Placement::Replicate;
            }
        }
        // Phase B: resolve partials.
        for dim in 0..current.len() {
            if current[dim] != Placement::Partial || new_placements[dim] == Placement::Partial {
                continue;
            }
            let group = self.mesh.group_along_index(dim, ctx.rank())?;
            match new_placements[dim] {
                Placement::Replicate => {
                    local = ctx.all_reduce(
                        &group,
                        &local,
                        ReduceOp::Sum,
                        "dtensor.redistribute.reduce",
                    )?;
                }
                Placement::Shard(d) => {
                    local = reduce_scatter_chunked(
                        ctx,
                        &group,
                        &local,
                        d,
                        "dtensor.redistribute.scatter",
                    )?;
                }
                Placement::Partial => unreachable!(),
            }
            current[dim] = new_placements[dim];
        }
        // Phase C: slice replicated dims down to their target shard.
        for dim in 0..current.len() {
            if current[dim] != Placement::Replicate {
                continue;
            }
            if let Placement::Shard(d) = new_placements[dim] {
                let (s, e) = chunk_range(local.shape()[d], self.mesh.shape()[dim], coords[dim]);
                local = local.narrow(d, s, e)?;
                current[dim] = new_placements[dim];
            }
        }
        debug_assert_eq!(current, new_placements);
        Ok(DTensor {
            local,
            mesh: self.mesh.clone(),
            placements: new_placements.to_vec(),
            global_shape: self.global_shape.clone(),
        })
    }
}

/// Reduce-scatter along an arbitrary tensor dim with ceiling-division chunks:
/// pads the dim up to a multiple of the group size inside the collective and
/// strips the padding from the result.
pub fn reduce_scatter_chunked(
    ctx: &RankCtx,
    group: &[usize],
    t: &Tensor,
    dim: usize,
    label: &str,
) -> RtResult<Tensor> {
    let w = group.len();
    let extent = t.shape()[dim];
    let padded = extent.div_ceil(w) * w;
    let input = if padded == extent {
        t.clone()
    } else {
        let mut pad_shape = t.shape().to_vec();
        pad_shape[dim] = padded - extent;
        Tensor::cat(&[t.clone(), Tensor::zeros(&pad_shape)], dim)?
    };
    let mine = ctx.reduce_scatter_dim(group, &input, dim, label)?;
    let pos = group.iter().position(|&r| r == ctx.rank()).unwrap();
    let (s, e) = chunk_range(extent, w, pos);
    let keep = e - s;
    if keep == mine.shape()[dim] {
        Ok(mine)
    } else {
        Ok(mine.narrow(dim, 0, keep)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatmulStyle {
    /// Replicated input times an output-feature-sharded weight; the result is
    /// sharded on its last dim.
    Colwise,
    /// Input sharded on its last dim times an input-feature-sharded weight;
    /// the result is a partial sum.
    Rowwise,
}

/// Sharded matrix product over a 1-D mesh, following the declared style's
/// placement contract. Reconstructing the output always equals the dense
/// product of the reconstructed inputs; the compute itself is local.
pub fn sharded_matmul(x: &DTensor, w: &DTensor, style: MatmulStyle) -> RtResult<DTensor> {
    if x.mesh != w.mesh {
        return Err(RtError::Other("sharded_matmul: mesh mismatch".into()));
    }
    if x.mesh.ndim() != 1 {
        return Err(RtError::Other("sharded_matmul expects a 1-D mesh".into()));
    }
    let (xp, wp) = (&x.placements[0], &w.placements[0]);
    let m = x.global_shape[0];
    let n = w.global_shape[1];
    match style {
        MatmulStyle::Colwise => {
            if *xp != Placement::Replicate || *wp != Placement::Shard(1) {
                return Err(RtError::Other(format!(
                    "colwise needs (Replicate, Shard(1)); got ({xp:?}, {wp:?})"
                )));
            }
            let local = matmul(&x.local, &w.local)?;
            DTensor::from_local(local, &x.mesh, &[Placement::Shard(1)], &[m, n])
        }
        MatmulStyle::Rowwise => {
            if *xp != Placement::Shard(1) || *wp != Placement::Shard(0) {
                return Err(RtError::Other(format!(
                    "rowwise needs (Shard(1), Shard(0)); got ({xp:?}, {wp:?})"
                )));
            }
            let local = matmul(&x.local, &w.local)?;
            DTensor::from_local(local, &x.mesh, &[Placement::Partial], &[m, n])
        }
    }
}
