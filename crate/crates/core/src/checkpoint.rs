//! Distributed checkpointing with resharding.
//!
//! Every rank writes its local shards to one raw little-endian data file;
//! rank 0 writes a JSON manifest mapping each parameter name to the
//! hyperrectangles stored in each file. Loading intersects the target
//! layout's hyperrectangles with the stored ones and reads only the
//! overlapping byte ranges, so a checkpoint saved under one parallelism
//! layout loads bit-exactly under any other.
//!
//! Directory layout: `metadata.json` plus `data_rank{r}.bin`. The data files
//! are raw values in record order; `byte_range` in each [`ShardRecord`]
//! locates a shard inside its file.

use crate::runtime::{RankCtx, RtError, RtResult};
use crate::tensor::{DType, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardRecord {
    pub fqn: String,
    pub global_shape: Vec<usize>,
    pub dtype: DType,
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Which rank's data file holds this shard.
    pub file_id: usize,
    /// Byte span within the data file.
    pub byte_range: (u64, u64),
}

impl ShardRecord {
    pub fn numel(&self) -> usize {
        self.lengths.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldLayout {
    pub world_size: usize,
    pub pp: usize,
    pub dp_replicate: usize,
    pub dp_shard: usize,
    pub cp: usize,
    pub tp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub format_version: u32,
    pub step: u64,
    pub world_layout: WorldLayout,
    pub shards: Vec<ShardRecord>,
    /// Data-loader step cursor per data-parallel rank.
    pub loader_cursors: BTreeMap<usize, u64>,
}

/// One shard a rank contributes to a checkpoint.
#[derive(Debug, Clone)]
pub struct SaveEntry {
    pub fqn: String,
    pub global_shape: Vec<usize>,
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
    pub data: Tensor,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error("shard tiling violated for {fqn}: {why}")]
    Tiling { fqn: String, why: String },
}

fn data_file(dir: &Path, rank: usize) -> PathBuf {
    dir.join(format!("data_rank{rank}.bin"))
}

fn metadata_file(dir: &Path) -> PathBuf {
    dir.join("metadata.json")
}

fn encode_values(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * t.dtype().size_bytes());
    match t.dtype() {
        DType::F64 => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F32 => {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        DType::F8E4M3 => {
            for v in t.data() {
                out.push(crate::tensor::f8::encode(*v));
            }
        }
    }
    out
}

fn decode_value(bytes: &[u8], dtype: DType, index: usize) -> f64 {
    match dtype {
        DType::F64 => f64::from_le_bytes(bytes[index * 8..index * 8 + 8].try_into().unwrap()),
        DType::F32 => {
            f32::from_le_bytes(bytes[index * 4..index * 4 + 4].try_into().unwrap()) as f64
        }
        DType::F8E4M3 => crate::tensor::f8::decode(bytes[index]),
    }
}

/// Write this rank's shards to its data file, returning their records.
fn write_rank_file(
    dir: &Path,
    rank: usize,
    entries: &[SaveEntry],
) -> Result<Vec<ShardRecord>, CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(data_file(dir, rank))?);
    let mut records = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for e in entries {
        if e.data.numel() == 0 {
            // Empty trailing shards are omitted from the manifest.
            continue;
        }
        let bytes = encode_values(&e.data);
        file.write_all(&bytes)?;
        let end = offset + bytes.len() as u64;
        records.push(ShardRecord {
            fqn: e.fqn.clone(),
            global_shape: e.global_shape.clone(),
            dtype: e.data.dtype(),
            offsets: e.offsets.clone(),
            lengths: e.lengths.clone(),
            file_id: rank,
            byte_range: (offset, end),
        });
        offset = end;
    }
    file.flush()?;
    Ok(records)
}

/// Check that each parameter's shards tile its global shape exactly.
pub fn validate_tiling(meta: &CheckpointMetadata) -> Result<(), CheckpointError> {
    let mut by_fqn: BTreeMap<&str, Vec<&ShardRecord>> = BTreeMap::new();
    for r in &meta.shards {
        by_fqn.entry(&r.fqn).or_default().push(r);
    }
    for (fqn, records) in by_fqn {
        let global = &records[0].global_shape;
        let global_numel: usize = global.iter().product();
        let mut covered = 0usize;
        for (i, a) in records.iter().enumerate() {
            if &a.global_shape != global {
                return Err(CheckpointError::Tiling {
                    fqn: fqn.into(),
                    why: "inconsistent global shapes".into(),
                });
            }
            if (a.byte_range.1 - a.byte_range.0) as usize != a.numel() * a.dtype.size_bytes() {
                return Err(CheckpointError::Tiling {
                    fqn: fqn.into(),
                    why: format!("byte range does not match extent for record {i}"),
                });
            }
            covered += a.numel();
            for b in records.iter().skip(i + 1) {
                let overlaps = a
                    .offsets
                    .iter()
                    .zip(&a.lengths)
                    .zip(b.offsets.iter().zip(&b.lengths))
                    .all(|((ao, al), (bo, bl))| ao + al > *bo && bo + bl > *ao);
                if overlaps {
                    return Err(CheckpointError::Tiling {
                        fqn: fqn.into(),
                        why: format!("records overlap: {:?} and {:?}", a.offsets, b.offsets),
                    });
                }
            }
        }
        if covered != global_numel {
            return Err(CheckpointError::Tiling {
                fqn: fqn.into(),
                why: format!("covers {covered} of {global_numel} elements"),
            });
        }
    }
    Ok(())
}

/// Collective checkpoint save: every rank writes its shards, records are
/// gathered to rank 0, which validates the tiling and writes the manifest.
pub fn save_collective(
    ctx: &RankCtx,
    world_group: &[usize],
    dir: &Path,
    step: u64,
    layout: &WorldLayout,
    entries: &[SaveEntry],
    loader_cursor: Option<(usize, u64)>,
) -> RtResult<()> {
    ctx.barrier(world_group, "ckpt.begin")?;
    let records =
        write_rank_file(dir, ctx.rank(), entries).map_err(|e| RtError::Other(e.to_string()))?;
    let payload =
        serde_json::to_vec(&(records, loader_cursor)).map_err(|e| RtError::Other(e.to_string()))?;
    let gathered = ctx.gather_bytes(world_group, payload, "ckpt.manifest")?;
    if ctx.rank() == world_group[0] {
        let mut shards = Vec::new();
        let mut cursors = BTreeMap::new();
        for blob in gathered {
            let (recs, cursor): (Vec<ShardRecord>, Option<(usize, u64)>) =
                serde_json::from_slice(&blob).map_err(|e| RtError::Other(e.to_string()))?;
            shards.extend(recs);
            if let Some((dp_rank, c)) = cursor {
                cursors.insert(dp_rank, c);
            }
        }
        let meta = CheckpointMetadata {
            format_version: FORMAT_VERSION,
            step,
            world_layout: layout.clone(),
            shards,
            loader_cursors: cursors,
        };
        validate_tiling(&meta).map_err(|e| RtError::Other(e.to_string()))?;
        let json =
            serde_json::to_string_pretty(&meta).map_err(|e| RtError::Other(e.to_string()))?;
        std::fs::write(metadata_file(dir), json).map_err(|e| RtError::Other(e.to_string()))?;
    }
    ctx.barrier(world_group, "ckpt.end")?;
    Ok(())
}

/// In-flight asynchronous save; [`wait`] surfaces I/O errors.
pub struct AsyncTicket {
    handle: std::thread::JoinHandle<Result<(), CheckpointError>>,
}

/// Snapshot `entries` (already deep copies) and persist them on a background
/// thread. The manifest exchange happens synchronously — collectives belong
/// to the rank worker — so later parameter mutations cannot leak into the
/// checkpoint.
pub fn async_save_collective(
    ctx: &RankCtx,
    world_group: &[usize],
    dir: &Path,
    step: u64,
    layout: &WorldLayout,
    entries: Vec<SaveEntry>,
    loader_cursor: Option<(usize, u64)>,
) -> RtResult<AsyncTicket> {
    ctx.barrier(world_group, "ckpt.begin")?;
    // Records (offsets and byte ranges) are a pure function of the entries;
    // compute them up front so the manifest can be gathered now.
    let mut records = Vec::new();
    let mut offset = 0u64;
    for e in &entries {
        if e.data.numel() == 0 {
            continue;
        }
        let len = (e.data.numel() * e.data.dtype().size_bytes()) as u64;
        records.push(ShardRecord {
            fqn: e.fqn.clone(),
            global_shape: e.global_shape.clone(),
            dtype: e.data.dtype(),
            offsets: e.offsets.clone(),
            lengths: e.lengths.clone(),
            file_id: ctx.rank(),
            byte_range: (offset, offset + len),
        });
        offset += len;
    }
    let payload =
        serde_json::to_vec(&(records, loader_cursor)).map_err(|e| RtError::Other(e.to_string()))?;
    let gathered = ctx.gather_bytes(world_group, payload, "ckpt.manifest")?;
    let write_meta = if ctx.rank() == world_group[0] {
        let mut shards = Vec::new();
        let mut cursors = BTreeMap::new();
        for blob in gathered {
            let (recs, cursor): (Vec<ShardRecord>, Option<(usize, u64)>) =
                serde_json::from_slice(&blob).map_err(|e| RtError::Other(e.to_string()))?;
            shards.extend(recs);
            if let Some((dp_rank, c)) = cursor {
                cursors.insert(dp_rank, c);
            }
        }
        let meta = CheckpointMetadata {
            format_version: FORMAT_VERSION,
            step,
            world_layout: layout.clone(),
            shards,
            loader_cursors: cursors,
        };
        validate_tiling(&meta).map_err(|e| RtError::Other(e.to_string()))?;
        Some(meta)
    } else {
        None
    };
    let dir = dir.to_path_buf();
    let rank = ctx.rank();
    let handle = std::thread::spawn(move || -> Result<(), CheckpointError> {
        std::fs::create_dir_all(&dir)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(data_file(&dir, rank))?);
        for e in &entries {
            if e.data.numel() == 0 {
                continue;
            }
            file.write_all(&encode_values(&e.data))?;
        }
        file.flush()?;
        if let Some(meta) = write_meta {
            let json = serde_json::to_string_pretty(&meta)
                .map_err(|e| CheckpointError::Meta(e.to_string()))?;
            std::fs::write(metadata_file(&dir), json)?;
        }
        Ok(())
    });
    Ok(AsyncTicket { handle })
}

pub fn wait(ticket: AsyncTicket) -> RtResult<()> {
    ticket
        .handle
        .join()
        .map_err(|_| RtError::Other("checkpoint writer panicked".into()))?
        .map_err(|e| RtError::Other(e.to_string()))
}

pub fn read_metadata(dir: &Path) -> Result<CheckpointMetadata, CheckpointError> {
    let json = std::fs::read_to_string(metadata_file(dir))?;
    let meta: CheckpointMetadata =
        serde_json::from_str(&json).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Meta(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    validate_tiling(&meta)?;
    Ok(meta)
}

/// Lazily-read data files of one checkpoint directory.
pub struct FileCache<'a> {
    dir: &'a Path,
    files: BTreeMap<usize, Vec<u8>>,
}

impl<'a> FileCache<'a> {
    pub fn new(dir: &'a Path) -> FileCache<'a> {
        FileCache {
            dir,
            files: BTreeMap::new(),
        }
    }

    fn file(&mut self, id: usize) -> Result<&[u8], CheckpointError> {
        if !self.files.contains_key(&id) {
            let bytes = std::fs::read(data_file(self.dir, id))?;
            self.files.insert(id, bytes);
        }
        Ok(&self.files[&id])
    }
}

/// Assemble the hyperrectangle `offsets..offsets+lengths` of `fqn` from
/// whatever stored shards intersect it.
pub fn load_region(
    meta: &CheckpointMetadata,
    cache: &mut FileCache,
    fqn: &str,
    offsets: &[usize],
    lengths: &[usize],
) -> Result<Tensor, CheckpointError> {
    let numel: usize = lengths.iter().product();
    let mut out = vec![0.0f64; numel];
    let mut filled = 0usize;
    let records: Vec<&ShardRecord> = meta.shards.iter().filter(|r| r.fqn == fqn).collect();
    if records.is_empty() {
        return Err(CheckpointError::Meta(format!("{fqn} not in checkpoint")));
    }
    let dims = offsets.len();
    let mut dtype = DType::F64;
    for rec in records {
        if rec.offsets.len() != dims {
            return Err(CheckpointError::Meta(format!("{fqn}: rank mismatch")));
        }
        dtype = rec.dtype;
        // Intersection of the wanted region with this record.
        let mut ilo = vec![0usize; dims];
        let mut ihi = vec![0usize; dims];
        let mut empty = false;
        for d in 0..dims {
            ilo[d] = offsets[d].max(rec.offsets[d]);
            ihi[d] = (offsets[d] + lengths[d]).min(rec.offsets[d] + rec.lengths[d]);
            if ilo[d] >= ihi[d] {
                empty = true;
                break;
            }
        }
        if empty {
            continue;
        }
        let expected = (rec.byte_range.1 - rec.byte_range.0) as usize;
        let file = cache.file(rec.file_id)?;
        if file.len() < rec.byte_range.1 as usize {
            return Err(CheckpointError::Meta(format!(
                "{fqn}: data file {} truncated ({} < {})",
                rec.file_id,
                file.len(),
                rec.byte_range.1
            )));
        }
        let bytes = &file[rec.byte_range.0 as usize..rec.byte_range.1 as usize];
        debug_assert_eq!(bytes.len(), expected);
        // Walk the intersection: the innermost dim is a contiguous run in
        // both the record's buffer and the output; an odometer covers the
        // outer dims.
        let run = ihi[dims - 1] - ilo[dims - 1];
        let mut idx = ilo.clone();
        'rows: loop {
            // Row-major flat positions of `idx` within the record and output.
            let mut rec_pos = 0usize;
            let mut out_pos = 0usize;
            for d in 0..dims {
                rec_pos = rec_pos * rec.lengths[d] + (idx[d] - rec.offsets[d]);
                out_pos = out_pos * lengths[d] + (idx[d] - offsets[d]);
            }
            for i in 0..run {
                out[out_pos + i] = decode_value(bytes, rec.dtype, rec_pos + i);
            }
            filled += run;
            if dims == 1 {
                break;
            }
            let mut d = dims - 1;
            loop {
                if d == 0 {
                    break 'rows;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < ihi[d] {
                    break;
                }
                idx[d] = ilo[d];
            }
        }
    }
    if filled != numel {
        return Err(CheckpointError::Meta(format!(
            "{fqn}: region {offsets:?}+{lengths:?} only {filled}/{numel} elements covered"
        )));
    }
    let mut t = Tensor::from_vec(lengths, out).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    t = t.cast(dtype);
    Ok(t)
}

/// Offline reshard: rewrite a checkpoint under a different (dp_shard, tp)
/// layout without a live world. Full tensors are bit-preserved.
pub fn convert(src: &Path, dst: &Path, dp_shard: usize, tp: usize) -> Result<(), CheckpointError> {
    use crate::dtensor::chunk_range;
    let meta = read_metadata(src)?;
    let mut cache = FileCache::new(src);
    let world = dp_shard * tp;
    // Group parameter names; optimizer entries reshard alongside their params.
    let mut fqns: Vec<(String, Vec<usize>)> = Vec::new();
    for r in &meta.shards {
        if !fqns.iter().any(|(f, _)| f == &r.fqn) {
            fqns.push((r.fqn.clone(), r.global_shape.clone()));
        }
    }
    let mut per_rank_entries: Vec<Vec<SaveEntry>> = vec![Vec::new(); world];
    for (fqn, global_shape) in &fqns {
        // Column split across tp for 2-D weights (dim 1), then row split
        // across dp_shard; 1-D tensors split rows only.
        for tp_pos in 0..tp {
            let (clo, chi) = if global_shape.len() >= 2 {
                chunk_range(global_shape[1], tp, tp_pos)
            } else {
                (0, usize::MAX)
            };
            for dp_pos in 0..dp_shard {
                let rank = dp_pos * tp + tp_pos;
                let (rlo, rhi) = chunk_range(global_shape[0], dp_shard, dp_pos);
                if rhi == rlo {
                    continue;
                }
                let mut offsets = vec![0usize; global_shape.len()];
                let mut lengths = global_shape.clone();
                offsets[0] = rlo;
                lengths[0] = rhi - rlo;
                if global_shape.len() >= 2 {
                    if chi == clo {
                        continue;
                    }
                    offsets[1] = clo;
                    lengths[1] = chi - clo;
                } else if tp_pos > 0 {
                    // 1-D tensors are not tensor-parallel sharded.
                    continue;
                }
                let data = load_region(&meta, &mut cache, fqn, &offsets, &lengths)?;
                per_rank_entries[rank].push(SaveEntry {
                    fqn: fqn.clone(),
                    global_shape: global_shape.clone(),
                    offsets,
                    lengths,
                    data,
                });
            }
        }
    }
    std::fs::create_dir_all(dst)?;
    let mut shards = Vec::new();
    for (rank, entries) in per_rank_entries.iter().enumerate() {
        shards.extend(write_rank_file(dst, rank, entries)?);
    }
    let new_meta = CheckpointMetadata {
        format_version: FORMAT_VERSION,
        step: meta.step,
        world_layout: WorldLayout {
            world_size: world,
            pp: 1,
            dp_replicate: 1,
            dp_shard,
            cp: 1,
            tp,
        },
        shards,
        loader_cursors: meta.loader_cursors.clone(),
    };
    validate_tiling(&new_meta)?;
    std::fs::write(
        metadata_file(dst),
        serde_json::to_string_pretty(&new_meta)
            .map_err(|e| CheckpointError::Meta(e.to_string()))?,
    )?;
    Ok(())
}
