//! The training loop: builds the world mesh, applies the configured
//! parallelisms part by part, materializes sharded weights, and drives
//! data loading, stepping, metrics, and checkpointing.
//!
//! Composition order per rank: split the meta model into pipeline stages,
//! then apply the SPMD shardings (tensor parallel sizing, activation
//! checkpoint policy, data-parallel dim-0 sharding) to each part as it is
//! materialized with deterministic counter-based init.

use crate::checkpoint::{self, AsyncTicket, SaveEntry, WorldLayout};
use crate::config::{ConfigError, JobConfig, ResolvedDegrees};
use crate::context_parallel::CpEnv;
use crate::data::{Loader, LoaderState, TokenBatch};
use crate::model::{build_meta_model, MetaModel, ModelError, Sgd};
use crate::parallel::{DataParallelConfig, ModelPart, ParallelEnv, PartBuild, PartOutput, TpEnv};
use crate::pipeline::{
    build_schedule, execute_rank_schedule, split_unit_ranges, validate_schedule, PipelineConfig,
    PipelineError, PipelineSchedule, ScheduleKind,
};
use crate::runtime::{
    spawn_world, CollectiveRecord, DeviceMesh, RankCtx, ReduceOp, RtError, RtResult, WorldError,
    WorldLedger, WorldOptions,
};
use crate::tensor::Tensor;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("run artifacts: {0}")]
    Io(#[from] std::io::Error),
}

/// One logged training step (the metrics file holds these as JSON lines).
#[derive(Debug, Clone, Serialize)]
pub struct StepMetric {
    pub step: usize,
    pub loss: f64,
    pub tokens_per_step: usize,
    pub activation_bytes_peak: u64,
    pub parameter_bytes_peak: u64,
}

pub struct RunArtifacts {
    /// Per-step losses (identical on every rank; data-parallel mean).
    pub losses: Vec<f64>,
    pub metrics: Vec<StepMetric>,
    pub records: Vec<CollectiveRecord>,
    pub ledger: WorldLedger,
    pub report: crate::perf::LedgerReport,
    pub out_dir: Option<PathBuf>,
    /// Path of the flight-recorder dump, when artifacts are written.
    pub recorder_path: Option<PathBuf>,
}

struct RankPlan<'a> {
    cfg: &'a JobConfig,
    degrees: ResolvedDegrees,
    meta: MetaModel,
    unit_ranges: Vec<std::ops::Range<usize>>,
    schedule: Option<PipelineSchedule>,
}

/// Run a training job on a simulated world. Blocks until all ranks finish.
pub fn train(cfg: &JobConfig) -> Result<RunArtifacts, TrainError> {
    let degrees = cfg.resolve_degrees()?;
    let model_cfg = cfg.model.to_model_config();
    model_cfg.validate()?;
    let meta = build_meta_model(&model_cfg)?;

    let (unit_ranges, schedule) = if degrees.pp > 1 {
        let pcfg = PipelineConfig {
            degree: degrees.pp,
            split_points: cfg.parallelism.pipeline_parallel_split_points.clone(),
            schedule: ScheduleKind::parse(&cfg.parallelism.pipeline_parallel_schedule)
                .map_err(PipelineError::Invalid)?,
            microbatches: cfg.parallelism.pipeline_parallel_microbatches,
        };
        let ranges = split_unit_ranges(&model_cfg, &pcfg.split_points)?;
        if ranges.len() != pcfg.stages() {
            return Err(PipelineError::Invalid(format!(
                "{} split points produce {} stages",
                pcfg.split_points.len(),
                ranges.len()
            ))
            .into());
        }
        let schedule = build_schedule(&pcfg)?;
        validate_schedule(&schedule)?;
        (ranges, Some(schedule))
    } else {
        let whole_model = 0..ModelPart::total_units(&model_cfg);
        (vec![whole_model], None)
    };

    let plan = RankPlan {
        cfg,
        degrees,
        meta,
        unit_ranges,
        schedule,
    };
    let opts = WorldOptions::with_timeout(Duration::from_secs(cfg.runtime.timeout_secs.max(1)));
    let out_dir = (!cfg.runtime.out_dir.is_empty()).then(|| PathBuf::from(&cfg.runtime.out_dir));

    let run = match spawn_world(cfg.runtime.world_size, opts, |ctx| train_rank(ctx, &plan)) {
        Ok(run) => run,
        Err(err) => {
            // Leave the recorder dump behind for hang analysis.
            if let Some(dir) = &out_dir {
                let _ = std::fs::create_dir_all(dir);
                let _ = crate::runtime::write_dump(&dir.join("recorder.jsonl"), &err.records);
            }
            return Err(err.into());
        }
    };

    let metrics = run.results.into_iter().next().expect("rank 0 result");
    let losses = metrics.iter().map(|m| m.loss).collect();
    let steps_run = metrics.len();
    let tokens_per_step = cfg.training.local_batch * cfg.model.seq_len * degrees.data_degree();
    let report = {
        let mut spec = crate::perf::ParallelSpec::new(model_cfg.clone(), degrees);
        spec.local_batch = cfg.training.local_batch;
        spec.microbatches = cfg.parallelism.pipeline_parallel_microbatches;
        crate::perf::ledger_report(&run.ledger, steps_run, tokens_per_step, Some(&spec))
    };
    let mut recorder_path = None;
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
        let rpath = dir.join("recorder.jsonl");
        crate::runtime::write_dump(&rpath, &run.records)?;
        recorder_path = Some(rpath);
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
        let log_every = cfg.training.log_interval.max(1);
        for m in &metrics {
            if (m.step + 1) % log_every == 0 || m.step + 1 == metrics.len() {
                serde_json::to_writer(&mut f, m).map_err(std::io::Error::other)?;
                f.write_all(b"\n")?;
            }
        }
        f.flush()?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report).map_err(std::io::Error::other)?,
        )?;
    }
    Ok(RunArtifacts {
        losses,
        metrics,
        records: run.records,
        ledger: run.ledger,
        report,
        out_dir,
        recorder_path,
    })
}

fn train_rank(ctx: RankCtx, plan: &RankPlan) -> RtResult<Vec<StepMetric>> {
    let cfg = plan.cfg;
    let d = plan.degrees;
    let rank = ctx.rank();
    let mesh = DeviceMesh::new(
        &[d.pp, d.dp_replicate, d.dp_shard, d.cp, d.tp],
        &["pp", "dp_replicate", "dp_shard", "cp", "tp"],
    )?;
    let tp_group = mesh.group_along("tp", rank)?;
    let cp_group = mesh.group_along("cp", rank)?;
    let dp_shard_group = mesh.group_along("dp_shard", rank)?;
    let dp_replicate_group = mesh.group_along("dp_replicate", rank)?;
    let pp_group = mesh.group_along("pp", rank)?;
    let pp_pos = pp_group.iter().position(|&r| r == rank).unwrap();
    let data_group = mesh.flatten_along(&["dp_replicate", "dp_shard"], rank)?;
    let data_rank = data_group.iter().position(|&r| r == rank).unwrap();

    let tp = TpEnv::new(
        tp_group,
        rank,
        cfg.parallelism.enable_loss_parallel,
        if cfg.parallelism.enable_async_tensor_parallel {
            cfg.parallelism.async_tp_chunks.max(1)
        } else {
            1
        },
    );
    let cp = if d.cp > 1 {
        Some(CpEnv::new(
            cp_group,
            rank,
            cfg.parallelism
                .rotate_method()
                .map_err(|e| RtError::Other(e.to_string()))?,
            cfg.model.seq_len,
        )?)
    } else {
        None
    };
    let env = ParallelEnv {
        ctx: &ctx,
        tp,
        cp,
        dp_shard_group,
        dp_replicate_group,
    };

    let dp_cfg = DataParallelConfig {
        shard_degree: d.dp_shard,
        replicate_degree: d.dp_replicate,
        param_compute_dtype: crate::config::TrainingSection::dtype_of(
            &cfg.training.param_dtype,
            "training.param_dtype",
        )
        .map_err(|e| RtError::Other(e.to_string()))?,
        reduce_dtype: crate::config::TrainingSection::dtype_of(
            &cfg.training.reduce_dtype,
            "training.reduce_dtype",
        )
        .map_err(|e| RtError::Other(e.to_string()))?,
        reshard_after_forward: crate::parallel::ReshardPolicy::DefaultExceptLast,
    };
    let ac = cfg
        .activation_checkpoint
        .to_ac_config()
        .map_err(|e| RtError::Other(e.to_string()))?;
    let f8 = cfg
        .float8
        .to_float8_config()
        .map_err(|e| RtError::Other(e.to_string()))?;

    // Stages this rank owns (stage s lives on pipeline rank s mod pp).
    let mut parts: BTreeMap<usize, ModelPart> = BTreeMap::new();
    for (stage, range) in plan.unit_ranges.iter().enumerate() {
        if stage % d.pp == pp_pos {
            parts.insert(
                stage,
                ModelPart::build(
                    &env,
                    PartBuild {
                        meta: &plan.meta,
                        unit_range: range.clone(),
                        dp: dp_cfg.clone(),
                        plan: crate::parallel::TpPlan::llama(),
                        ac,
                        f8: f8.clone(),
                        master_seed: cfg.training.seed,
                        zero2: d.pp > 1,
                    },
                )?,
            );
        }
    }

    let mut loader = Loader::new(LoaderState {
        master_seed: cfg.training.seed,
        cursor: 0,
        dp_rank: data_rank,
        dp_degree: d.data_degree(),
        local_batch: cfg.training.local_batch,
        seq_len: cfg.model.seq_len,
        vocab_size: cfg.model.vocab_size,
        mode: cfg
            .training
            .data_mode()
            .map_err(|e| RtError::Other(e.to_string()))?,
    })
    .map_err(|e| RtError::Other(format!("data loader: {e}")))?;
    let mut opt = Sgd::new(cfg.training.lr, cfg.training.momentum);

    let world_group: Vec<usize> = (0..ctx.world_size()).collect();
    let layout = WorldLayout {
        world_size: ctx.world_size(),
        pp: d.pp,
        dp_replicate: d.dp_replicate,
        dp_shard: d.dp_shard,
        cp: d.cp,
        tp: d.tp,
    };
    let coords = mesh.coords_of(rank)?;
    let ckpt_base = (!cfg.checkpoint.dir.is_empty() && cfg.checkpoint.interval > 0
        || cfg.checkpoint.resume)
        .then(|| PathBuf::from(&cfg.checkpoint.dir));

    // Resume from the newest checkpoint when configured.
    let mut start_step = 0usize;
    if cfg.checkpoint.resume {
        if let Some(base) = &ckpt_base {
            if let Some((step, dir)) = latest_checkpoint(base) {
                restore_rank(&dir, &mut parts, &mut opt, &mut loader, data_rank)?;
                start_step = step as usize;
            }
        }
    }

    let mut pending_save: Option<AsyncTicket> = None;
    let mut metrics = Vec::new();
    let grad_scale = 1.0 / cfg.parallelism.pipeline_parallel_microbatches as f64;
    for step in start_step..cfg.training.steps {
        let batch = loader.next_batch();
        let local: TokenBatch = match &env.cp {
            Some(cp) => cp.shard_batch(&batch),
            None => batch,
        };
        let loss = match &plan.schedule {
            Some(schedule) => {
                for part in parts.values_mut() {
                    part.unshard_all(&env)?;
                }
                let loss = execute_rank_schedule(
                    &env, schedule, pp_pos, &pp_group, &mut parts, &local, grad_scale,
                )?;
                for part in parts.values_mut() {
                    part.reduce_gradients(&env)?;
                    part.reshard_all(&env);
                }
                loss
            }
            None => {
                let part = parts.values_mut().next().expect("one part without pp");
                let out = part.forward(&env, 0, None, &local)?;
                let loss = match out {
                    PartOutput::Loss(l) => l,
                    PartOutput::Acts(_) => {
                        return Err(RtError::Other("single part must produce the loss".into()))
                    }
                };
                part.backward(&env, 0, None, 1.0)?;
                part.reduce_gradients(&env)?;
                loss
            }
        };
        for part in parts.values_mut() {
            part.optimizer_step(&mut opt);
        }
        // Data-parallel mean for the logged loss.
        let logged = ctx
            .all_reduce(
                &data_group,
                &Tensor::scalar(loss / data_group.len() as f64),
                ReduceOp::Sum,
                "metrics.loss",
            )?
            .data()[0];
        let snapshot = ctx.ledger_snapshot();
        metrics.push(StepMetric {
            step,
            loss: logged,
            tokens_per_step: cfg.training.local_batch * cfg.model.seq_len * d.data_degree(),
            activation_bytes_peak: snapshot.activation_bytes_peak,
            parameter_bytes_peak: snapshot.parameter_bytes_peak,
        });

        if cfg.checkpoint.interval > 0 && (step + 1) % cfg.checkpoint.interval == 0 {
            let base = ckpt_base.as_ref().expect("checkpoint dir configured");
            let dir = base.join(format!("step-{:06}", step + 1));
            let entries = checkpoint_entries(&parts, &opt, &coords);
            let cursor = Some((data_rank, loader.state.cursor));
            if cfg.checkpoint.async_save {
                if let Some(t) = pending_save.take() {
                    checkpoint::wait(t)?;
                }
                pending_save = Some(checkpoint::async_save_collective(
                    &ctx,
                    &world_group,
                    &dir,
                    (step + 1) as u64,
                    &layout,
                    entries,
                    cursor,
                )?);
            } else {
                checkpoint::save_collective(
                    &ctx,
                    &world_group,
                    &dir,
                    (step + 1) as u64,
                    &layout,
                    &entries,
                    cursor,
                )?;
            }
        }
    }
    if let Some(t) = pending_save.take() {
        checkpoint::wait(t)?;
    }
    Ok(metrics)
}

/// Shards this rank persists: replicated copies (data-parallel replicas,
/// context-parallel peers, tensor-parallel copies of replicated params) are
/// written only by the coordinate-zero owner so the manifest tiles exactly.
/// `coords` are the rank's `[pp, dp_replicate, dp_shard, cp, tp]` mesh
/// coordinates.
pub fn checkpoint_entries(
    parts: &BTreeMap<usize, ModelPart>,
    opt: &Sgd,
    coords: &[usize],
) -> Vec<SaveEntry> {
    let (replicate_coord, cp_coord, tp_coord) = (coords[1], coords[3], coords[4]);
    let mut entries = Vec::new();
    for part in parts.values() {
        for p in part.params() {
            if replicate_coord != 0 || cp_coord != 0 {
                continue;
            }
            if p.tp_replicated && tp_coord != 0 {
                continue;
            }
            let (offsets, lengths) = p.shard_region();
            entries.push(SaveEntry {
                fqn: p.fqn.clone(),
                global_shape: p.global_shape.clone(),
                offsets: offsets.clone(),
                lengths: lengths.clone(),
                data: p.shard().clone(),
            });
            if let Some(vel) = opt.state().get(&p.fqn) {
                entries.push(SaveEntry {
                    fqn: format!("optim.momentum.{}", p.fqn),
                    global_shape: p.global_shape.clone(),
                    offsets,
                    lengths,
                    data: vel.clone(),
                });
            }
        }
    }
    entries
}

/// Newest `step-NNNNNN` checkpoint under `base`.
pub fn latest_checkpoint(base: &Path) -> Option<(u64, PathBuf)> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(base).ok()? {
        let entry = entry.ok()?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name.strip_prefix("step-") {
            if let Ok(step) = num.parse::<u64>() {
                if best.as_ref().map(|(b, _)| step > *b).unwrap_or(true) {
                    best = Some((step, entry.path()));
                }
            }
        }
    }
    best
}

/// Load a rank's shards (and momentum and loader cursor) from a checkpoint.
pub fn restore_rank(
    dir: &Path,
    parts: &mut BTreeMap<usize, ModelPart>,
    opt: &mut Sgd,
    loader: &mut Loader,
    data_rank: usize,
) -> RtResult<()> {
    let meta = checkpoint::read_metadata(dir).map_err(|e| RtError::Other(e.to_string()))?;
    let mut cache = checkpoint::FileCache::new(dir);
    let mut momentum = BTreeMap::new();
    for part in parts.values_mut() {
        for p in part.params_mut() {
            let (offsets, lengths) = p.shard_region();
            if lengths.iter().product::<usize>() == 0 {
                continue;
            }
            let t = checkpoint::load_region(&meta, &mut cache, &p.fqn, &offsets, &lengths)
                .map_err(|e| RtError::Other(e.to_string()))?;
            let fqn = p.fqn.clone();
            p.load_shard(t);
            let mfqn = format!("optim.momentum.{fqn}");
            if meta.shards.iter().any(|r| r.fqn == mfqn) {
                let v = checkpoint::load_region(&meta, &mut cache, &mfqn, &offsets, &lengths)
                    .map_err(|e| RtError::Other(e.to_string()))?;
                momentum.insert(fqn, v);
            }
        }
    }
    if !momentum.is_empty() {
        opt.restore_state(momentum);
    }
    if let Some(cursor) = meta.loader_cursors.get(&data_rank) {
        let mut state = loader.state.clone();
        state.cursor = *cursor;
        loader
            .restore(state)
            .map_err(|e| RtError::Other(e.to_string()))?;
    }
    Ok(())
}
