//! Job configuration: TOML files with command-line overrides.
//!
//! Every knob of a run lives in [`JobConfig`]. Overrides use the form
//! `--section.key=value` and win over file values; a `-1` data-parallel shard
//! degree resolves to "all ranks not consumed by the other parallelisms".

use crate::context_parallel::RotateMethod;
use crate::data::DataMode;
use crate::model::ModelConfig;
use crate::parallel::{ACConfig, AcMode, Float8Config, Float8Strategy};
use crate::tensor::DType;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override {0:?}: expected section.key=value")]
    BadOverride(String),
    #[error("config invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSection {
    /// Simulated world size (number of rank workers).
    pub world_size: usize,
    /// Per-blocking-call timeout.
    pub timeout_secs: u64,
    /// Run artifact directory; empty disables artifact files.
    pub out_dir: String,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        RuntimeSection {
            world_size: 1,
            timeout_secs: 30,
            out_dir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub ffn_hidden: usize,
    pub norm_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            dim: 64,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 256,
            seq_len: 128,
            ffn_hidden: 128,
            norm_eps: 1e-5,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            ffn_hidden: self.ffn_hidden,
            norm_eps: self.norm_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Batch rows per data-parallel rank.
    pub local_batch: usize,
    /// "bigram", "uniform", or "file".
    pub data_mode: String,
    /// Token-id file for `data_mode = "file"`.
    pub data_file: String,
    pub log_interval: usize,
    /// FSDP all-gather / compute dtype: "f64" or "f32".
    pub param_dtype: String,
    /// Gradient reduction dtype: "f64" or "f32".
    pub reduce_dtype: String,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            steps: 20,
            lr: 0.01,
            momentum: 0.0,
            seed: 0,
            local_batch: 2,
            data_mode: "bigram".into(),
            data_file: String::new(),
            log_interval: 10,
            param_dtype: "f64".into(),
            reduce_dtype: "f64".into(),
        }
    }
}

impl TrainingSection {
    pub fn data_mode(&self) -> Result<DataMode, ConfigError> {
        match self.data_mode.as_str() {
            "bigram" => Ok(DataMode::Bigram),
            "uniform" => Ok(DataMode::Uniform),
            "file" => Ok(DataMode::File(PathBuf::from(&self.data_file))),
            other => Err(ConfigError::Invalid(format!(
                "training.data_mode {other:?} (want bigram, uniform, or file)"
            ))),
        }
    }

    pub fn dtype_of(name: &str, key: &str) -> Result<DType, ConfigError> {
        match name {
            "f64" => Ok(DType::F64),
            "f32" => Ok(DType::F32),
            other => Err(ConfigError::Invalid(format!(
                "{key} {other:?} (want f64 or f32)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelismSection {
    /// -1 resolves to world_size / (replicate * tp * pp * cp).
    pub data_parallel_shard_degree: i64,
    pub data_parallel_replicate_degree: usize,
    pub tensor_parallel_degree: usize,
    pub enable_loss_parallel: bool,
    pub enable_async_tensor_parallel: bool,
    pub async_tp_chunks: usize,
    pub context_parallel_degree: usize,
    /// "allgather" or "alltoall".
    pub context_parallel_rotate_method: String,
    pub pipeline_parallel_degree: usize,
    pub pipeline_parallel_split_points: Vec<String>,
    pub pipeline_parallel_schedule: String,
    pub pipeline_parallel_microbatches: usize,
}

impl Default for ParallelismSection {
    fn default() -> Self {
        ParallelismSection {
            data_parallel_shard_degree: -1,
            data_parallel_replicate_degree: 1,
            tensor_parallel_degree: 1,
            enable_loss_parallel: true,
            enable_async_tensor_parallel: false,
            async_tp_chunks: 4,
            context_parallel_degree: 1,
            context_parallel_rotate_method: "allgather".into(),
            pipeline_parallel_degree: 1,
            pipeline_parallel_split_points: Vec::new(),
            pipeline_parallel_schedule: "1f1b".into(),
            pipeline_parallel_microbatches: 1,
        }
    }
}

impl ParallelismSection {
    pub fn rotate_method(&self) -> Result<RotateMethod, ConfigError> {
        match self.context_parallel_rotate_method.as_str() {
            "allgather" => Ok(RotateMethod::Allgather),
            "alltoall" | "alltoall_p2p_ring" => Ok(RotateMethod::AlltoallP2pRing),
            other => Err(ConfigError::Invalid(format!(
                "parallelism.context_parallel_rotate_method {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationCheckpointSection {
    /// "none", "selective", or "full".
    pub mode: String,
    /// For selective mode: a positive integer (layer period) or "op".
    #[serde(deserialize_with = "string_or_int")]
    pub selective_ac_type: String,
}

/// Accept both `selective_ac_type = 2` and `selective_ac_type = "2"`.
fn string_or_int<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    struct V;
    impl serde::de::Visitor<'_> for V {
        type Value = String;
        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a string or an integer")
        }
        fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<String, E> {
            Ok(v.to_string())
        }
        fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<String, E> {
            Ok(v.to_string())
        }
        fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<String, E> {
            Ok(v.to_string())
        }
    }
    d.deserialize_any(V)
}

impl Default for ActivationCheckpointSection {
    fn default() -> Self {
        ActivationCheckpointSection {
            mode: "none".into(),
            selective_ac_type: "2".into(),
        }
    }
}

impl ActivationCheckpointSection {
    pub fn to_ac_config(&self) -> Result<ACConfig, ConfigError> {
        let mode = match self.mode.as_str() {
            "none" => AcMode::None,
            "full" => AcMode::Full,
            "selective" => match self.selective_ac_type.as_str() {
                "op" => AcMode::SelectiveOp,
                num => {
                    let k: usize = num.parse().map_err(|_| {
                        ConfigError::Invalid(format!(
                            "activation_checkpoint.selective_ac_type {num:?} (want a positive integer or \"op\")"
                        ))
                    })?;
                    if k == 0 {
                        return Err(ConfigError::Invalid(
                            "activation_checkpoint.selective_ac_type must be >= 1".into(),
                        ));
                    }
                    AcMode::SelectiveLayer(k)
                }
            },
            other => {
                return Err(ConfigError::Invalid(format!(
                    "activation_checkpoint.mode {other:?} (want none, selective, or full)"
                )))
            }
        };
        Ok(ACConfig { mode })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Float8Section {
    pub enabled: bool,
    /// "dynamic", "delayed", or "static".
    pub strategy: String,
    pub static_scale: f64,
    pub amax_history_len: usize,
}

impl Default for Float8Section {
    fn default() -> Self {
        Float8Section {
            enabled: false,
            strategy: "dynamic".into(),
            static_scale: 1.0,
            amax_history_len: 16,
        }
    }
}

impl Float8Section {
    pub fn to_float8_config(&self) -> Result<Float8Config, ConfigError> {
        let strategy = match self.strategy.as_str() {
            "dynamic" => Float8Strategy::Dynamic,
            "delayed" => Float8Strategy::Delayed,
            "static" => Float8Strategy::Static,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "float8.strategy {other:?} (want dynamic, delayed, or static)"
                )))
            }
        };
        if strategy == Float8Strategy::Static && self.static_scale <= 0.0 {
            return Err(ConfigError::Invalid(
                "float8.static_scale must be strictly positive".into(),
            ));
        }
        Ok(Float8Config {
            enabled: self.enabled,
            strategy,
            static_scale: self.static_scale,
            amax_history_len: self.amax_history_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointSection {
    /// Save every N steps; 0 disables checkpointing.
    pub interval: usize,
    /// Overlap persistence with subsequent steps.
    #[serde(rename = "async")]
    pub async_save: bool,
    pub dir: String,
    /// Resume from the latest checkpoint in `dir` when present.
    pub resume: bool,
}

impl Default for CheckpointSection {
    fn default() -> Self {
        CheckpointSection {
            interval: 0,
            async_save: false,
            dir: "checkpoints".into(),
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    pub runtime: RuntimeSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub parallelism: ParallelismSection,
    pub activation_checkpoint: ActivationCheckpointSection,
    pub float8: Float8Section,
    pub checkpoint: CheckpointSection,
}

/// Parallelism degrees after resolving `-1` against the world size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedDegrees {
    pub pp: usize,
    pub dp_replicate: usize,
    pub dp_shard: usize,
    pub cp: usize,
    pub tp: usize,
}

impl ResolvedDegrees {
    pub fn world(&self) -> usize {
        self.pp * self.dp_replicate * self.dp_shard * self.cp * self.tp
    }

    /// Number of distinct data streams (replicate x shard).
    pub fn data_degree(&self) -> usize {
        self.dp_replicate * self.dp_shard
    }
}

impl JobConfig {
    pub fn from_toml_str(s: &str) -> Result<JobConfig, ConfigError> {
        let table: toml::Table = s.parse().map_err(|e| ConfigError::Parse(format!("{e}")))?;
        JobConfig::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<JobConfig, ConfigError> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| ConfigError::Parse(format!("{e}")))
    }

    /// Load a file (optional) and apply `section.key=value` overrides on top.
    pub fn parse(file: Option<&Path>, overrides: &[String]) -> Result<JobConfig, ConfigError> {
        let mut table: toml::Table = match file {
            Some(path) => std::fs::read_to_string(path)?
                .parse()
                .map_err(|e| ConfigError::Parse(format!("{e}")))?,
            None => toml::Table::new(),
        };
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg = JobConfig::from_table(table)?;
        cfg.resolve_degrees()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Resolve parallelism degrees against the world size and validate every
    /// divisibility the engine depends on.
    pub fn resolve_degrees(&self) -> Result<ResolvedDegrees, ConfigError> {
        let world = self.runtime.world_size;
        if world == 0 {
            return Err(ConfigError::Invalid(
                "runtime.world_size must be >= 1".into(),
            ));
        }
        let p = &self.parallelism;
        let fixed = p.data_parallel_replicate_degree
            * p.tensor_parallel_degree
            * p.context_parallel_degree
            * p.pipeline_parallel_degree;
        if fixed == 0 {
            return Err(ConfigError::Invalid(
                "parallelism degrees must be positive".into(),
            ));
        }
        let dp_shard = if p.data_parallel_shard_degree < 0 {
            if !world.is_multiple_of(fixed) {
                return Err(ConfigError::Invalid(format!(
                    "world_size {world} not divisible by replicate*tp*cp*pp = {fixed}"
                )));
            }
            world / fixed
        } else {
            p.data_parallel_shard_degree as usize
        };
        if dp_shard == 0 {
            return Err(ConfigError::Invalid(
                "data_parallel_shard_degree resolved to 0".into(),
            ));
        }
        let degrees = ResolvedDegrees {
            pp: p.pipeline_parallel_degree,
            dp_replicate: p.data_parallel_replicate_degree,
            dp_shard,
            cp: p.context_parallel_degree,
            tp: p.tensor_parallel_degree,
        };
        if degrees.world() != world {
            return Err(ConfigError::Invalid(format!(
                "parallelism degrees multiply to {} (pp {} * replicate {} * shard {} * cp {} * tp {}), world_size is {world}",
                degrees.world(),
                degrees.pp,
                degrees.dp_replicate,
                degrees.dp_shard,
                degrees.cp,
                degrees.tp
            )));
        }
        let m = &self.model;
        let tp = degrees.tp;
        let cp = degrees.cp;
        if !m.n_heads.is_multiple_of(tp) {
            return Err(ConfigError::Invalid(format!(
                "model.n_heads {} not divisible by tensor_parallel_degree {tp}",
                m.n_heads
            )));
        }
        for (what, v) in [
            ("dim", m.dim),
            ("ffn_hidden", m.ffn_hidden),
            ("vocab_size", m.vocab_size),
        ] {
            if v % tp != 0 {
                return Err(ConfigError::Invalid(format!(
                    "model.{what} {v} not divisible by tensor_parallel_degree {tp}"
                )));
            }
        }
        if cp > 1 && !m.seq_len.is_multiple_of(2 * cp) {
            return Err(ConfigError::Invalid(format!(
                "model.seq_len {} not divisible by 2*context_parallel_degree {}",
                m.seq_len,
                2 * cp
            )));
        }
        if !(m.seq_len / cp).is_multiple_of(tp) {
            return Err(ConfigError::Invalid(format!(
                "local sequence {} not divisible by tensor_parallel_degree {tp}",
                m.seq_len / cp
            )));
        }
        let mbs = p.pipeline_parallel_microbatches;
        if mbs == 0 || !self.training.local_batch.is_multiple_of(mbs) {
            return Err(ConfigError::Invalid(format!(
                "training.local_batch {} not divisible by pipeline_parallel_microbatches {mbs}",
                self.training.local_batch
            )));
        }
        self.activation_checkpoint.to_ac_config()?;
        self.float8.to_float8_config()?;
        self.training.data_mode()?;
        TrainingSection::dtype_of(&self.training.param_dtype, "training.param_dtype")?;
        TrainingSection::dtype_of(&self.training.reduce_dtype, "training.reduce_dtype")?;
        self.parallelism.rotate_method()?;
        Ok(degrees)
    }
}

/// Apply one `section.key=value` override (a leading `--` is tolerated).
fn apply_override(table: &mut toml::Table, raw: &str) -> Result<(), ConfigError> {
    let body = raw.trim_start_matches("--");
    let (path, value) = body
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(raw.to_string()))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.is_empty() || keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::BadOverride(raw.to_string()));
    }
    // Parse the value as a TOML fragment; fall back to a bare string.
    let parsed: toml::Value = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        node = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(raw.to_string()))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_all_ranks_to_dp_shard() {
        let cfg = JobConfig::parse(None, &["--runtime.world_size=8".into()]).unwrap();
        let d = cfg.resolve_degrees().unwrap();
        assert_eq!(d.dp_shard, 8);
        assert_eq!(d.tp, 1);
    }

    #[test]
    fn override_wins_over_file_value() {
        let dir = std::env::temp_dir().join("meshtrain-cfg-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("job.toml");
        std::fs::write(&path, "[parallelism]\ntensor_parallel_degree = 2\n").unwrap();
        let cfg = JobConfig::parse(
            Some(&path),
            &[
                "--parallelism.tensor_parallel_degree=4".into(),
                "--runtime.world_size=4".into(),
                "--parallelism.data_parallel_shard_degree=1".into(),
                "--model.n_heads=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.parallelism.tensor_parallel_degree, 4);
    }

    #[test]
    fn degree_product_mismatch_names_the_product() {
        let cfg = JobConfig::parse(
            None,
            &[
                "--runtime.world_size=8".into(),
                "--parallelism.data_parallel_shard_degree=2".into(),
                "--parallelism.tensor_parallel_degree=2".into(),
            ],
        );
        let err = cfg.unwrap_err().to_string();
        assert!(err.contains("multiply to 4"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = JobConfig::from_toml_str("[training]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn roundtrip_is_idempotent() {
        let cfg = JobConfig::parse(
            None,
            &[
                "--runtime.world_size=4".into(),
                "--parallelism.tensor_parallel_degree=2".into(),
                "--training.lr=0.05".into(),
            ],
        )
        .unwrap();
        let once = cfg.to_toml_string();
        let reparsed = JobConfig::from_toml_str(&once).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(once, reparsed.to_toml_string());
    }

    #[test]
    fn override_type_inference() {
        let cfg = JobConfig::parse(
            None,
            &[
                "--parallelism.enable_loss_parallel=false".into(),
                "--training.lr=0.5".into(),
                "--parallelism.pipeline_parallel_split_points=[\"layers.1\"]".into(),
                "--training.data_mode=uniform".into(),
            ],
        )
        .unwrap();
        assert!(!cfg.parallelism.enable_loss_parallel);
        assert_eq!(cfg.training.lr, 0.5);
        assert_eq!(
            cfg.parallelism.pipeline_parallel_split_points,
            vec!["layers.1".to_string()]
        );
        assert_eq!(cfg.training.data_mode, "uniform");
    }

    #[test]
    fn seq_divisibility_validated_for_cp() {
        let err = JobConfig::parse(
            None,
            &[
                "--runtime.world_size=4".into(),
                "--parallelism.context_parallel_degree=4".into(),
                "--parallelism.data_parallel_shard_degree=1".into(),
                "--model.seq_len=12".into(),
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("seq_len"), "{err}");
    }
}
