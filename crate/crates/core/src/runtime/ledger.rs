//! Per-rank byte and memory accounting.
//!
//! Collective volumes follow a ring model: with a group of `W` ranks and `n`
//! payload bytes, an all-gather moves `(W-1)/W * n` bytes per rank, a
//! reduce-scatter the same, and an all-reduce twice that (reduce-scatter plus
//! all-gather). The analytic performance model uses the same formulas, so
//! estimates and measured ledgers can be compared directly.

use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Default, Clone, Serialize)]
pub struct CostLedger {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Number of issued operations per collective kind.
    pub collective_counts: BTreeMap<String, u64>,
    /// Per-rank bytes moved, keyed by the call-site label.
    pub bytes_by_label: BTreeMap<String, u64>,
    /// Bytes currently saved for the backward pass.
    pub activation_bytes: u64,
    pub activation_bytes_peak: u64,
    /// Parameter bytes currently materialized (shards plus gathered copies).
    pub parameter_bytes_resident: u64,
    pub parameter_bytes_peak: u64,
    /// Portion of collective traffic eligible for compute overlap.
    pub overlappable_bytes: u64,
}

impl CostLedger {
    pub fn record_op(&mut self, kind: &str, sent: u64, received: u64, label: &str) {
        self.bytes_sent += sent;
        self.bytes_received += received;
        *self.collective_counts.entry(kind.to_string()).or_default() += 1;
        *self.bytes_by_label.entry(label.to_string()).or_default() += sent.max(received);
    }

    pub fn activation_alloc(&mut self, bytes: u64) {
        self.activation_bytes += bytes;
        self.activation_bytes_peak = self.activation_bytes_peak.max(self.activation_bytes);
    }

    pub fn activation_free(&mut self, bytes: u64) {
        self.activation_bytes = self.activation_bytes.saturating_sub(bytes);
    }

    pub fn param_alloc(&mut self, bytes: u64) {
        self.parameter_bytes_resident += bytes;
        self.parameter_bytes_peak = self.parameter_bytes_peak.max(self.parameter_bytes_resident);
    }

    pub fn param_free(&mut self, bytes: u64) {
        self.parameter_bytes_resident = self.parameter_bytes_resident.saturating_sub(bytes);
    }

    pub fn mark_overlappable(&mut self, bytes: u64) {
        self.overlappable_bytes += bytes;
    }

    /// Sum of byte counters whose label starts with `prefix`.
    pub fn bytes_for_label_prefix(&self, prefix: &str) -> u64 {
        self.bytes_by_label
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| *v)
            .sum()
    }

    pub fn count(&self, kind: &str) -> u64 {
        self.collective_counts.get(kind).copied().unwrap_or(0)
    }
}

/// Merged per-rank ledgers of one completed (or aborted) world.
#[derive(Debug, Default, Clone, Serialize)]
pub struct WorldLedger {
    pub per_rank: Vec<CostLedger>,
}

impl WorldLedger {
    pub fn total_sent(&self) -> u64 {
        self.per_rank.iter().map(|l| l.bytes_sent).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.per_rank.iter().map(|l| l.bytes_received).sum()
    }

    pub fn max_label_bytes(&self, prefix: &str) -> u64 {
        self.per_rank
            .iter()
            .map(|l| l.bytes_for_label_prefix(prefix))
            .max()
            .unwrap_or(0)
    }
}
