//! Deterministic, counter-based initialization.
//!
//! Every element of every parameter is a pure function of
//! `(master_seed, parameter name, flat global index)`. Because no sequential
//! generator state exists, initializing a shard of a tensor yields exactly the
//! corresponding slice of the full initialization — sharded init equals full
//! init by construction, for any shard geometry.

use super::Tensor;

const STREAM_PARAM: u64 = 0x9d5c_74a1_0b61_c0de;
const STREAM_DATA: u64 = 0x51ab_3f00_77aa_1234;

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[inline]
fn mix(words: &[u64]) -> u64 {
    let mut h = 0x2545_f491_4f6c_dd1du64;
    for &w in words {
        h = splitmix64(h ^ w);
    }
    h
}

fn fnv1a(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Uniform in the open interval (0, 1).
#[inline]
fn unit_open(bits: u64) -> f64 {
    (((bits >> 11) | 1) as f64) * (1.0 / (1u64 << 53) as f64)
}

/// Keyed generator for one named parameter.
#[derive(Debug, Clone, Copy)]
pub struct ParamRng {
    seed: u64,
    name_hash: u64,
}

impl ParamRng {
    pub fn new(master_seed: u64, name: &str) -> ParamRng {
        ParamRng {
            seed: master_seed,
            name_hash: fnv1a(name),
        }
    }

    /// Standard normal truncated to [-2, 2], drawn for flat index `idx`.
    pub fn trunc_normal(&self, idx: u64, std: f64) -> f64 {
        for attempt in 0u64.. {
            let b1 = mix(&[STREAM_PARAM, self.seed, self.name_hash, idx, attempt, 0]);
            let b2 = mix(&[STREAM_PARAM, self.seed, self.name_hash, idx, attempt, 1]);
            let u1 = unit_open(b1);
            let u2 = unit_open(b2);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
        unreachable!()
    }
}

fn is_norm_weight(name: &str) -> bool {
    name.ends_with("norm.weight")
}

/// Deterministic init of a full parameter tensor.
///
/// Weights draw from a truncated normal with std 0.02; normalization weights
/// initialize to ones so an untrained model is well-scaled.
pub fn init_param(name: &str, global_shape: &[usize], master_seed: u64) -> Tensor {
    let offsets = vec![0; global_shape.len()];
    init_param_region(name, global_shape, master_seed, &offsets, global_shape)
}

/// Deterministic init of an arbitrary hyperrectangular region of a parameter.
///
/// Produces exactly the corresponding slice of `init_param` for the same name,
/// shape, and seed; this is what makes sharded initialization layout-independent.
pub fn init_param_region(
    name: &str,
    global_shape: &[usize],
    master_seed: u64,
    offsets: &[usize],
    lengths: &[usize],
) -> Tensor {
    assert_eq!(global_shape.len(), offsets.len());
    assert_eq!(global_shape.len(), lengths.len());
    let numel: usize = lengths.iter().product();
    if is_norm_weight(name) {
        return Tensor::ones(lengths);
    }
    let rng = ParamRng::new(master_seed, name);
    let mut data = Vec::with_capacity(numel);
    let mut local = vec![0usize; lengths.len()];
    for _ in 0..numel {
        // Row-major global flat index of this local position.
        let mut flat = 0u64;
        for d in 0..lengths.len() {
            flat = flat * global_shape[d] as u64 + (offsets[d] + local[d]) as u64;
        }
        data.push(rng.trunc_normal(flat, 0.02));
        for d in (0..lengths.len()).rev() {
            local[d] += 1;
            if local[d] < lengths[d] {
                break;
            }
            local[d] = 0;
        }
    }
    Tensor::from_vec(lengths, data).expect("region numel matches")
}

/// Counter-based word stream for synthetic data generation.
pub fn token_stream_u64(seed: u64, cursor: u64, sample: u64, position: u64) -> u64 {
    mix(&[STREAM_DATA, seed, cursor, sample, position])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = init_param("layers.0.attention.wq.weight", &[8, 8], 7);
        let b = init_param("layers.0.attention.wq.weight", &[8, 8], 7);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn distinct_names_differ() {
        let a = init_param("layers.0.attention.wq.weight", &[32, 32], 7);
        let b = init_param("layers.0.attention.wk.weight", &[32, 32], 7);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn shard_consistency_dim0() {
        let full = init_param("w", &[10, 3], 42);
        let top = init_param_region("w", &[10, 3], 42, &[0, 0], &[6, 3]);
        let bottom = init_param_region("w", &[10, 3], 42, &[6, 0], &[4, 3]);
        let glued = Tensor::cat(&[top, bottom], 0).unwrap();
        assert_eq!(glued.data(), full.data());
    }

    #[test]
    fn shard_consistency_inner_dim() {
        let full = init_param("w", &[4, 6], 1);
        let left = init_param_region("w", &[4, 6], 1, &[0, 0], &[4, 2]);
        let right = init_param_region("w", &[4, 6], 1, &[0, 2], &[4, 4]);
        let glued = Tensor::cat(&[left, right], 1).unwrap();
        assert_eq!(glued.data(), full.data());
    }

    #[test]
    fn norm_weights_are_ones() {
        let t = init_param("layers.3.ffn_norm.weight", &[16], 0);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn values_respect_truncation() {
        let t = init_param("tok_embeddings.weight", &[64, 64], 3);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
        let spread = t.max_abs();
        assert!(spread > 0.02, "expected draws near the truncation bound");
    }
}
