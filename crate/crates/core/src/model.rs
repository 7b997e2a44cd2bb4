//! Tiny Llama-style transformer: shape-only meta construction, deterministic
//! init, and a dense single-rank training step.
//!
//! The dense step in [`OracleModel`] is the ground truth every parallel
//! execution is compared against. It is written straight-line with no mesh,
//! placement, or communication logic on purpose: the parallel engine must
//! reproduce its losses, not share its code path.

use crate::data::TokenBatch;
use crate::tensor::{self, build_freqs_cis, init_param, GradPair, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const ROPE_THETA: f64 = 10000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Hidden width of the SwiGLU feed-forward block.
    pub ffn_hidden: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 16,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 32,
            seq_len: 16,
            ffn_hidden: 32,
            norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.vocab_size == 0
            || self.seq_len == 0
            || self.ffn_hidden == 0
        {
            return Err(ModelError::BadConfig(
                "all dimensions must be positive".into(),
            ));
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(ModelError::BadConfig(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(ModelError::BadConfig(
                "head_dim must be even for rotary pairs".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Shape-only description of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub fqn: String,
    pub shape: Vec<usize>,
}

/// The full parameter map of a model, with no numeric storage.
///
/// Fully-qualified names are the stable keys everything else hangs off:
/// tensor-parallel plans match on them, pipeline split points name them, and
/// checkpoints index by them.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    pub cfg: ModelConfig,
    params: Vec<ParamSpec>,
}

/// Weight layout convention: linear weights are `[in_features, out_features]`
/// and apply as `x @ W`, so the column dim is the output-feature dim.
pub fn build_meta_model(cfg: &ModelConfig) -> Result<MetaModel, ModelError> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut params = Vec::new();
    let mut push = |fqn: String, shape: Vec<usize>| params.push(ParamSpec { fqn, shape });
    push("tok_embeddings.weight".into(), vec![cfg.vocab_size, d]);
    for l in 0..cfg.n_layers {
        push(format!("layers.{l}.attention_norm.weight"), vec![d]);
        push(format!("layers.{l}.attention.wq.weight"), vec![d, d]);
        push(format!("layers.{l}.attention.wk.weight"), vec![d, d]);
        push(format!("layers.{l}.attention.wv.weight"), vec![d, d]);
        push(format!("layers.{l}.attention.wo.weight"), vec![d, d]);
        push(format!("layers.{l}.ffn_norm.weight"), vec![d]);
        push(format!("layers.{l}.mlp.w1.weight"), vec![d, cfg.ffn_hidden]);
        push(format!("layers.{l}.mlp.w3.weight"), vec![d, cfg.ffn_hidden]);
        push(format!("layers.{l}.mlp.w2.weight"), vec![cfg.ffn_hidden, d]);
    }
    push("norm.weight".into(), vec![d]);
    push("output.weight".into(), vec![d, cfg.vocab_size]);
    Ok(MetaModel {
        cfg: cfg.clone(),
        params,
    })
}

impl MetaModel {
    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn shape_of(&self, fqn: &str) -> Option<&[usize]> {
        self.params
            .iter()
            .find(|p| p.fqn == fqn)
            .map(|p| p.shape.as_slice())
    }

    /// Total number of parameter elements.
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Shape of the rotary table buffer: `[seq_len, head_dim/2, 2]`.
    pub fn freqs_shape(&self) -> Vec<usize> {
        vec![self.cfg.seq_len, self.cfg.head_dim() / 2, 2]
    }
}

/// Plain SGD with optional momentum, state keyed per parameter name.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// One update on a (possibly sharded) parameter and its gradient.
    pub fn step(&mut self, name: &str, value: &mut Tensor, grad: &Tensor) {
        debug_assert_eq!(value.shape(), grad.shape());
        if self.momentum == 0.0 {
            let v = value.data_mut();
            for (p, g) in v.iter_mut().zip(grad.data()) {
                *p -= self.lr * g;
            }
            return;
        }
        let vel = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        for ((p, v), g) in value
            .data_mut()
            .iter_mut()
            .zip(vel.data_mut())
            .zip(grad.data())
        {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }

    /// Momentum buffers, for checkpointing. Absent entries are all-zero.
    pub fn state(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn restore_state(&mut self, state: BTreeMap<String, Tensor>) {
        self.velocity = state;
    }
}

/// Dense single-rank model: the ground-truth training step.
pub struct OracleModel {
    pub cfg: ModelConfig,
    pub params: BTreeMap<String, GradPair>,
    pub freqs_cis: Tensor,
}

struct LayerSaved {
    input: Tensor,
    x_norm1: Tensor,
    q_rot: Tensor,
    k_rot: Tensor,
    v_heads: Tensor,
    probs: Tensor,
    attn_flat: Tensor,
    h_mid: Tensor,
    x_norm2: Tensor,
    a1: Tensor,
    a3: Tensor,
    act: Tensor,
}

struct ForwardSaved {
    ids: Vec<usize>,
    layers: Vec<LayerSaved>,
    h_last: Tensor,
    x_final: Tensor,
    probs: Tensor,
}

impl OracleModel {
    pub fn init(cfg: &ModelConfig, master_seed: u64) -> Result<OracleModel, ModelError> {
        let meta = build_meta_model(cfg)?;
        let params = meta
            .params()
            .iter()
            .map(|p| {
                (
                    p.fqn.clone(),
                    GradPair::new(init_param(&p.fqn, &p.shape, master_seed)),
                )
            })
            .collect();
        Ok(OracleModel {
            cfg: cfg.clone(),
            params,
            freqs_cis: build_freqs_cis(cfg.seq_len, cfg.head_dim(), ROPE_THETA),
        })
    }

    fn p(&self, fqn: &str) -> &Tensor {
        &self.params[fqn].value
    }

    /// Fold `[rows, dim]` through multi-head attention sample by sample.
    /// Returns (projected output, pre-projection rows, saved q/k/v/probs).
    #[allow(clippy::type_complexity)]
    fn attention(
        &self,
        layer: usize,
        x: &Tensor,
        batch: usize,
        seq: usize,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor, Tensor), ModelError> {
        let cfg = &self.cfg;
        let (h, hd) = (cfg.n_heads, cfg.head_dim());
        let q = tensor::matmul(x, self.p(&format!("layers.{layer}.attention.wq.weight")))?;
        let k = tensor::matmul(x, self.p(&format!("layers.{layer}.attention.wk.weight")))?;
        let v = tensor::matmul(x, self.p(&format!("layers.{layer}.attention.wv.weight")))?;
        let freqs = self.freqs_cis.narrow(0, 0, seq)?;
        let mut outs = Vec::with_capacity(batch);
        let mut q_rots = Vec::with_capacity(batch);
        let mut k_rots = Vec::with_capacity(batch);
        let mut v_heads_all = Vec::with_capacity(batch);
        let mut probs_all = Vec::with_capacity(batch);
        for b in 0..batch {
            let to_heads = |t: &Tensor| -> Result<Tensor, TensorError> {
                let sample = t.narrow(0, b * seq, (b + 1) * seq)?;
                tensor::permute(&sample.reshape(&[seq, h, hd])?, &[1, 0, 2])
            };
            let q_rot = tensor::rotary_apply(&to_heads(&q)?, &freqs)?;
            let k_rot = tensor::rotary_apply(&to_heads(&k)?, &freqs)?;
            let v_heads = to_heads(&v)?;
            let att = tensor::sdpa(&q_rot, &k_rot, &v_heads, true)?;
            let flat = tensor::permute(&att.out, &[1, 0, 2])?.reshape(&[seq, h * hd])?;
            outs.push(flat);
            q_rots.push(q_rot);
            k_rots.push(k_rot);
            v_heads_all.push(v_heads);
            probs_all.push(att.probs);
        }
        let attn_flat = Tensor::cat(&outs, 0)?;
        let out = tensor::matmul(
            &attn_flat,
            self.p(&format!("layers.{layer}.attention.wo.weight")),
        )?;
        Ok((
            out,
            attn_flat,
            Tensor::cat(&q_rots, 0)?,
            Tensor::cat(&k_rots, 0)?,
            Tensor::cat(&v_heads_all, 0)?,
            Tensor::cat(&probs_all, 0)?,
        ))
    }

    fn forward(&self, batch: &TokenBatch) -> Result<(f64, ForwardSaved), ModelError> {
        let cfg = &self.cfg;
        let eps = cfg.norm_eps;
        let mut h = tensor::embedding_lookup(self.p("tok_embeddings.weight"), &batch.input_ids)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let input = h.clone();
            let x_norm1 = tensor::rms_norm(
                &h,
                self.p(&format!("layers.{l}.attention_norm.weight")),
                eps,
            )?;
            let (attn_out, attn_flat, q_rot, k_rot, v_heads, probs) =
                self.attention(l, &x_norm1, batch.batch, batch.seq)?;
            let h_mid = tensor::add(&h, &attn_out)?;
            let x_norm2 =
                tensor::rms_norm(&h_mid, self.p(&format!("layers.{l}.ffn_norm.weight")), eps)?;
            let a1 = tensor::matmul(&x_norm2, self.p(&format!("layers.{l}.mlp.w1.weight")))?;
            let a3 = tensor::matmul(&x_norm2, self.p(&format!("layers.{l}.mlp.w3.weight")))?;
            let act = tensor::mul(&tensor::silu(&a1), &a3)?;
            let mlp_out = tensor::matmul(&act, self.p(&format!("layers.{l}.mlp.w2.weight")))?;
            h = tensor::add(&h_mid, &mlp_out)?;
            layers.push(LayerSaved {
                input,
                x_norm1,
                q_rot,
                k_rot,
                v_heads,
                probs,
                attn_flat,
                h_mid,
                x_norm2,
                a1,
                a3,
                act,
            });
        }
        let h_last = h;
        let x_final = tensor::rms_norm(&h_last, self.p("norm.weight"), eps)?;
        let logits = tensor::matmul(&x_final, self.p("output.weight"))?;
        let (loss, probs) = tensor::softmax_cross_entropy(&logits, &batch.labels)?;
        Ok((
            loss,
            ForwardSaved {
                ids: batch.input_ids.clone(),
                layers,
                h_last,
                x_final,
                probs,
            },
        ))
    }

    /// Forward and backward over one batch; gradients are scaled by
    /// `grad_scale` and accumulated into the parameters' `grad` slots.
    pub fn forward_backward_scaled(
        &mut self,
        batch: &TokenBatch,
        grad_scale: f64,
    ) -> Result<f64, ModelError> {
        let (loss, saved) = self.forward(batch)?;
        let cfg = self.cfg.clone();
        let eps = cfg.norm_eps;
        let (h, hd) = (cfg.n_heads, cfg.head_dim());
        let seq = batch.seq;

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let add_grad = |grads: &mut BTreeMap<String, Tensor>, name: String, g: Tensor| match grads
            .get_mut(&name)
        {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                grads.insert(name, g);
            }
        };

        let d_logits = tensor::scale(
            &tensor::softmax_cross_entropy_backward(&saved.probs, &batch.labels)?,
            grad_scale,
        );
        let (d_xfinal, d_w_out) =
            tensor::matmul_backward(&saved.x_final, self.p("output.weight"), &d_logits)?;
        add_grad(&mut grads, "output.weight".into(), d_w_out);
        let (mut d_h, d_norm) =
            tensor::rms_norm_backward(&saved.h_last, self.p("norm.weight"), eps, &d_xfinal)?;
        add_grad(&mut grads, "norm.weight".into(), d_norm);

        for l in (0..cfg.n_layers).rev() {
            let s = &saved.layers[l];
            // Feed-forward.
            let (d_act, d_w2) = tensor::matmul_backward(
                &s.act,
                self.p(&format!("layers.{l}.mlp.w2.weight")),
                &d_h,
            )?;
            add_grad(&mut grads, format!("layers.{l}.mlp.w2.weight"), d_w2);
            let d_a3 = tensor::mul(&d_act, &tensor::silu(&s.a1))?;
            let d_a1 = tensor::silu_backward(&s.a1, &tensor::mul(&d_act, &s.a3)?)?;
            let (d_x2_a, d_w1) = tensor::matmul_backward(
                &s.x_norm2,
                self.p(&format!("layers.{l}.mlp.w1.weight")),
                &d_a1,
            )?;
            let (d_x2_b, d_w3) = tensor::matmul_backward(
                &s.x_norm2,
                self.p(&format!("layers.{l}.mlp.w3.weight")),
                &d_a3,
            )?;
            add_grad(&mut grads, format!("layers.{l}.mlp.w1.weight"), d_w1);
            add_grad(&mut grads, format!("layers.{l}.mlp.w3.weight"), d_w3);
            let d_x_norm2 = tensor::add(&d_x2_a, &d_x2_b)?;
            let (d_from_norm2, d_ffn_norm) = tensor::rms_norm_backward(
                &s.h_mid,
                self.p(&format!("layers.{l}.ffn_norm.weight")),
                eps,
                &d_x_norm2,
            )?;
            add_grad(
                &mut grads,
                format!("layers.{l}.ffn_norm.weight"),
                d_ffn_norm,
            );
            let d_h_mid = tensor::add(&d_h, &d_from_norm2)?;

            // Attention.
            let (d_attn_flat, d_wo) = tensor::matmul_backward(
                &s.attn_flat,
                self.p(&format!("layers.{l}.attention.wo.weight")),
                &d_h_mid,
            )?;
            add_grad(&mut grads, format!("layers.{l}.attention.wo.weight"), d_wo);
            let freqs = self.freqs_cis.narrow(0, 0, seq)?;
            let mut d_q_rows = Vec::with_capacity(batch.batch);
            let mut d_k_rows = Vec::with_capacity(batch.batch);
            let mut d_v_rows = Vec::with_capacity(batch.batch);
            for b in 0..batch.batch {
                let slice3 = |t: &Tensor| t.narrow(0, b * h, (b + 1) * h);
                let d_out_heads = tensor::permute(
                    &d_attn_flat
                        .narrow(0, b * seq, (b + 1) * seq)?
                        .reshape(&[seq, h, hd])?,
                    &[1, 0, 2],
                )?;
                let (d_q_rot, d_k_rot, d_v_h) = tensor::sdpa_backward(
                    &slice3(&s.q_rot)?,
                    &slice3(&s.k_rot)?,
                    &slice3(&s.v_heads)?,
                    &slice3(&s.probs)?,
                    &d_out_heads,
                )?;
                let back_rows = |t: &Tensor| -> Result<Tensor, TensorError> {
                    tensor::permute(t, &[1, 0, 2])?.reshape(&[seq, h * hd])
                };
                d_q_rows.push(back_rows(&tensor::rotary_backward(&d_q_rot, &freqs)?)?);
                d_k_rows.push(back_rows(&tensor::rotary_backward(&d_k_rot, &freqs)?)?);
                d_v_rows.push(back_rows(&d_v_h)?);
            }
            let d_q = Tensor::cat(&d_q_rows, 0)?;
            let d_k = Tensor::cat(&d_k_rows, 0)?;
            let d_v = Tensor::cat(&d_v_rows, 0)?;
            let (d_x1_q, d_wq) = tensor::matmul_backward(
                &s.x_norm1,
                self.p(&format!("layers.{l}.attention.wq.weight")),
                &d_q,
            )?;
            let (d_x1_k, d_wk) = tensor::matmul_backward(
                &s.x_norm1,
                self.p(&format!("layers.{l}.attention.wk.weight")),
                &d_k,
            )?;
            let (d_x1_v, d_wv) = tensor::matmul_backward(
                &s.x_norm1,
                self.p(&format!("layers.{l}.attention.wv.weight")),
                &d_v,
            )?;
            add_grad(&mut grads, format!("layers.{l}.attention.wq.weight"), d_wq);
            add_grad(&mut grads, format!("layers.{l}.attention.wk.weight"), d_wk);
            add_grad(&mut grads, format!("layers.{l}.attention.wv.weight"), d_wv);
            let d_x_norm1 = tensor::add(&tensor::add(&d_x1_q, &d_x1_k)?, &d_x1_v)?;
            let (d_from_norm1, d_attn_norm) = tensor::rms_norm_backward(
                &s.input,
                self.p(&format!("layers.{l}.attention_norm.weight")),
                eps,
                &d_x_norm1,
            )?;
            add_grad(
                &mut grads,
                format!("layers.{l}.attention_norm.weight"),
                d_attn_norm,
            );
            d_h = tensor::add(&d_h_mid, &d_from_norm1)?;
        }

        let d_emb = tensor::embedding_backward(cfg.vocab_size, &saved.ids, &d_h)?;
        add_grad(&mut grads, "tok_embeddings.weight".into(), d_emb);

        for (name, g) in grads {
            self.params
                .get_mut(&name)
                .expect("gradient for unknown parameter")
                .accumulate(&g)?;
        }
        Ok(loss)
    }

    /// One full forward/backward with unit gradient scale.
    pub fn forward_backward_step(&mut self, batch: &TokenBatch) -> Result<f64, ModelError> {
        self.forward_backward_scaled(batch, 1.0)
    }

    /// Logits only (tests compare these against parallel executions).
    pub fn forward_logits(&self, batch: &TokenBatch) -> Result<Tensor, ModelError> {
        let (_, saved) = self.forward(batch)?;
        Ok(tensor::matmul(&saved.x_final, self.p("output.weight"))?)
    }

    pub fn zero_grads(&mut self) {
        for gp in self.params.values_mut() {
            gp.grad = None;
        }
    }

    pub fn apply_sgd(&mut self, opt: &mut Sgd) {
        for (name, gp) in self.params.iter_mut() {
            if let Some(g) = gp.grad.take() {
                opt.step(name, &mut gp.value, &g);
            }
        }
    }

    /// Train on a batch stream; returns per-step losses.
    pub fn train(
        &mut self,
        batches: impl Iterator<Item = TokenBatch>,
        opt: &mut Sgd,
    ) -> Result<Vec<f64>, ModelError> {
        let mut losses = Vec::new();
        for batch in batches {
            self.zero_grads();
            losses.push(self.forward_backward_step(&batch)?);
            self.apply_sgd(opt);
        }
        Ok(losses)
    }
}
