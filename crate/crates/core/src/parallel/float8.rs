//! Emulated 8-bit (e4m3) linear layers with per-tensor scaling.
//!
//! A tensor is scaled so its absolute maximum lands on the largest finite
//! e4m3 value, rounded onto the e4m3 grid, multiplied in higher precision,
//! and descaled by the product of both scales. Three scale policies exist:
//! recompute from the current tensor (dynamic), track a history of recent
//! maxima (delayed), or use a fixed configured scale (static).

use crate::tensor::Result as TensorResult;
use crate::tensor::{f8, matmul, transpose2d, DType, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Float8Strategy {
    Dynamic,
    Delayed,
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Float8Config {
    pub enabled: bool,
    pub strategy: Float8Strategy,
    /// Only used by the static strategy.
    pub static_scale: f64,
    /// History window for the delayed strategy.
    pub amax_history_len: usize,
}

impl Default for Float8Config {
    fn default() -> Self {
        Float8Config {
            enabled: false,
            strategy: Float8Strategy::Dynamic,
            static_scale: 1.0,
            amax_history_len: 16,
        }
    }
}

/// Per-tensor amax history for delayed scaling. The history starts with the
/// first observed amax and is updated after each use.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScalingState {
    history: VecDeque<f64>,
}

impl ScalingState {
    /// Scale to use for a tensor whose current absolute max is `amax`,
    /// updating the history per the configured strategy.
    pub fn scale_for(&mut self, cfg: &Float8Config, amax: f64) -> f64 {
        match cfg.strategy {
            Float8Strategy::Dynamic => dynamic_scale(amax),
            Float8Strategy::Static => cfg.static_scale,
            Float8Strategy::Delayed => {
                if self.history.is_empty() {
                    self.history.push_back(amax);
                }
                let hist_max = self.history.iter().cloned().fold(0.0f64, f64::max);
                let scale = dynamic_scale(hist_max);
                self.history.push_back(amax);
                while self.history.len() > cfg.amax_history_len.max(1) {
                    self.history.pop_front();
                }
                scale
            }
        }
    }
}

/// `E4M3_MAX / amax`, clamped to 1.0 when the tensor is all zeros.
pub fn dynamic_scale(amax: f64) -> f64 {
    if amax <= 0.0 {
        1.0
    } else {
        f8::E4M3_MAX / amax
    }
}

/// Round `t * scale` onto the e4m3 grid.
pub fn quantize(t: &Tensor, scale: f64) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| f8::decode(f8::encode(v * scale)))
        .collect();
    Tensor::from_vec_dtype(t.shape(), data, DType::F8E4M3).expect("shape preserved")
}

/// What the backward pass needs: the dequantized operands actually used.
pub struct Float8Saved {
    pub x_hat: Tensor,
    pub w_hat: Tensor,
}

/// Quantized linear: quantize both operands per-tensor, multiply, rescale to
/// F32 precision, and return the dequantized product.
pub fn float8_linear(
    x: &Tensor,
    w: &Tensor,
    cfg: &Float8Config,
    x_state: &mut ScalingState,
    w_state: &mut ScalingState,
) -> TensorResult<(Tensor, Float8Saved)> {
    let sx = x_state.scale_for(cfg, x.max_abs());
    let sw = w_state.scale_for(cfg, w.max_abs());
    let xq = quantize(x, sx);
    let wq = quantize(w, sw);
    let raw = matmul(&xq.cast(DType::F64), &wq.cast(DType::F64))?;
    let descale = 1.0 / (sx * sw);
    let out_data: Vec<f64> = raw
        .data()
        .iter()
        .map(|&v| (v * descale) as f32 as f64)
        .collect();
    let out = Tensor::from_vec(raw.shape(), out_data)?;
    // Straight-through gradients flow through the dequantized operands.
    let x_hat = Tensor::from_vec(x.shape(), xq.data().iter().map(|&v| v / sx).collect())?;
    let w_hat = Tensor::from_vec(w.shape(), wq.data().iter().map(|&v| v / sw).collect())?;
    Ok((out, Float8Saved { x_hat, w_hat }))
}

/// Backward of [`float8_linear`]: `d_x = d_out @ ŵᵀ`, `d_w = x̂ᵀ @ d_out`.
pub fn float8_linear_backward(
    saved: &Float8Saved,
    d_out: &Tensor,
) -> TensorResult<(Tensor, Tensor)> {
    let d_x = matmul(d_out, &transpose2d(&saved.w_hat)?)?;
    let d_w = matmul(&transpose2d(&saved.x_hat)?, d_out)?;
    Ok((d_x, d_w))
}
