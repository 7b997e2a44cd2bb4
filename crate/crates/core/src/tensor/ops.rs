//! Forward/backward kernel pairs for the operations the transformer needs.
//!
//! Backward functions take whatever the forward chose to save; nothing is
//! recorded implicitly. Shapes are validated at the public entry points and
//! every output is checked finite before it is returned.

use super::{ensure_finite, Result, Tensor, TensorError};

/// `[m, k] @ [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.dtype() != b.dtype() {
        return Err(TensorError::DTypeMismatch {
            op: "matmul",
            lhs: a.dtype(),
            rhs: b.dtype(),
        });
    }
    let mut out = vec![0.0f64; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    let t = Tensor::from_vec(&[m, n], out)?;
    ensure_finite("matmul", &t)?;
    Ok(t)
}

/// Gradients of [`matmul`]: `d_a = d_out @ bᵀ`, `d_b = aᵀ @ d_out`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let d_a = matmul(d_out, &transpose2d(b)?)?;
    let d_b = matmul(&transpose2d(a)?, d_out)?;
    Ok((d_a, d_b))
}

pub fn transpose2d(t: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2("transpose2d", t)?;
    let src = t.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

/// Materialized dimension permutation.
pub fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = t.shape().len();
    if perm.len() != rank {
        return Err(TensorError::Invalid {
            op: "permute",
            msg: format!("perm {perm:?} for rank {rank}"),
        });
    }
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&d| in_shape[d]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let numel = t.numel();
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    let src = t.data();
    for item in out.iter_mut().take(numel) {
        let mut src_off = 0;
        for d in 0..rank {
            src_off += idx[d] * in_strides[perm[d]];
        }
        *item = src[src_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let t = Tensor::from_vec(a.shape(), data)?;
    ensure_finite("add", &t)?;
    Ok(t)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let t = Tensor::from_vec(a.shape(), data)?;
    ensure_finite("mul", &t)?;
    Ok(t)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * c).collect();
    Tensor::from_vec(a.shape(), data).expect("shape preserved")
}

pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
    Tensor::from_vec(x.shape(), data).expect("shape preserved")
}

pub fn silu_backward(x: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    same_shape("silu_backward", x, d_out)?;
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &d)| {
            let s = 1.0 / (1.0 + (-v).exp());
            d * (s + v * s * (1.0 - s))
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Gather rows of `table` (`[vocab, dim]`) at `ids`.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (vocab, dim) = dims2("embedding_lookup", table)?;
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        if id >= vocab {
            return Err(TensorError::OutOfRange {
                op: "embedding_lookup",
                index: id,
                bound: vocab,
            });
        }
        out.extend_from_slice(&table.data()[id * dim..(id + 1) * dim]);
    }
    Tensor::from_vec(&[ids.len(), dim], out)
}

/// Scatter-add `d_out` rows back into a `[vocab, dim]` gradient.
pub fn embedding_backward(vocab: usize, ids: &[usize], d_out: &Tensor) -> Result<Tensor> {
    let (n, dim) = dims2("embedding_backward", d_out)?;
    if n != ids.len() {
        return Err(TensorError::Invalid {
            op: "embedding_backward",
            msg: format!("{} ids vs {} gradient rows", ids.len(), n),
        });
    }
    let mut grad = vec![0.0; vocab * dim];
    for (row, &id) in ids.iter().enumerate() {
        let src = &d_out.data()[row * dim..(row + 1) * dim];
        let dst = &mut grad[id * dim..(id + 1) * dim];
        for (g, d) in dst.iter_mut().zip(src) {
            *g += d;
        }
    }
    Tensor::from_vec(&[vocab, dim], grad)
}

/// Position-dependent rotation table: `[seq, head_dim/2, 2]` of (cos, sin).
pub fn build_freqs_cis(seq_len: usize, head_dim: usize, theta: f64) -> Tensor {
    let half = head_dim / 2;
    let mut data = Vec::with_capacity(seq_len * half * 2);
    for pos in 0..seq_len {
        for i in 0..half {
            let freq = 1.0 / theta.powf(2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            data.push(angle.cos());
            data.push(angle.sin());
        }
    }
    Tensor::from_vec(&[seq_len, half, 2], data).expect("table shape")
}

/// Rotate (even, odd) feature pairs of `x` (`[..., seq, head_dim]`) by the
/// per-position angles in `freqs` (`[seq, head_dim/2, 2]`).
pub fn rotary_apply(x: &Tensor, freqs: &Tensor) -> Result<Tensor> {
    rotary_rotate(x, freqs, false)
}

/// Gradient of [`rotary_apply`]: the rotation is orthogonal, so the backward
/// pass applies the inverse rotation to the incoming gradient.
pub fn rotary_backward(d_out: &Tensor, freqs: &Tensor) -> Result<Tensor> {
    rotary_rotate(d_out, freqs, true)
}

fn rotary_rotate(x: &Tensor, freqs: &Tensor, inverse: bool) -> Result<Tensor> {
    let rank = x.shape().len();
    if rank < 2 {
        return Err(TensorError::Invalid {
            op: "rotary_apply",
            msg: format!("need at least 2 dims, got {:?}", x.shape()),
        });
    }
    let hd = x.shape()[rank - 1];
    let seq = x.shape()[rank - 2];
    let half = hd / 2;
    if freqs.shape() != [seq, half, 2] || !hd.is_multiple_of(2) {
        return Err(TensorError::ShapeMismatch {
            op: "rotary_apply",
            lhs: x.shape().to_vec(),
            rhs: freqs.shape().to_vec(),
        });
    }
    let lead: usize = x.shape()[..rank - 2].iter().product();
    let mut out = vec![0.0; x.numel()];
    let src = x.data();
    let fr = freqs.data();
    for l in 0..lead {
        for s in 0..seq {
            let base = (l * seq + s) * hd;
            for i in 0..half {
                let cos = fr[(s * half + i) * 2];
                let sin = fr[(s * half + i) * 2 + 1] * if inverse { -1.0 } else { 1.0 };
                let even = src[base + 2 * i];
                let odd = src[base + 2 * i + 1];
                out[base + 2 * i] = even * cos - odd * sin;
                out[base + 2 * i + 1] = even * sin + odd * cos;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Saved state of an [`sdpa`] call: output plus the softmax probabilities.
pub struct SdpaOutput {
    pub out: Tensor,
    pub probs: Tensor,
}

/// Scaled dot-product attention over `[heads, seq, head_dim]` inputs.
///
/// `softmax(q·kᵀ/√hd + causal_mask) · v`; the causal mask forbids position `i`
/// from attending to any `j > i`.
pub fn sdpa(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<SdpaOutput> {
    let (h, sq, hd) = dims3("sdpa", q)?;
    let (hk, skv, hdk) = dims3("sdpa", k)?;
    let (hv, skv2, hdv) = dims3("sdpa", v)?;
    if h != hk || h != hv || hd != hdk || hd != hdv || skv != skv2 {
        return Err(TensorError::ShapeMismatch {
            op: "sdpa",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; h * sq * skv];
    let mut out = vec![0.0; h * sq * hd];
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    for head in 0..h {
        for i in 0..sq {
            let qrow = &qd[(head * sq + i) * hd..(head * sq + i + 1) * hd];
            let limit = if causal { i + 1 } else { skv };
            let prow = &mut probs[(head * sq + i) * skv..(head * sq + i + 1) * skv];
            let mut max = f64::NEG_INFINITY;
            for j in 0..limit {
                let krow = &kd[(head * skv + j) * hd..(head * skv + j + 1) * hd];
                let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                prow[j] = s;
                max = max.max(s);
            }
            let mut denom = 0.0;
            for p in prow.iter_mut().take(limit) {
                *p = (*p - max).exp();
                denom += *p;
            }
            let orow = &mut out[(head * sq + i) * hd..(head * sq + i + 1) * hd];
            for j in 0..limit {
                let p = prow[j] / denom;
                prow[j] = p;
                let vrow = &vd[(head * skv + j) * hd..(head * skv + j + 1) * hd];
                for (o, val) in orow.iter_mut().zip(vrow) {
                    *o += p * val;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[h, sq, hd], out)?;
    ensure_finite("sdpa", &out)?;
    Ok(SdpaOutput {
        out,
        probs: Tensor::from_vec(&[h, sq, skv], probs)?,
    })
}

/// Gradients of [`sdpa`] given the saved probabilities.
pub fn sdpa_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, sq, hd) = dims3("sdpa_backward", q)?;
    let (_, skv, _) = dims3("sdpa_backward", k)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; q.numel()];
    let mut dk = vec![0.0; k.numel()];
    let mut dv = vec![0.0; v.numel()];
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let pd = probs.data();
    let dod = d_out.data();
    for head in 0..h {
        for i in 0..sq {
            let prow = &pd[(head * sq + i) * skv..(head * sq + i + 1) * skv];
            let dorow = &dod[(head * sq + i) * hd..(head * sq + i + 1) * hd];
            // dP = dO Vᵀ, then dS = P ⊙ (dP − Σ dP⊙P) row-wise.
            let mut dp = vec![0.0; skv];
            for j in 0..skv {
                if prow[j] == 0.0 {
                    continue;
                }
                let vrow = &vd[(head * skv + j) * hd..(head * skv + j + 1) * hd];
                dp[j] = dorow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                for (g, d) in dv[(head * skv + j) * hd..(head * skv + j + 1) * hd]
                    .iter_mut()
                    .zip(dorow)
                {
                    *g += prow[j] * d;
                }
            }
            let inner: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
            let qrow = &qd[(head * sq + i) * hd..(head * sq + i + 1) * hd];
            for j in 0..skv {
                let ds = prow[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let krow = &kd[(head * skv + j) * hd..(head * skv + j + 1) * hd];
                for (g, kv) in dq[(head * sq + i) * hd..(head * sq + i + 1) * hd]
                    .iter_mut()
                    .zip(krow)
                {
                    *g += ds * kv;
                }
                for (g, qv) in dk[(head * skv + j) * hd..(head * skv + j + 1) * hd]
                    .iter_mut()
                    .zip(qrow)
                {
                    *g += ds * qv;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(q.shape(), dq)?,
        Tensor::from_vec(k.shape(), dk)?,
        Tensor::from_vec(v.shape(), dv)?,
    ))
}

/// RMS normalization over the trailing dimension: `x / sqrt(mean(x²)+eps) · w`.
pub fn rms_norm(x: &Tensor, w: &Tensor, eps: f64) -> Result<Tensor> {
    let d = trailing_dim("rms_norm", x, w)?;
    let rows = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let xrow = &x.data()[r * d..(r + 1) * d];
        let ms = xrow.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = xrow[j] * inv * w.data()[j];
        }
    }
    let t = Tensor::from_vec(x.shape(), out)?;
    ensure_finite("rms_norm", &t)?;
    Ok(t)
}

/// Gradients of [`rms_norm`]: returns `(d_x, d_w)`.
pub fn rms_norm_backward(
    x: &Tensor,
    w: &Tensor,
    eps: f64,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = trailing_dim("rms_norm_backward", x, w)?;
    same_shape("rms_norm_backward", x, d_out)?;
    let rows = x.numel() / d;
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; d];
    for r in 0..rows {
        let xrow = &x.data()[r * d..(r + 1) * d];
        let drow = &d_out.data()[r * d..(r + 1) * d];
        let ms = xrow.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        let mut inner = 0.0;
        for j in 0..d {
            inner += drow[j] * w.data()[j] * xrow[j];
            dw[j] += drow[j] * xrow[j] * inv;
        }
        let k = inv * inv * inv * inner / d as f64;
        for j in 0..d {
            dx[r * d + j] = inv * drow[j] * w.data()[j] - k * xrow[j];
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(&[d], dw)?,
    ))
}

/// Mean negative log-likelihood over rows of `logits` (`[n, vocab]`).
///
/// Returns the loss and the row-wise softmax, which the backward pass needs.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (n, vocab) = dims2("softmax_cross_entropy", logits)?;
    if n != targets.len() {
        return Err(TensorError::Invalid {
            op: "softmax_cross_entropy",
            msg: format!("{} targets for {} rows", targets.len(), n),
        });
    }
    let mut probs = vec![0.0; n * vocab];
    let mut loss = 0.0;
    for r in 0..n {
        let t = targets[r];
        if t >= vocab {
            return Err(TensorError::OutOfRange {
                op: "softmax_cross_entropy",
                index: t,
                bound: vocab,
            });
        }
        let row = &logits.data()[r * vocab..(r + 1) * vocab];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..vocab {
            let e = (row[j] - max).exp();
            probs[r * vocab + j] = e;
            denom += e;
        }
        for p in &mut probs[r * vocab..(r + 1) * vocab] {
            *p /= denom;
        }
        loss -= row[t] - max - denom.ln();
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    Ok((loss, Tensor::from_vec(&[n, vocab], probs)?))
}

/// Gradient of [`softmax_cross_entropy`]: `(softmax − onehot) / n`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, vocab) = dims2("softmax_cross_entropy_backward", probs)?;
    let mut grad = probs.data().to_vec();
    for (r, &t) in targets.iter().enumerate() {
        grad[r * vocab + t] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Tensor::from_vec(&[n, vocab], grad)
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(TensorError::Invalid {
            op,
            msg: format!("expected 2-D, got {other:?}"),
        }),
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        other => Err(TensorError::Invalid {
            op,
            msg: format!("expected 3-D, got {other:?}"),
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn trailing_dim(op: &'static str, x: &Tensor, w: &Tensor) -> Result<usize> {
    let d = *x.shape().last().ok_or(TensorError::Invalid {
        op,
        msg: "zero-rank input".into(),
    })?;
    if d == 0 || w.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap().data(), m.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            matmul(&a, &b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sdpa_seq1_returns_v() {
        let q = Tensor::from_vec(&[1, 1, 4], vec![0.3, -0.1, 0.7, 0.2]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::from_vec(&[1, 1, 4], vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        let out = sdpa(&q, &k, &v, true).unwrap().out;
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn sdpa_causal_uniform_scores_average_prefix() {
        // Zero q gives all-zero scores; causal softmax is then uniform over j <= i.
        let q = Tensor::zeros(&[1, 3, 2]);
        let k = Tensor::ones(&[1, 3, 2]);
        let v = Tensor::from_vec(&[1, 3, 2], vec![1.0, 0.0, 2.0, 0.0, 6.0, 0.0]).unwrap();
        let out = sdpa(&q, &k, &v, true).unwrap().out;
        assert_eq!(out.data()[0], 1.0);
        assert!((out.data()[2] - 1.5).abs() < 1e-12);
        assert!((out.data()[4] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits =
            Tensor::from_vec(&[2, 4], vec![0.3, -1.0, 2.0, 0.1, 5.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, probs) = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        for r in 0..2 {
            let sum: f64 = probs.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let logits = Tensor::zeros(&[3, 16]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 5, 15]).unwrap();
        assert!((loss - (16.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_limit() {
        let mut data = vec![0.0; 8];
        data[3] = 1e6;
        let logits = Tensor::from_vec(&[1, 8], data).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let logits = Tensor::zeros(&[1, 4]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[4]),
            Err(TensorError::OutOfRange { .. })
        ));
    }

    #[test]
    fn rms_norm_ones_fixed_point() {
        let x = Tensor::ones(&[4]);
        let w = Tensor::ones(&[4]);
        let y = rms_norm(&x, &w, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn rms_norm_scale_invariance() {
        let x = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let w = Tensor::from_vec(&[4], vec![1.0, 0.5, 2.0, 1.5]).unwrap();
        let a = rms_norm(&x, &w, 0.0).unwrap();
        let b = rms_norm(&scale(&x, 7.5), &w, 0.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_at_zero() {
        let x = Tensor::zeros(&[3]);
        assert_eq!(silu(&x).data(), &[0.0; 3]);
    }

    #[test]
    fn rotary_position_zero_is_identity() {
        let freqs = build_freqs_cis(4, 8, 10000.0);
        let x = Tensor::from_vec(&[1, 1, 8], (0..8).map(|v| v as f64).collect()).unwrap();
        let f0 = freqs.narrow(0, 0, 1).unwrap();
        let y = rotary_apply(&x, &f0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rotary_inverse_undoes() {
        let freqs = build_freqs_cis(6, 4, 10000.0);
        let x = Tensor::from_vec(&[2, 6, 4], (0..48).map(|v| (v as f64).sin()).collect()).unwrap();
        let y = rotary_apply(&x, &freqs).unwrap();
        let back = rotary_backward(&y, &freqs).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_backward_matches_onehot_matmul() {
        // Oracle: embedding lookup is one-hot @ table, so its backward is
        // one-hotᵀ @ d_out, computed densely here.
        let vocab = 5;
        let dim = 3;
        let ids = [1usize, 3, 1];
        let d_out = Tensor::from_vec(&[3, 3], (0..9).map(|v| v as f64 * 0.1).collect()).unwrap();
        let grad = embedding_backward(vocab, &ids, &d_out).unwrap();

        let mut onehot = vec![0.0; ids.len() * vocab];
        for (r, &id) in ids.iter().enumerate() {
            onehot[r * vocab + id] = 1.0;
        }
        let onehot = Tensor::from_vec(&[ids.len(), vocab], onehot).unwrap();
        let dense = matmul(&transpose2d(&onehot).unwrap(), &d_out).unwrap();
        assert_eq!(grad.data(), dense.data());
        assert_eq!(grad.shape(), &[vocab, dim]);
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = permute(&t, &[1, 0]).unwrap();
        assert_eq!(p.data(), transpose2d(&t).unwrap().data());
        let t3 = Tensor::from_vec(&[2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let p3 = permute(&t3, &[1, 0, 2]).unwrap();
        assert_eq!(p3.data(), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }
}
