//! Transformer building blocks on top of candle tensors. Everything here is
//! written with differentiable primitives so the same code serves inference,
//! training and gradient checks in either precision.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: store.get(&format!("{prefix}.weight"))?.clone(),
            bias: store.get(&format!("{prefix}.bias"))?.clone(),
        })
    }

    /// `x @ W + b` over the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (rows, last) = match dims.split_last() {
            Some((last, lead)) => (lead.iter().product::<usize>(), *last),
            None => (1, 1),
        };
        let out = self.weight.dim(1)?;
        let y = x
            .reshape((rows, last))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = out;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&format!("{prefix}.gamma"))?.clone(),
            beta: store.get(&format!("{prefix}.beta"))?.clone(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Numerically stable softmax over the last axis. The row maximum is
/// treated as a constant, which leaves the gradient unchanged.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `(B, T, d) -> (B, h, T, d/h)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    Ok(x.reshape((b, t, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, h, T, dh) -> (B, T, h*dh)`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, t, h * dh))?)
}

/// Additive causal mask: 0 on and below the diagonal, -inf above.
/// `offset` shifts query positions for incremental decoding.
pub fn causal_mask(queries: usize, keys: usize, offset: usize, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f32; queries * keys];
    for i in 0..queries {
        for j in (i + offset + 1)..keys {
            m[i * keys + j] = f32::NEG_INFINITY;
        }
    }
    Ok(Tensor::from_vec(m, (queries, keys), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Attention probabilities `softmax(q k^T / sqrt(dh) + mask)` for
/// head-split inputs `(B, h, Tq, dh)`, `(B, h, Tk, dh)`.
pub fn attention_probs(q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m)?,
        None => scores,
    };
    softmax_last(&scores)
}

/// Multi-head scaled dot-product attention on `(B, T, d)` inputs; returns
/// `(B, Tq, d)` before any output projection.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (qh, kh, vh) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let p = attention_probs(&qh, &kh, mask)?;
    merge_heads(&p.matmul(&vh)?)
}

/// Fixed sinusoidal position table for absolute positions
/// `start..start+len`, shape `(len, d)`.
pub fn sinusoidal_positions(start: usize, len: usize, d: usize, dtype: DType) -> Result<Tensor> {
    let half = d / 2;
    let mut v = vec![0f32; len * d];
    for p in 0..len {
        let pos = (start + p) as f64;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            v[p * d + i] = (pos * freq).sin() as f32;
            v[p * d + half + i] = (pos * freq).cos() as f32;
        }
    }
    Ok(Tensor::from_vec(v, (len, d), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean negative log-likelihood of `targets` under `logits` `(..., K)`;
/// one target per leading position in row-major order.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let k = logits.dim(D::Minus1)?;
    let n = logits.elem_count() / k;
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for {n} logit rows",
            targets.len()
        )));
    }
    let lp = log_softmax_last(&logits.reshape((n, k))?)?;
    let ids = Tensor::from_slice(targets, (n, 1), &Device::Cpu)?;
    Ok(lp.gather(&ids, 1)?.mean_all()?.neg()?)
}

/// Enables flush-to-zero and denormals-are-zero for the calling thread.
/// Softmax tails of a trained model are full of subnormal floats, which
/// slow CPU arithmetic several-fold.
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    unsafe {
        let mut csr = 0u32;
        std::arch::asm!("stmxcsr [{p}]", p = in(reg) &mut csr as *mut u32);
        csr |= 0x8040;
        std::arch::asm!("ldmxcsr [{p}]", p = in(reg) &csr as *const u32);
    }
    #[cfg(target_arch = "aarch64")]
    unsafe {
        let mut fpcr: u64;
        std::arch::asm!("mrs {r}, fpcr", r = out(reg) fpcr);
        fpcr |= 1 << 24;
        std::arch::asm!("msr fpcr, {r}", r = in(reg) fpcr);
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Initializer;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Initializer::new(1).normal(&[3, 5, 7], 4.0).unwrap();
        let p = softmax_last(&x).unwrap();
        let sums = p.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn masked_attention_rows_sum_to_one_and_respect_mask() {
        let mut init = Initializer::new(2);
        let q = init.normal(&[1, 2, 6, 4], 1.0).unwrap();
        let k = init.normal(&[1, 2, 6, 4], 1.0).unwrap();
        let mask = causal_mask(6, 6, 0, DType::F32).unwrap();
        let p = attention_probs(&q, &k, Some(&mask)).unwrap();
        let rows = p.reshape((12, 6)).unwrap().to_vec2::<f32>().unwrap();
        for (r, row) in rows.iter().enumerate() {
            let i = r % 6;
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row[i + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn layer_norm_of_zero_is_beta() {
        let ln = LayerNorm {
            gamma: Tensor::ones(4, DType::F32, &Device::Cpu).unwrap(),
            beta: Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap(),
        };
        let y = ln.forward(&Tensor::zeros((2, 4), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = Initializer::new(4).normal(&[4, 9], 3.0).unwrap().to_dtype(DType::F64).unwrap();
        let a = log_softmax_last(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = softmax_last(&x).unwrap().log().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
