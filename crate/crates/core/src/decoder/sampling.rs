//! Autoregressive decoding with a per-layer key/value cache.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BaseDecoder, SelfAttentionHook, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{attention_probs, merge_heads, split_heads};

/// Default code rate of sampled sequences.
pub const DEFAULT_RATE_HZ: f64 = 50.0;

/// Head-split self-attention keys and values for every layer, preallocated
/// to the full generation length.
pub struct DecodeCache {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    len: usize,
    capacity: usize,
}

impl DecodeCache {
    pub fn new(model: &BaseDecoder, batch: usize, capacity: usize) -> Result<Self> {
        let cfg = &model.config;
        let shape = (batch, cfg.n_heads, capacity, cfg.d_model / cfg.n_heads);
        let alloc = || Tensor::zeros(shape, model.dtype(), &Device::Cpu);
        Ok(Self {
            keys: (0..cfg.n_layers).map(|_| alloc()).collect::<candle_core::Result<_>>()?,
            values: (0..cfg.n_layers).map(|_| alloc()).collect::<candle_core::Result<_>>()?,
            len: 0,
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl BaseDecoder {
    /// Advances every row of the batch by one position and returns the
    /// next-token logits `(B, K_v)`.
    pub fn step(
        &self,
        cache: &mut DecodeCache,
        input_ids: &[u32],
        memory_kv: &[(Tensor, Tensor)],
        hook: Option<&dyn SelfAttentionHook>,
    ) -> Result<Tensor> {
        let pos = cache.len;
        if pos >= cache.capacity {
            return Err(Error::Input(format!("decode cache full at {pos} positions")));
        }
        let rows: Vec<Vec<u32>> = input_ids.iter().map(|&id| vec![id]).collect();
        let mut h = self.embed_inputs(&rows, &vec![pos; rows.len()])?;
        let heads = self.config.n_heads;
        for (l, layer) in self.layers.iter().enumerate() {
            let x = layer.self_norm.forward(&h)?;
            let q = layer.self_attn.q.forward(&x)?;
            let k = split_heads(&layer.self_attn.k.forward(&x)?, heads)?;
            let v = split_heads(&layer.self_attn.v.forward(&x)?, heads)?;
            cache.keys[l].slice_set(&k, 2, pos)?;
            cache.values[l].slice_set(&v, 2, pos)?;
            let keys = cache.keys[l].narrow(2, 0, pos + 1)?;
            let values = cache.values[l].narrow(2, 0, pos + 1)?;
            let p = attention_probs(&split_heads(&q, heads)?, &keys, None)?;
            let s = layer.self_attn.o.forward(&merge_heads(&p.matmul(&values.contiguous()?)?)?)?;
            let update = match hook {
                Some(hook) => hook.update(l, pos..pos + 1, &q, &s)?,
                None => s,
            };
            h = layer.cross_and_ffn(&(h + update)?, &memory_kv[l])?;
        }
        cache.len += 1;
        Ok(self.logits(&h)?.squeeze(1)?)
    }
}

/// Draws one code from a row of logits. Temperature 0 selects the first
/// maximum.
fn draw(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let argmax = || {
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0 as u32
    };
    if temperature == 0.0 {
        return argmax();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    argmax()
}

/// Samples one sequence per `(caption, seed)` pair, all of length `length`.
pub fn sample_batch(
    model: &BaseDecoder,
    captions: &[u32],
    seeds: &[u64],
    length: usize,
    temperature: f64,
    hook: Option<&dyn SelfAttentionHook>,
) -> Result<Vec<TokenSequence>> {
    crate::nn::flush_denormals();
    if length == 0 {
        return Err(Error::Input("sample length must be at least 1".into()));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Input(format!("temperature must be finite and >= 0, got {temperature}")));
    }
    if captions.len() != seeds.len() || captions.is_empty() {
        return Err(Error::Input("need one seed per caption".into()));
    }
    let b = captions.len();
    let memory_kv = model.memory_kv(captions)?;
    let mut cache = DecodeCache::new(model, b, length)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut codes = vec![Vec::with_capacity(length); b];
    let mut inputs = vec![model.start_id(); b];
    for _ in 0..length {
        let logits = model.step(&mut cache, &inputs, &memory_kv, hook)?;
        let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for (r, row) in rows.iter().enumerate() {
            let c = draw(row, temperature, &mut rngs[r]);
            codes[r].push(c);
            inputs[r] = c;
        }
    }
    Ok(codes.into_iter().map(|c| TokenSequence::new(c, DEFAULT_RATE_HZ)).collect())
}

pub fn sample(model: &BaseDecoder, caption: u32, length: usize, temperature: f64, seed: u64) -> Result<TokenSequence> {
    Ok(sample_batch(model, &[caption], &[seed], length, temperature, None)?.remove(0))
}

/// Mean log-probability the model assigns to `codes`, useful for checking
/// that the cached path agrees with teacher forcing.
pub fn sequence_log_prob(model: &BaseDecoder, codes: &[u32], caption: u32) -> Result<f64> {
    let logits = model.forward_batch(&[codes], &[caption], None)?.squeeze(0)?;
    let lp = crate::nn::log_softmax_last(&logits.to_dtype(DType::F64)?)?;
    let ids = Tensor::from_slice(codes, (codes.len(), 1), &Device::Cpu)?;
    Ok(lp.gather(&ids, D::Minus1)?.mean_all()?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::tests::tiny_config;

    fn model(dtype: DType) -> BaseDecoder {
        let cfg = tiny_config();
        let store = BaseDecoder::init_params(&cfg, 5).unwrap().to_dtype(dtype).unwrap();
        BaseDecoder::load(cfg, &store).unwrap()
    }

    #[test]
    fn cached_logits_match_full_forward() {
        let m = model(DType::F64);
        let codes: Vec<u32> = vec![4, 0, 7, 1, 1, 9, 2];
        let full = m.forward_batch(&[&codes], &[1], None).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let kv = m.memory_kv(&[1]).unwrap();
        let mut cache = DecodeCache::new(&m, 1, codes.len()).unwrap();
        let inputs = m.shifted_inputs(&codes);
        for (t, &id) in inputs.iter().enumerate() {
            let step = m.step(&mut cache, &[id], &kv, None).unwrap().to_vec2::<f64>().unwrap();
            for (a, b) in step[0].iter().zip(&full[t]) {
                assert!((a - b).abs() < 1e-10, "position {t}");
            }
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = model(DType::F32);
        let a = sample(&m, 0, 20, 0.0, 1).unwrap();
        let b = sample(&m, 0, 20, 0.0, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
    }

    #[test]
    fn length_500_is_ten_seconds() {
        let m = model(DType::F32);
        let s = sample(&m, 1, 500, 1.0, 3).unwrap();
        assert_eq!(s.len(), 500);
        assert!((s.duration_s() - 10.0).abs() < 1e-12);
        assert!(s.codes.iter().all(|&c| (c as usize) < 11));
    }

    #[test]
    fn seeds_control_sampling() {
        let m = model(DType::F32);
        let base = sample(&m, 0, 30, 1.0, 100).unwrap();
        assert_eq!(base, sample(&m, 0, 30, 1.0, 100).unwrap());
        let seeds: Vec<u64> = (0..20).map(|i| 1000 + i).collect();
        let others = sample_batch(&m, &[0; 20], &seeds, 30, 1.0, None).unwrap();
        let differing = others.iter().filter(|s| **s != base).count();
        assert!(differing >= 19, "{differing} of 20 seeds differ");
    }

    #[test]
    fn batch_rows_match_single_samples() {
        let m = model(DType::F64);
        let batch = sample_batch(&m, &[0, 1, 1], &[7, 8, 9], 15, 1.0, None).unwrap();
        for (i, (&c, &s)) in [0u32, 1, 1].iter().zip(&[7u64, 8, 9]).enumerate() {
            assert_eq!(batch[i], sample(&m, c, 15, 1.0, s).unwrap());
        }
    }

    #[test]
    fn sampled_sequences_have_finite_log_prob() {
        let m = model(DType::F32);
        let s = sample(&m, 0, 12, 1.0, 4).unwrap();
        assert!(sequence_log_prob(&m, &s.codes, 0).unwrap().is_finite());
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = model(DType::F32);
        assert!(sample(&m, 0, 0, 1.0, 0).is_err());
        assert!(sample(&m, 0, 5, -1.0, 0).is_err());
        assert!(sample(&m, 5, 5, 1.0, 0).is_err());
    }
}
