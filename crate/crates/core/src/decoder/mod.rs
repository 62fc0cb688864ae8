//! Frozen text-conditioned token decoder: a pre-norm transformer with causal
//! self-attention, cross-attention to a per-caption prompt sequence and a
//! feed-forward block per layer.
//!
//! Position `t` of the input holds the code at `t - 1` (a dedicated start
//! vector at `t = 0`), so the logits at position `t` predict code `t`.

mod pretrain;
mod sampling;

use std::ops::Range;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataio::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, gelu, multi_head_attention, sinusoidal_positions, LayerNorm, Linear};
use crate::params::{ones, zeros, Initializer, ParamStore};

pub use pretrain::{corpus_cross_entropy, pretrain_base, unigram_entropy, PretrainExample, PretrainOutcome, PretrainSettings};
pub use sampling::{sample, sample_batch, sequence_log_prob, DecodeCache, DEFAULT_RATE_HZ};

/// Reserved code marking a beat frame.
pub const MARKER_CODE: u32 = 0;
/// Reserved code for frames without a new event.
pub const SUSTAIN_CODE: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub n_captions: usize,
}

impl DecoderConfig {
    /// Scalar count of every base parameter, from shapes alone.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 3 * 2 * d + 8 * (d * d + d) + (d * self.ffn_dim + self.ffn_dim) + (self.ffn_dim * d + d);
        (self.vocab_size + 1) * d
            + self.n_captions * self.prompt_len * d
            + self.n_layers * per_layer
            + 2 * d
            + d * self.vocab_size
            + self.vocab_size
    }
}

impl From<&RunConfig> for DecoderConfig {
    fn from(c: &RunConfig) -> Self {
        Self {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            ffn_dim: c.ffn_dim,
            vocab_size: c.vocab_size,
            prompt_len: c.prompt_len,
            n_captions: c.n_captions,
        }
    }
}

/// A sequence of music codes at a fixed code rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub codes: Vec<u32>,
    pub rate_hz: f64,
    pub beat_frames: Option<Vec<usize>>,
}

impl TokenSequence {
    pub fn new(codes: Vec<u32>, rate_hz: f64) -> Self {
        Self {
            codes,
            rate_hz,
            beat_frames: None,
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.codes.len() as f64 / self.rate_hz
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some((i, c)) = self.codes.iter().enumerate().find(|(_, &c)| c as usize >= vocab_size) {
            return Err(Error::Input(format!("code {c} at position {i} outside [0, {vocab_size})")));
        }
        if let Some(beats) = &self.beat_frames {
            if beats.windows(2).any(|w| w[0] >= w[1]) || beats.last().is_some_and(|&b| b >= self.codes.len()) {
                return Err(Error::Input("beat frame indices must be strictly increasing and < T".into()));
            }
        }
        Ok(())
    }
}

/// Query/key/value/output projections of one attention sublayer.
#[derive(Debug, Clone)]
pub struct AttentionProjections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionProjections {
    fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            q: Linear::load(store, &format!("{prefix}.q"))?,
            k: Linear::load(store, &format!("{prefix}.k"))?,
            v: Linear::load(store, &format!("{prefix}.v"))?,
            o: Linear::load(store, &format!("{prefix}.o"))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: AttentionProjections,
    pub cross_norm: LayerNorm,
    pub cross_attn: AttentionProjections,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub n_heads: usize,
}

/// Output of a layer's causal self-attention sublayer.
pub struct SelfAttentionOutput {
    /// Query projection `Q_l` of the normalised hidden states, `(B, T, d)`.
    pub q: Tensor,
    /// Attention output after the output projection, `(B, T, d)`.
    pub s: Tensor,
}

impl DecoderLayer {
    fn load(store: &ParamStore, prefix: &str, n_heads: usize) -> Result<Self> {
        Ok(Self {
            self_norm: LayerNorm::load(store, &format!("{prefix}.self_norm"))?,
            self_attn: AttentionProjections::load(store, &format!("{prefix}.self_attn"))?,
            cross_norm: LayerNorm::load(store, &format!("{prefix}.cross_norm"))?,
            cross_attn: AttentionProjections::load(store, &format!("{prefix}.cross_attn"))?,
            ffn_norm: LayerNorm::load(store, &format!("{prefix}.ffn_norm"))?,
            ffn_in: Linear::load(store, &format!("{prefix}.ffn_in"))?,
            ffn_out: Linear::load(store, &format!("{prefix}.ffn_out"))?,
            n_heads,
        })
    }

    /// Self-attention over the full token stream with an additive mask.
    pub fn self_attention(&self, h: &Tensor, mask: &Tensor) -> Result<SelfAttentionOutput> {
        let x = self.self_norm.forward(h)?;
        let q = self.self_attn.q.forward(&x)?;
        let k = self.self_attn.k.forward(&x)?;
        let v = self.self_attn.v.forward(&x)?;
        let a = multi_head_attention(&q, &k, &v, self.n_heads, Some(mask))?;
        Ok(SelfAttentionOutput {
            s: self.self_attn.o.forward(&a)?,
            q,
        })
    }

    /// Cross-attention to the prompt memory followed by the feed-forward
    /// block, both with residual connections.
    pub fn cross_and_ffn(&self, h: &Tensor, memory_kv: &(Tensor, Tensor)) -> Result<Tensor> {
        let x = self.cross_norm.forward(h)?;
        let q = self.cross_attn.q.forward(&x)?;
        let a = multi_head_attention(&q, &memory_kv.0, &memory_kv.1, self.n_heads, None)?;
        let h = (h + self.cross_attn.o.forward(&a)?)?;
        let x = self.ffn_norm.forward(&h)?;
        let y = self.ffn_out.forward(&gelu(&self.ffn_in.forward(&x)?)?)?;
        Ok((h + y)?)
    }

    /// Cross-attention keys and values for a `(B, P, d)` prompt memory.
    pub fn memory_kv(&self, memory: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.cross_attn.k.forward(memory)?, self.cross_attn.v.forward(memory)?))
    }
}

/// Hook that may replace the residual update of a layer's self-attention
/// sublayer. The base model uses the attention output `S_l` unchanged.
pub trait SelfAttentionHook {
    /// `positions` are the absolute token positions covered by `q` and `s`.
    fn update(&self, layer: usize, positions: Range<usize>, q: &Tensor, s: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct BaseDecoder {
    pub config: DecoderConfig,
    /// `(K_v + 1) x d`; the last row is the start vector.
    pub token_embed: Tensor,
    /// `n_captions x P x d` frozen prompt sequences.
    pub prompts: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl BaseDecoder {
    /// Seeded initial parameters.
    pub fn init_params(cfg: &DecoderConfig, seed: u64) -> Result<ParamStore> {
        let mut init = Initializer::new(seed);
        let d = cfg.d_model;
        let mut s = ParamStore::new();
        let linear = |s: &mut ParamStore, init: &mut Initializer, name: &str, i: usize, o: usize| -> Result<()> {
            s.insert(format!("{name}.weight"), init.fan_in(i, o)?);
            s.insert(format!("{name}.bias"), zeros(&[o])?);
            Ok(())
        };
        s.insert("token_embed", init.normal(&[cfg.vocab_size + 1, d], 1.0)?);
        s.insert("prompts", init.normal(&[cfg.n_captions, cfg.prompt_len, d], 1.0)?);
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            for norm in ["self_norm", "cross_norm", "ffn_norm"] {
                s.insert(format!("{p}.{norm}.gamma"), ones(&[d])?);
                s.insert(format!("{p}.{norm}.beta"), zeros(&[d])?);
            }
            for attn in ["self_attn", "cross_attn"] {
                for proj in ["q", "k", "v", "o"] {
                    linear(&mut s, &mut init, &format!("{p}.{attn}.{proj}"), d, d)?;
                }
            }
            linear(&mut s, &mut init, &format!("{p}.ffn_in"), d, cfg.ffn_dim)?;
            linear(&mut s, &mut init, &format!("{p}.ffn_out"), cfg.ffn_dim, d)?;
        }
        s.insert("final_norm.gamma", ones(&[d])?);
        s.insert("final_norm.beta", zeros(&[d])?);
        linear(&mut s, &mut init, "head", d, cfg.vocab_size)?;
        Ok(s)
    }

    pub fn load(cfg: DecoderConfig, store: &ParamStore) -> Result<Self> {
        if cfg.d_model % cfg.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                cfg.d_model, cfg.n_heads
            )));
        }
        let token_embed = store.get("token_embed")?.clone();
        if token_embed.dims() != [cfg.vocab_size + 1, cfg.d_model] {
            return Err(Error::Shape(format!(
                "token_embed has shape {:?}, config expects [{}, {}]",
                token_embed.dims(),
                cfg.vocab_size + 1,
                cfg.d_model
            )));
        }
        let layers = (0..cfg.n_layers)
            .map(|l| DecoderLayer::load(store, &format!("layers.{l}"), cfg.n_heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg,
            token_embed,
            prompts: store.get("prompts")?.clone(),
            layers,
            final_norm: LayerNorm::load(store, "final_norm")?,
            head: Linear::load(store, "head")?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.token_embed.dtype()
    }

    pub fn start_id(&self) -> u32 {
        self.config.vocab_size as u32
    }

    fn check_caption(&self, caption: u32) -> Result<()> {
        if caption as usize >= self.config.n_captions {
            return Err(Error::Input(format!(
                "unknown caption id {caption} (model has {})",
                self.config.n_captions
            )));
        }
        Ok(())
    }

    /// Prompt memory `(B, P, d)` for a batch of caption ids.
    pub fn memory(&self, captions: &[u32]) -> Result<Tensor> {
        for &c in captions {
            self.check_caption(c)?;
        }
        let ids = Tensor::from_slice(captions, captions.len(), &Device::Cpu)?;
        Ok(self.prompts.index_select(&ids, 0)?)
    }

    /// Per-layer cross-attention keys and values for the prompt memory.
    pub fn memory_kv(&self, captions: &[u32]) -> Result<Vec<(Tensor, Tensor)>> {
        let memory = self.memory(captions)?;
        self.layers.iter().map(|l| l.memory_kv(&memory)).collect()
    }

    /// Embeds input ids `(B, T)` (already shifted) at absolute positions
    /// `starts[b]..starts[b] + T`.
    pub fn embed_inputs(&self, input_ids: &[Vec<u32>], starts: &[usize]) -> Result<Tensor> {
        let b = input_ids.len();
        let t = input_ids.first().map_or(0, Vec::len);
        if t == 0 || input_ids.iter().any(|r| r.len() != t) {
            return Err(Error::Input("token batch must be non-empty and rectangular".into()));
        }
        let flat: Vec<u32> = input_ids.concat();
        let ids = Tensor::from_vec(flat, b * t, &Device::Cpu)?;
        let emb = self.token_embed.index_select(&ids, 0)?.reshape((b, t, self.config.d_model))?;
        let pos = starts
            .iter()
            .map(|&s| sinusoidal_positions(s, t, self.config.d_model, self.dtype()))
            .collect::<Result<Vec<_>>>()?;
        Ok((emb + Tensor::stack(&pos, 0)?)?)
    }

    /// Teacher-forcing inputs for a full sequence: start id then all codes
    /// but the last.
    pub fn shifted_inputs(&self, codes: &[u32]) -> Vec<u32> {
        std::iter::once(self.start_id())
            .chain(codes.iter().take(codes.len().saturating_sub(1)).copied())
            .collect()
    }

    fn check_codes(&self, codes: &[u32]) -> Result<()> {
        if codes.is_empty() {
            return Err(Error::Input("token sequence is empty".into()));
        }
        TokenSequence::new(codes.to_vec(), 1.0).validate(self.config.vocab_size)
    }

    /// Runs layers `range` on hidden states `h`, optionally routing each
    /// layer's self-attention update through `hook`.
    pub fn run_layers(
        &self,
        mut h: Tensor,
        range: Range<usize>,
        memory_kv: &[(Tensor, Tensor)],
        hook: Option<&dyn SelfAttentionHook>,
    ) -> Result<Tensor> {
        let t = h.dim(1)?;
        let mask = causal_mask(t, t, 0, self.dtype())?;
        for l in range {
            let layer = &self.layers[l];
            let out = layer.self_attention(&h, &mask)?;
            let update = match hook {
                Some(hook) => hook.update(l, 0..t, &out.q, &out.s)?,
                None => out.s,
            };
            h = layer.cross_and_ffn(&(h + update)?, &memory_kv[l])?;
        }
        Ok(h)
    }

    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.final_norm.forward(h)?)
    }

    /// Batched teacher-forced logits `(B, T, K_v)`.
    pub fn forward_batch(
        &self,
        codes: &[&[u32]],
        captions: &[u32],
        hook: Option<&dyn SelfAttentionHook>,
    ) -> Result<Tensor> {
        if codes.len() != captions.len() || codes.is_empty() {
            return Err(Error::Input("need one caption per sequence".into()));
        }
        for c in codes {
            self.check_codes(c)?;
        }
        let inputs: Vec<Vec<u32>> = codes.iter().map(|c| self.shifted_inputs(c)).collect();
        self.forward_inputs(&inputs, &vec![0; codes.len()], captions, hook)
    }

    /// Logits for already shifted inputs placed at absolute positions
    /// `starts[b]..`.
    pub fn forward_inputs(
        &self,
        inputs: &[Vec<u32>],
        starts: &[usize],
        captions: &[u32],
        hook: Option<&dyn SelfAttentionHook>,
    ) -> Result<Tensor> {
        let h = self.embed_inputs(inputs, starts)?;
        let kv = self.memory_kv(captions)?;
        let h = self.run_layers(h, 0..self.layers.len(), &kv, hook)?;
        self.logits(&h)
    }

    /// Teacher-forced next-token logits `T x K_v` for one sequence.
    pub fn base_forward(&self, tokens: &TokenSequence, caption: u32) -> Result<Tensor> {
        Ok(self.forward_batch(&[&tokens.codes], &[caption], None)?.squeeze(0)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.config.parameter_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> DecoderConfig {
        DecoderConfig {
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            ffn_dim: 32,
            vocab_size: 11,
            prompt_len: 3,
            n_captions: 2,
        }
    }

    fn tiny(dtype: DType) -> BaseDecoder {
        let cfg = tiny_config();
        let store = BaseDecoder::init_params(&cfg, 1).unwrap().to_dtype(dtype).unwrap();
        BaseDecoder::load(cfg, &store).unwrap()
    }

    #[test]
    fn single_token_shape() {
        let m = tiny(DType::F32);
        let logits = m.base_forward(&TokenSequence::new(vec![3], 50.0), 0).unwrap();
        assert_eq!(logits.dims(), &[1, 11]);
    }

    #[test]
    fn parameter_count_matches_store() {
        let cfg = tiny_config();
        let store = BaseDecoder::init_params(&cfg, 1).unwrap();
        let m = BaseDecoder::load(cfg, &store).unwrap();
        assert_eq!(m.parameter_count(), store.element_count());
    }

    #[test]
    fn invalid_inputs_rejected() {
        let m = tiny(DType::F32);
        assert!(matches!(m.base_forward(&TokenSequence::new(vec![11], 50.0), 0), Err(Error::Input(_))));
        assert!(matches!(m.base_forward(&TokenSequence::new(vec![1], 50.0), 2), Err(Error::Input(_))));
        assert!(matches!(m.base_forward(&TokenSequence::new(vec![], 50.0), 0), Err(Error::Input(_))));
    }

    #[test]
    fn causal_in_64_bit() {
        let m = tiny(DType::F64);
        let codes: Vec<u32> = vec![0, 5, 2, 9, 1, 7, 3, 3];
        let base = m.base_forward(&TokenSequence::new(codes.clone(), 50.0), 1).unwrap().to_vec2::<f64>().unwrap();
        for t in 0..codes.len() {
            let mut changed = codes.clone();
            changed[t] = (changed[t] + 4) % 11;
            let other = m.base_forward(&TokenSequence::new(changed, 50.0), 1).unwrap().to_vec2::<f64>().unwrap();
            for p in 0..codes.len() {
                let same = base[p] == other[p];
                // logits at p read codes < p only
                assert_eq!(same, p <= t, "token {t}, position {p}");
            }
        }
    }

    #[test]
    fn captions_change_logits() {
        let m = tiny(DType::F32);
        let tokens = TokenSequence::new(vec![0, 1, 2, 3], 50.0);
        let a = m.base_forward(&tokens, 0).unwrap();
        let b = m.base_forward(&tokens, 1).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 1e-4);
    }

    #[test]
    fn batch_rows_match_single_sequences() {
        let m = tiny(DType::F64);
        let a: Vec<u32> = vec![1, 2, 3, 4, 5];
        let b: Vec<u32> = vec![5, 4, 3, 2, 1];
        let batch = m.forward_batch(&[&a, &b], &[0, 1], None).unwrap();
        let single = m.base_forward(&TokenSequence::new(b.clone(), 50.0), 1).unwrap();
        let diff = (batch.get(1).unwrap() - single).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }
}
