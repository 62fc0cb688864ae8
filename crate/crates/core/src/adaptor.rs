//! Condition-prefix adapter for the last `L` decoder layers.
//!
//! A prefix stream of `T` positions starts from learnable inputs `H_p0` and
//! runs through the frozen self-attention of each adapted layer with the
//! joint embedding `Z` added at every layer. It never reads the token
//! stream. Token queries attend to the prefix keys and values through a
//! fused query, and the result enters the residual update scaled by a
//! per-layer gate that starts at zero.

use std::ops::Range;

use candle_core::{DType, Device, Tensor};

use crate::dataio::RunConfig;
use crate::decoder::{sample_batch, BaseDecoder, DecoderLayer, SelfAttentionHook, TokenSequence};
use crate::encoder::{ConditionEncoder, JointEmbedding};
use crate::error::{Error, Result};
use crate::nn::multi_head_attention;
use crate::params::{Initializer, ParamStore};

pub const PREFIX_INPUTS: &str = "prefix_inputs";
pub const GATES: &str = "gates";

/// Trainable adapter tensors: `H_p0`, the gates and the encoder weights.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    /// `T_max x d`
    pub prefix_inputs: Tensor,
    /// One gate per adapted layer.
    pub gates: Tensor,
    pub encoder: ConditionEncoder,
}

impl AdapterParams {
    /// Seeded initial values: `H_p0 ~ N(0, 0.02^2)`, gates exactly 0.
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<ParamStore> {
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        store.insert(PREFIX_INPUTS, init.normal(&[cfg.max_prefix_len, cfg.d_model], 0.02)?);
        store.insert(GATES, Tensor::zeros(cfg.adapted_layers, DType::F32, &Device::Cpu)?);
        ConditionEncoder::init_params(
            &mut store,
            &mut init,
            cfg.face_dim,
            cfg.motion_dim,
            cfg.face_rank,
            cfg.motion_rank,
            cfg.d_model,
            cfg.max_prefix_len,
        )?;
        Ok(store)
    }

    pub fn load(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            prefix_inputs: store.get(PREFIX_INPUTS)?.clone(),
            gates: store.get(GATES)?.clone(),
            encoder: ConditionEncoder::load(store)?,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.gates.dims()[0]
    }

    pub fn max_len(&self) -> usize {
        self.prefix_inputs.dims()[0]
    }

    pub fn gate_values(&self) -> Result<Vec<f64>> {
        Ok(self.gates.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

/// Prefix queries, keys and values of one adapted layer, each `(B, T, d)`.
#[derive(Debug, Clone)]
pub struct PrefixProjections {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Frozen QKV projections of `LN(H_p + Z)`.
pub fn prefix_projections(layer: &DecoderLayer, hp: &Tensor, z: &Tensor) -> Result<PrefixProjections> {
    if hp.dims() != z.dims() {
        return Err(Error::Shape(format!(
            "prefix states {:?} and joint embedding {:?} differ in shape",
            hp.dims(),
            z.dims()
        )));
    }
    let x = layer.self_norm.forward(&(hp + z)?)?;
    Ok(PrefixProjections {
        q: layer.self_attn.q.forward(&x)?,
        k: layer.self_attn.k.forward(&x)?,
        v: layer.self_attn.v.forward(&x)?,
    })
}

/// One prefix layer: unmasked self-attention among prefix positions only,
/// with a residual connection on `H_p`. There is no cross-attention and no
/// feed-forward block on this path.
pub fn prefix_step(layer: &DecoderLayer, hp: &Tensor, z: &Tensor) -> Result<Tensor> {
    let p = prefix_projections(layer, hp, z)?;
    prefix_advance(layer, hp, &p)
}

fn prefix_advance(layer: &DecoderLayer, hp: &Tensor, p: &PrefixProjections) -> Result<Tensor> {
    let a = multi_head_attention(&p.q, &p.k, &p.v, layer.n_heads, None)?;
    Ok((hp + layer.self_attn.o.forward(&a)?)?)
}

/// `Attention(Q + Q_p, K_p, V_p)` without a mask, before any output
/// projection.
pub fn fused_attention(q: &Tensor, qp: &Tensor, kp: &Tensor, vp: &Tensor, heads: usize) -> Result<Tensor> {
    if q.dims() != qp.dims() || kp.dims() != vp.dims() {
        return Err(Error::Shape(format!(
            "fused attention shapes: q {:?}, q_p {:?}, k_p {:?}, v_p {:?}",
            q.dims(),
            qp.dims(),
            kp.dims(),
            vp.dims()
        )));
    }
    multi_head_attention(&(q + qp)?, kp, vp, heads, None)
}

/// `S + g * S'` with a scalar (one-element) gate.
pub fn gated_combine(s: &Tensor, s_prime: &Tensor, gate: &Tensor) -> Result<Tensor> {
    Ok((s + s_prime.broadcast_mul(gate)?)?)
}

/// The adapter's view of one batch: prefix projections for every adapted
/// layer plus the gates. Implements the decoder's self-attention hook.
pub struct PrefixHook<'a> {
    base: &'a BaseDecoder,
    gates: Tensor,
    first_layer: usize,
    layers: Vec<PrefixProjections>,
}

impl<'a> PrefixHook<'a> {
    /// Runs the prefix stream for joint embeddings `z` of shape `(B, T, d)`.
    pub fn new(base: &'a BaseDecoder, adapter: &AdapterParams, z: &Tensor) -> Result<Self> {
        let (b, t, d) = z.dims3()?;
        let n = base.layers.len();
        let l = adapter.n_layers();
        if l == 0 || l > n {
            return Err(Error::Config(format!("adapter has {l} gates for a {n}-layer decoder")));
        }
        if t > adapter.max_len() {
            return Err(Error::Conditioning(format!(
                "{t} conditioning frames exceed the prefix capacity {}",
                adapter.max_len()
            )));
        }
        if d != base.config.d_model {
            return Err(Error::Conditioning(format!(
                "joint embedding width {d} does not match model width {}",
                base.config.d_model
            )));
        }
        let first_layer = n - l;
        let mut hp = adapter.prefix_inputs.narrow(0, 0, t)?.unsqueeze(0)?.broadcast_as((b, t, d))?.contiguous()?;
        let mut layers = Vec::with_capacity(l);
        for (i, layer) in base.layers[first_layer..].iter().enumerate() {
            let p = prefix_projections(layer, &hp, z)?;
            if i + 1 < l {
                hp = prefix_advance(layer, &hp, &p)?;
            }
            layers.push(p);
        }
        Ok(Self {
            base,
            gates: adapter.gates.clone(),
            first_layer,
            layers,
        })
    }

    pub fn first_layer(&self) -> usize {
        self.first_layer
    }

    pub fn prefix_len(&self) -> usize {
        self.layers[0].q.dims()[1]
    }

    /// The gated-in term `S'` of layer `layer` for token queries `q`.
    pub fn prefix_attention(&self, layer: usize, positions: Range<usize>, q: &Tensor) -> Result<Tensor> {
        let p = &self.layers[layer - self.first_layer];
        let qp = p.q.narrow(1, positions.start, positions.len())?;
        let frozen = &self.base.layers[layer];
        let a = fused_attention(q, &qp, &p.k, &p.v, frozen.n_heads)?;
        frozen.self_attn.o.forward(&a)
    }
}

impl SelfAttentionHook for PrefixHook<'_> {
    fn update(&self, layer: usize, positions: Range<usize>, q: &Tensor, s: &Tensor) -> Result<Tensor> {
        if layer < self.first_layer {
            return Ok(s.clone());
        }
        if positions.end > self.prefix_len() {
            return Err(Error::Conditioning(format!(
                "token position {} has no conditioning frame (prefix length {})",
                positions.end - 1,
                self.prefix_len()
            )));
        }
        let s_prime = self.prefix_attention(layer, positions, q)?;
        let gate = self.gates.narrow(0, layer - self.first_layer, 1)?;
        gated_combine(s, &s_prime, &gate)
    }
}

/// Teacher-forced logits `T x K_v` of the adapted model.
pub fn adapted_forward(
    base: &BaseDecoder,
    adapter: &AdapterParams,
    tokens: &TokenSequence,
    caption: u32,
    z: &JointEmbedding,
) -> Result<Tensor> {
    if z.len() != tokens.len() {
        return Err(Error::Conditioning(format!(
            "joint embedding has {} frames for {} tokens",
            z.len(),
            tokens.len()
        )));
    }
    let hook = PrefixHook::new(base, adapter, &z.z.unsqueeze(0)?)?;
    Ok(base.forward_batch(&[&tokens.codes], &[caption], Some(&hook))?.squeeze(0)?)
}

/// Samples one sequence per seed under a single conditioning stream. The
/// output length equals the number of joint-embedding frames.
pub fn sample_adapted(
    base: &BaseDecoder,
    adapter: &AdapterParams,
    z: &JointEmbedding,
    caption: u32,
    seeds: &[u64],
    temperature: f64,
) -> Result<Vec<TokenSequence>> {
    if seeds.is_empty() {
        return Err(Error::Input("need at least one seed".into()));
    }
    let t = z.len();
    let stacked = z.z.unsqueeze(0)?.broadcast_as((seeds.len(), t, z.z.dims()[1]))?.contiguous()?;
    let hook = PrefixHook::new(base, adapter, &stacked)?;
    let captions = vec![caption; seeds.len()];
    sample_batch(base, &captions, seeds, t, temperature, Some(&hook))
}
