//! Pretraining of the stand-in decoder on caption/token pairs. The result
//! is frozen for every later stage.

use candle_core::DType;
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BaseDecoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::nn::cross_entropy;
use crate::optim::{Adam, AdamConfig, Gradients};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct PretrainExample {
    pub codes: Vec<u32>,
    pub caption: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub crop_len: usize,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

pub struct PretrainOutcome {
    pub params: ParamStore,
    pub freeze_hash: String,
    pub losses: Vec<f64>,
    /// Teacher-forced cross-entropy over every full example after training.
    pub final_ce: f64,
    /// Entropy of the empirical code distribution, in nats.
    pub unigram_entropy: f64,
}

/// Entropy of the pooled code histogram.
pub fn unigram_entropy(examples: &[PretrainExample], vocab: usize) -> f64 {
    let mut counts = vec![0usize; vocab];
    let mut total = 0usize;
    for e in examples {
        for &c in &e.codes {
            counts[c as usize] += 1;
            total += 1;
        }
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Mean teacher-forced cross-entropy per example, averaged over examples.
pub fn corpus_cross_entropy(model: &BaseDecoder, examples: &[PretrainExample]) -> Result<f64> {
    let mut total = 0.0;
    for e in examples {
        let logits = model.forward_batch(&[&e.codes], &[e.caption], None)?;
        total += cross_entropy(&logits.to_dtype(DType::F64)?, &e.codes)?.to_scalar::<f64>()?;
    }
    Ok(total / examples.len() as f64)
}

/// Trains freshly initialised decoder weights on random crops of the
/// examples. Crops keep their absolute positions, so the model sees the
/// same position encodings it will see on full clips.
pub fn pretrain_base(
    examples: &[PretrainExample],
    cfg: &DecoderConfig,
    settings: PretrainSettings,
) -> Result<PretrainOutcome> {
    crate::nn::flush_denormals();
    if examples.is_empty() {
        return Err(Error::Input("pretraining needs at least one example".into()));
    }
    let init = BaseDecoder::init_params(cfg, settings.seed)?;
    let (store, vars) = init.to_vars()?;
    let model = BaseDecoder::load(*cfg, &store)?;
    for e in examples {
        model.memory(&[e.caption])?;
        super::TokenSequence::new(e.codes.clone(), 1.0).validate(cfg.vocab_size)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5eed_0001);
    let mut adam = Adam::new(AdamConfig::new(settings.learning_rate, settings.clip_norm));
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut inputs = Vec::with_capacity(settings.batch_size);
        let mut starts = Vec::with_capacity(settings.batch_size);
        let mut captions = Vec::with_capacity(settings.batch_size);
        let mut targets = Vec::new();
        let crop = settings
            .crop_len
            .min(examples.iter().map(|e| e.codes.len()).min().unwrap_or(1));
        for _ in 0..settings.batch_size {
            let e = &examples[rng.random_range(0..examples.len())];
            let start = rng.random_range(0..=e.codes.len() - crop);
            let mut input = Vec::with_capacity(crop);
            input.push(if start == 0 { model.start_id() } else { e.codes[start - 1] });
            input.extend_from_slice(&e.codes[start..start + crop - 1]);
            inputs.push(input);
            starts.push(start);
            captions.push(e.caption);
            targets.extend_from_slice(&e.codes[start..start + crop]);
        }
        let logits = model.forward_inputs(&inputs, &starts, &captions, None)?;
        let loss = cross_entropy(&logits, &targets)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("pretraining loss {value}"),
            });
        }
        let grads = loss.backward()?;
        let mut named = Gradients::new();
        for (name, var) in vars.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                named.insert(name.clone(), g.clone());
            }
        }
        adam.step(&vars, &named)?;
        losses.push(value);
        if step % 50 == 0 || step + 1 == settings.steps {
            info!("pretrain step {step}: loss {value:.4}");
        }
    }
    let params = vars.snapshot()?;
    let frozen = BaseDecoder::load(*cfg, &params)?;
    let final_ce = corpus_cross_entropy(&frozen, examples)?;
    Ok(PretrainOutcome {
        freeze_hash: params.content_hash()?,
        params,
        losses,
        final_ce,
        unigram_entropy: unigram_entropy(examples, cfg.vocab_size),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::tests::tiny_config;

    fn examples() -> Vec<PretrainExample> {
        (0..4)
            .map(|i| PretrainExample {
                codes: (0..24).map(|t| if t % 4 == 0 { 0 } else { 2 + (i + t) as u32 % 3 }).collect(),
                caption: i as u32 % 2,
            })
            .collect()
    }

    fn settings(steps: usize, seed: u64) -> PretrainSettings {
        PretrainSettings {
            steps,
            batch_size: 2,
            crop_len: 12,
            learning_rate: 1e-2,
            clip_norm: Some(1.0),
            seed,
        }
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let cfg = tiny_config();
        let out = pretrain_base(&examples(), &cfg, settings(0, 3)).unwrap();
        let init = BaseDecoder::init_params(&cfg, 3).unwrap();
        assert_eq!(out.freeze_hash, init.content_hash().unwrap());
        assert!(out.losses.is_empty());
    }

    #[test]
    fn training_beats_uniform_and_is_deterministic() {
        let cfg = tiny_config();
        let a = pretrain_base(&examples(), &cfg, settings(60, 9)).unwrap();
        let b = pretrain_base(&examples(), &cfg, settings(60, 9)).unwrap();
        assert_eq!(a.freeze_hash, b.freeze_hash);
        assert!(a.final_ce < (cfg.vocab_size as f64).ln(), "{}", a.final_ce);
    }

    #[test]
    fn unigram_entropy_of_uniform_pair() {
        let e = vec![PretrainExample {
            codes: vec![0, 1, 0, 1],
            caption: 0,
        }];
        assert!((unigram_entropy(&e, 4) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(pretrain_base(&[], &tiny_config(), settings(1, 0)).is_err());
    }
}
