//! Adapter optimisation against the frozen decoder, parameter budgeting,
//! checkpoints and finite-difference gradient checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptor::{AdapterParams, PrefixHook, GATES};
use crate::alignment::{flatten_context, ContextFeatures, FeatureSequence, SourceTag};
use crate::dataio::{read_tensor, ClipManifestEntry, ConditionMode, Manifest, MotionSource, RunConfig, TensorFile};
use crate::decoder::{BaseDecoder, DecoderConfig, TokenSequence};
use crate::encoder::{align_clip, AlignedClip, FlowEmbedder, FLOW_EMBED_DIM};
use crate::error::{Error, Result};
use crate::nn;
use crate::optim::{Adam, AdamConfig, Gradients};
use crate::params::ParamStore;

/// Mean next-token cross-entropy of `T x K_v` logits against `targets`.
/// Returns a differentiable scalar.
pub fn cross_entropy(logits: &Tensor, targets: &TokenSequence) -> Result<Tensor> {
    let rows = logits.dims().first().copied().unwrap_or(0);
    if logits.rank() != 2 || rows != targets.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} targets",
            logits.dims(),
            targets.len()
        )));
    }
    nn::cross_entropy(logits, &targets.codes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBudgetReport {
    pub trainable_count: usize,
    pub frozen_count: usize,
    pub fraction: f64,
}

impl ParamBudgetReport {
    pub fn new(trainable_count: usize, frozen_count: usize) -> Self {
        Self {
            trainable_count,
            frozen_count,
            fraction: trainable_count as f64 / (trainable_count + frozen_count) as f64,
        }
    }

    /// Counts from configured shapes alone.
    pub fn from_config(cfg: &RunConfig) -> Self {
        let r = cfg.face_rank + cfg.motion_rank;
        let trainable = cfg.max_prefix_len * cfg.d_model
            + cfg.adapted_layers
            + cfg.face_dim * cfg.face_rank
            + cfg.motion_dim * cfg.motion_rank
            + r * cfg.d_model
            + cfg.max_prefix_len * r;
        Self::new(trainable, DecoderConfig::from(cfg).parameter_count())
    }
}

impl std::fmt::Display for ParamBudgetReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "trainable {} / frozen {} params, trainable fraction {:.4}",
            self.trainable_count, self.frozen_count, self.fraction
        )
    }
}

/// One clip ready for training or generation: targets plus visual streams
/// already resampled to the code rate.
#[derive(Debug, Clone)]
pub struct TrainingClip {
    pub clip_id: String,
    pub caption: u32,
    pub tokens: TokenSequence,
    pub aligned: AlignedClip,
}

fn read_f32(path: &Path, rank: &[usize]) -> Result<(Vec<usize>, Vec<f32>)> {
    let tf: TensorFile = read_tensor(path)?;
    if !rank.contains(&tf.shape().len()) {
        return Err(Error::Input(format!(
            "{}: expected rank {:?}, found shape {:?}",
            path.display(),
            rank,
            tf.shape()
        )));
    }
    let values = tf
        .as_f32()
        .ok_or_else(|| Error::Input(format!("{}: expected f32 data", path.display())))?
        .to_vec();
    Ok((tf.shape().to_vec(), values))
}

/// Reads the motion branch of a clip as a code-rate-ready sequence.
pub fn motion_sequence(
    manifest: &Manifest,
    entry: &ClipManifestEntry,
    source: MotionSource,
    flow: &FlowEmbedder,
) -> Result<FeatureSequence> {
    match source {
        MotionSource::Context => {
            let path = manifest.resolve(&entry.motion_path);
            let (shape, values) = read_f32(&path, &[2, 3])?;
            let rate = shape[0] as f64 / entry.duration_s;
            if shape.len() == 2 {
                FeatureSequence::new(values, shape[0], shape[1], rate, SourceTag::MotionCtx)
            } else {
                flatten_context(&ContextFeatures {
                    values,
                    len: shape[0],
                    context: shape[1],
                    dim: shape[2],
                    rate_hz: rate,
                })
            }
        }
        MotionSource::Flow => {
            let reference = entry.flow_path.as_ref().ok_or_else(|| {
                Error::validation(&entry.clip_id, "flow_path", "motion source is flow but the clip has no flow file")
            })?;
            let path = manifest.resolve(reference);
            let (shape, values) = read_f32(&path, &[4])?;
            if shape[3] != 2 {
                return Err(Error::Input(format!("{}: flow fields need 2 channels", path.display())));
            }
            flow.embed_sequence(&values, shape[0], shape[1], shape[2], shape[0] as f64 / entry.duration_s)
        }
    }
}

pub fn read_tokens(path: &Path, rate_hz: f64) -> Result<TokenSequence> {
    let tf = read_tensor(path)?;
    let codes = match (tf.shape().len(), tf.as_i32()) {
        (1, Some(v)) => v,
        _ => return Err(Error::Input(format!("{}: tokens must be a rank-1 i32 tensor", path.display()))),
    };
    if let Some(c) = codes.iter().find(|&&c| c < 0) {
        return Err(Error::Input(format!("{}: negative code {c}", path.display())));
    }
    Ok(TokenSequence::new(codes.iter().map(|&c| c as u32).collect(), rate_hz))
}

pub fn write_tokens(path: &Path, tokens: &TokenSequence) -> Result<()> {
    let values = tokens.codes.iter().map(|&c| c as i32).collect();
    let tf = TensorFile::i32(vec![tokens.len()], values).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })?;
    crate::dataio::write_tensor(path, &tf)
}

/// The motion width the adapter expects for a configuration.
pub fn motion_width(cfg: &RunConfig) -> usize {
    match cfg.motion_source {
        MotionSource::Context => cfg.motion_dim,
        MotionSource::Flow => FLOW_EMBED_DIM,
    }
}

/// Reads one clip's visual streams and aligns them to the code rate,
/// keeping `round(duration * rate)` frames at most.
pub fn load_condition(manifest: &Manifest, entry: &ClipManifestEntry, cfg: &RunConfig, flow: &FlowEmbedder) -> Result<AlignedClip> {
    let (shape, values) = read_f32(&manifest.resolve(&entry.face_path), &[2])?;
    let face = FeatureSequence::new(values, shape[0], shape[1], shape[0] as f64 / entry.duration_s, SourceTag::Face)?;
    let motion = motion_sequence(manifest, entry, cfg.motion_source, flow)?;
    let aligned = align_clip(&face, &motion, cfg.code_rate_hz)?;
    let frames = (entry.duration_s * cfg.code_rate_hz).round() as usize;
    aligned.truncate(frames.min(aligned.len()))
}

/// Loads every manifest entry and aligns its visual streams to the tokens.
pub fn load_clips(manifest: &Manifest, cfg: &RunConfig) -> Result<Vec<TrainingClip>> {
    let flow = FlowEmbedder::seeded(cfg.seed)?;
    manifest
        .entries
        .iter()
        .map(|entry| {
            let aligned = load_condition(manifest, entry, cfg, &flow)?;
            let tokens = read_tokens(&manifest.resolve(&entry.token_path), cfg.code_rate_hz)?;
            if aligned.len() < tokens.len() {
                return Err(Error::Conditioning(format!(
                    "clip {}: {} aligned frames for {} tokens",
                    entry.clip_id,
                    aligned.len(),
                    tokens.len()
                )));
            }
            Ok(TrainingClip {
                clip_id: entry.clip_id.clone(),
                caption: entry.caption_id,
                aligned: aligned.truncate(tokens.len())?,
                tokens,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub base_hash: String,
    /// Mean batch loss per optimiser step, append-only.
    pub loss_history: Vec<f64>,
    pub gates: Vec<f64>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub adapter: ParamStore,
    pub budget: ParamBudgetReport,
    /// Cross-entropy over the training clips before the first step, where
    /// all gates are zero.
    pub initial_ce: f64,
    pub final_ce: f64,
    pub optimizer: Adam,
}

/// Frozen per-clip quantities: hidden states entering the first adapted
/// layer and the prompt keys and values of every layer.
struct FrozenPrefix {
    hidden: Tensor,
    memory_kv: Vec<(Tensor, Tensor)>,
}

fn frozen_prefix(base: &BaseDecoder, clip: &TrainingClip, first: usize) -> Result<FrozenPrefix> {
    let inputs = vec![base.shifted_inputs(&clip.tokens.codes)];
    let memory_kv = base.memory_kv(&[clip.caption])?;
    let h = base.embed_inputs(&inputs, &[0])?;
    let hidden = base.run_layers(h, 0..first, &memory_kv, None)?;
    Ok(FrozenPrefix { hidden, memory_kv })
}

fn clip_loss(
    base: &BaseDecoder,
    adapter: &AdapterParams,
    clip: &TrainingClip,
    frozen: &FrozenPrefix,
    mode: ConditionMode,
) -> Result<Tensor> {
    let z = adapter.encoder.encode_aligned(&clip.aligned, mode)?;
    let hook = PrefixHook::new(base, adapter, &z.z.unsqueeze(0)?)?;
    let h = base.run_layers(
        frozen.hidden.clone(),
        hook.first_layer()..base.layers.len(),
        &frozen.memory_kv,
        Some(&hook),
    )?;
    let logits = base.logits(&h)?.squeeze(0)?;
    cross_entropy(&logits, &clip.tokens)
}

/// Mean cross-entropy of the adapted model over `clips`.
pub fn evaluate_loss(base: &BaseDecoder, adapter: &AdapterParams, clips: &[TrainingClip], mode: ConditionMode) -> Result<f64> {
    let first = base.layers.len() - adapter.n_layers();
    let mut total = 0.0;
    for clip in clips {
        let frozen = frozen_prefix(base, clip, first)?;
        total += clip_loss(base, adapter, clip, &frozen, mode)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total / clips.len().max(1) as f64)
}

/// Trains the adapter on `clips`. Only the adapter tensors are variables;
/// the base parameters are hashed before and after and must not change.
pub fn train_adapter(
    clips: &[TrainingClip],
    base_params: &ParamStore,
    base_hash: &str,
    adapter_init: &ParamStore,
    cfg: &RunConfig,
) -> Result<TrainOutcome> {
    crate::nn::flush_denormals();
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Input("training needs at least one clip".into()));
    }
    let found = base_params.content_hash()?;
    if found != base_hash {
        return Err(Error::FreezeViolation {
            expected: base_hash.to_string(),
            found,
        });
    }
    let gates = adapter_init.values_f32(GATES)?;
    if gates.len() != cfg.adapted_layers {
        return Err(Error::Config(format!(
            "adapter has {} gates, config adapts {} layers",
            gates.len(),
            cfg.adapted_layers
        )));
    }
    let dtype = cfg.precision.dtype();
    let base = BaseDecoder::load(cfg.into(), &base_params.to_dtype(dtype)?)?;
    let (store, vars) = adapter_init.to_dtype(dtype)?.to_vars()?;
    let adapter = AdapterParams::load(&store)?;
    let clips: Vec<TrainingClip> = clips
        .iter()
        .map(|c| {
            Ok(TrainingClip {
                aligned: c.aligned.to_dtype(dtype)?,
                ..c.clone()
            })
        })
        .collect::<Result<_>>()?;
    let first = cfg.first_adapted_layer();
    let frozen: Vec<FrozenPrefix> = clips.iter().map(|c| frozen_prefix(&base, c, first)).collect::<Result<_>>()?;

    let mode = cfg.condition_mode;
    let mut initial = 0.0;
    for (clip, fz) in clips.iter().zip(&frozen) {
        initial += clip_loss(&base, &adapter, clip, fz, mode)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let initial_ce = initial / clips.len() as f64;

    let clip_norm = cfg.grad_clip.then_some(cfg.grad_clip_norm);
    let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate, clip_norm));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState {
        step: 0,
        epoch: 0,
        seed: cfg.seed,
        base_hash: base_hash.to_string(),
        loss_history: Vec::new(),
        gates: adapter.gate_values()?,
    };
    let mut order: Vec<usize> = (0..clips.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let loss = (clip_loss(&base, &adapter, &clips[i], &frozen[i], mode)? / batch.len() as f64)?;
                let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        step: state.step,
                        detail: format!("loss {value} on clip {} in epoch {epoch}", clips[i].clip_id),
                    });
                }
                batch_loss += value;
                let g = loss.backward()?;
                for (name, var) in vars.iter() {
                    if let Some(grad) = g.get(var.as_tensor()) {
                        let grad = grad.detach();
                        let sum = match grads.remove(name) {
                            Some(acc) => (acc + grad)?,
                            None => grad,
                        };
                        grads.insert(name.clone(), sum);
                    }
                }
            }
            adam.step(&vars, &grads).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Divergence { step: state.step, detail },
                other => other,
            })?;
            state.step += 1;
            state.loss_history.push(batch_loss);
        }
        state.epoch = epoch + 1;
        info!(
            "epoch {}: last batch loss {:.4}",
            state.epoch,
            state.loss_history.last().copied().unwrap_or(f64::NAN)
        );
    }

    let found = base_params.content_hash()?;
    if found != base_hash {
        return Err(Error::FreezeViolation {
            expected: base_hash.to_string(),
            found,
        });
    }
    let trained = AdapterParams::load(&store)?;
    state.gates = trained.gate_values()?;
    let final_ce = {
        let mut total = 0.0;
        for (clip, fz) in clips.iter().zip(&frozen) {
            total += clip_loss(&base, &trained, clip, fz, mode)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        total / clips.len() as f64
    };
    Ok(TrainOutcome {
        state,
        adapter: vars.snapshot()?,
        budget: ParamBudgetReport::new(vars.element_count(), base_params.element_count()),
        initial_ce,
        final_ce,
        optimizer: adam,
    })
}

pub const BASE_DIR: &str = "base";
pub const ADAPTER_DIR: &str = "adapter";
pub const STATE_FILE: &str = "train_state.json";
pub const FREEZE_HASH_FILE: &str = "freeze_hash.txt";

/// Writes the frozen base parameters and their hash sidecar.
pub fn save_base(dir: &Path, params: &ParamStore) -> Result<String> {
    params.save_dir(dir)?;
    let hash = params.content_hash()?;
    let path = dir.join(FREEZE_HASH_FILE);
    fs::write(&path, format!("{hash}\n")).map_err(|e| Error::io(&path, e))?;
    Ok(hash)
}

/// Loads base parameters and checks them against the hash sidecar.
pub fn load_base(dir: &Path) -> Result<(ParamStore, String)> {
    let params = ParamStore::load_dir(dir)?;
    let path = dir.join(FREEZE_HASH_FILE);
    let recorded = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?.trim().to_string();
    let found = params.content_hash()?;
    if found != recorded {
        return Err(Error::FreezeViolation { expected: recorded, found });
    }
    Ok((params, recorded))
}

/// Checkpoint layout: `base/`, `adapter/` and `train_state.json`.
pub fn save_checkpoint(dir: &Path, base: &ParamStore, adapter: &ParamStore, state: &TrainState) -> Result<()> {
    save_base(&dir.join(BASE_DIR), base)?;
    adapter.to_dtype(DType::F32)?.save_dir(dir.join(ADAPTER_DIR))?;
    let path = dir.join(STATE_FILE);
    fs::write(&path, serde_json::to_string_pretty(state)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, ParamStore, TrainState)> {
    let (base, hash) = load_base(&dir.join(BASE_DIR))?;
    let adapter = ParamStore::load_dir(dir.join(ADAPTER_DIR))?;
    let path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let state: TrainState = serde_json::from_str(&text)?;
    if state.base_hash != hash {
        return Err(Error::FreezeViolation {
            expected: state.base_hash,
            found: hash,
        });
    }
    Ok((base, adapter, state))
}

/// A small fixed problem for gradient checks.
pub struct GradCheckInstance {
    pub base: BaseDecoder,
    pub adapter: ParamStore,
    pub clip: TrainingClip,
    pub mode: ConditionMode,
}

impl GradCheckInstance {
    pub fn loss(&self, adapter: &ParamStore) -> Result<Tensor> {
        let params = AdapterParams::load(adapter)?;
        let first = self.base.layers.len() - params.n_layers();
        let frozen = frozen_prefix(&self.base, &self.clip, first)?;
        clip_loss(&self.base, &params, &self.clip, &frozen, self.mode)
    }
}

fn perturbed(store: &ParamStore, name: &str, index: usize, delta: f64) -> Result<ParamStore> {
    let t = store.get(name)?;
    let mut values = t.flatten_all()?.to_vec1::<f64>()?;
    values[index] += delta;
    let mut out = store.clone();
    out.insert(name, Tensor::from_vec(values, t.dims(), t.device())?);
    Ok(out)
}

/// Maximum relative error between the analytic gradient of the loss and
/// central finite differences, over a deterministic sample of entries of
/// `param_name`: `max |a - n| / max(max |a|, max |n|)`. Requires 64-bit
/// parameters.
pub fn grad_check(instance: &GradCheckInstance, param_name: &str, epsilon: f64) -> Result<f64> {
    if instance.adapter.get(param_name)?.dtype() != DType::F64 {
        return Err(Error::Config("gradient checks need 64-bit parameters".into()));
    }
    let (store, vars) = instance.adapter.to_vars()?;
    let loss = instance.loss(&store)?;
    let grads = loss.backward()?;
    let var = vars
        .get(param_name)
        .ok_or_else(|| Error::Input(format!("unknown adapter parameter `{param_name}`")))?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; var.elem_count()],
    };

    // All entries for small tensors; otherwise the largest-gradient entries
    // plus a seeded random sample.
    let n = analytic.len();
    let mut picks: Vec<usize> = if n <= 48 {
        (0..n).collect()
    } else {
        let mut by_size: Vec<usize> = (0..n).collect();
        by_size.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut p: Vec<usize> = by_size[..16].to_vec();
        p.extend((0..16).map(|_| rng.random_range(0..n)));
        p
    };
    picks.sort_unstable();
    picks.dedup();

    let mut numeric = BTreeMap::new();
    for &i in &picks {
        let plus = instance.loss(&perturbed(&instance.adapter, param_name, i, epsilon)?)?.to_scalar::<f64>()?;
        let minus = instance.loss(&perturbed(&instance.adapter, param_name, i, -epsilon)?)?.to_scalar::<f64>()?;
        numeric.insert(i, (plus - minus) / (2.0 * epsilon));
    }
    let scale = picks
        .iter()
        .map(|&i| analytic[i].abs().max(numeric[&i].abs()))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(picks
        .iter()
        .map(|&i| (analytic[i] - numeric[&i]).abs())
        .fold(0.0, f64::max)
        / scale)
}
