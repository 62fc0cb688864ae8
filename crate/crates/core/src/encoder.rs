//! Joint visual embedding: low-rank projections of the aligned face and
//! motion streams, the optical-flow CNN, learnable positions and fusion to
//! the decoder width.

use candle_core::{DType, Device, Module, Tensor, D};

use crate::alignment::{smooth_interpolate, FeatureSequence, SourceTag};
use crate::dataio::ConditionMode;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore};

pub const FACE_PROJ: &str = "face_proj";
pub const MOTION_PROJ: &str = "motion_proj";
pub const FUSE_WEIGHT: &str = "fuse_weight";
pub const POS_EMBED: &str = "pos_embed";

/// Output width of the flow embedder.
pub const FLOW_EMBED_DIM: usize = 256;

/// A trainable `D x d'` matrix compressing extractor features.
#[derive(Debug, Clone)]
pub struct LowRankProjection {
    pub weight: Tensor,
}

impl LowRankProjection {
    pub fn new(weight: Tensor) -> Result<Self> {
        let (d_in, d_out) = weight.dims2()?;
        if d_out > d_in {
            return Err(Error::Shape(format!("projection rank {d_out} exceeds input width {d_in}")));
        }
        Ok(Self { weight })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Row-wise projection of a `T x D` feature matrix to `T x d'`.
pub fn project(features: &Tensor, proj: &LowRankProjection) -> Result<Tensor> {
    let (_, d) = features.dims2()?;
    if d != proj.in_dim() {
        return Err(Error::Shape(format!(
            "feature width {d} does not match projection input width {}",
            proj.in_dim()
        )));
    }
    Ok(features.matmul(&proj.weight)?)
}

/// Converts a feature sequence into a `T x D` tensor of the given dtype.
pub fn sequence_tensor(seq: &FeatureSequence, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(seq.as_slice(), (seq.len(), seq.dim()), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    /// `(d1 + d2) x d`
    pub weight: Tensor,
    /// `T_max x (d1 + d2)`
    pub positions: Tensor,
}

impl FusionParams {
    pub fn max_len(&self) -> usize {
        self.positions.dims()[0]
    }
}

/// The fused `T x d` conditioning sequence.
#[derive(Debug, Clone)]
pub struct JointEmbedding {
    pub z: Tensor,
}

impl JointEmbedding {
    pub fn len(&self) -> usize {
        self.z.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(len: usize, width: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            z: Tensor::zeros((len, width), dtype, &Device::Cpu)?,
        })
    }
}

/// Per frame: `W_e^T([face_i; motion_i] + pos_i)`.
pub fn fuse(face: &Tensor, motion: &Tensor, params: &FusionParams) -> Result<JointEmbedding> {
    let (t_face, d1) = face.dims2()?;
    let (t_motion, d2) = motion.dims2()?;
    if t_face != t_motion {
        return Err(Error::Fusion(format!(
            "face has {t_face} frames but motion has {t_motion}"
        )));
    }
    if t_face > params.max_len() {
        return Err(Error::Fusion(format!(
            "{t_face} frames exceed the positional table length {}",
            params.max_len()
        )));
    }
    let (pos_len, pos_width) = params.positions.dims2()?;
    if pos_width != d1 + d2 || params.weight.dims()[0] != d1 + d2 {
        return Err(Error::Fusion(format!(
            "concatenated width {} does not match fusion parameters ({} positional, {} weight rows); table length {pos_len}",
            d1 + d2,
            pos_width,
            params.weight.dims()[0]
        )));
    }
    let joined = Tensor::cat(&[face, motion], 1)?;
    let with_pos = (joined + params.positions.narrow(0, 0, t_face)?)?;
    Ok(JointEmbedding {
        z: with_pos.matmul(&params.weight)?,
    })
}

/// Face and motion streams resampled to the code rate. Computed once per
/// clip; nothing here is trainable.
#[derive(Debug, Clone)]
pub struct AlignedClip {
    pub face: Tensor,
    pub motion: Tensor,
}

impl AlignedClip {
    pub fn len(&self) -> usize {
        self.face.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            face: self.face.to_dtype(dtype)?,
            motion: self.motion.to_dtype(dtype)?,
        })
    }

    /// Leading `len` frames.
    pub fn truncate(&self, len: usize) -> Result<Self> {
        Ok(Self {
            face: self.face.narrow(0, 0, len)?,
            motion: self.motion.narrow(0, 0, len)?,
        })
    }
}

/// Interpolates both raw streams to `code_rate_hz`. Their durations must
/// agree to within one output frame; the shorter length wins.
pub fn align_clip(face: &FeatureSequence, motion: &FeatureSequence, code_rate_hz: f64) -> Result<AlignedClip> {
    let face_up = smooth_interpolate(face, code_rate_hz)?;
    let motion_up = smooth_interpolate(motion, code_rate_hz)?;
    let (tf, tm) = (face_up.len(), motion_up.len());
    if tf.abs_diff(tm) > 1 {
        return Err(Error::Input(format!(
            "face ({} s) and motion ({} s) streams differ in duration",
            face.duration_s(),
            motion.duration_s()
        )));
    }
    let t = tf.min(tm);
    Ok(AlignedClip {
        face: sequence_tensor(&face_up, DType::F32)?.narrow(0, 0, t)?,
        motion: sequence_tensor(&motion_up, DType::F32)?.narrow(0, 0, t)?,
    })
}

/// All trainable parts of the joint embedding.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub face: LowRankProjection,
    pub motion: LowRankProjection,
    pub fusion: FusionParams,
}

impl ConditionEncoder {
    pub fn load(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            face: LowRankProjection::new(store.get(FACE_PROJ)?.clone())?,
            motion: LowRankProjection::new(store.get(MOTION_PROJ)?.clone())?,
            fusion: FusionParams {
                weight: store.get(FUSE_WEIGHT)?.clone(),
                positions: store.get(POS_EMBED)?.clone(),
            },
        })
    }

    /// Scaled-uniform projections, zero positional table.
    pub fn init_params(
        store: &mut ParamStore,
        init: &mut Initializer,
        face_dim: usize,
        motion_dim: usize,
        face_rank: usize,
        motion_rank: usize,
        d_model: usize,
        max_len: usize,
    ) -> Result<()> {
        store.insert(FACE_PROJ, init.fan_in(face_dim, face_rank)?);
        store.insert(MOTION_PROJ, init.fan_in(motion_dim, motion_rank)?);
        store.insert(FUSE_WEIGHT, init.fan_in(face_rank + motion_rank, d_model)?);
        store.insert(
            POS_EMBED,
            Tensor::zeros((max_len, face_rank + motion_rank), DType::F32, &Device::Cpu)?,
        );
        Ok(())
    }

    /// Projection and fusion of an already aligned clip.
    pub fn encode_aligned(&self, clip: &AlignedClip, mode: ConditionMode) -> Result<JointEmbedding> {
        let t = clip.len();
        let dtype = self.fusion.weight.dtype();
        let face = match mode {
            ConditionMode::MotionOnly => Tensor::zeros((t, self.face.out_dim()), dtype, &Device::Cpu)?,
            _ => project(&clip.face, &self.face)?,
        };
        let motion = match mode {
            ConditionMode::FaceOnly => Tensor::zeros((t, self.motion.out_dim()), dtype, &Device::Cpu)?,
            _ => project(&clip.motion, &self.motion)?,
        };
        fuse(&face, &motion, &self.fusion)
    }

    /// Full pipeline: interpolate to the code rate, project, fuse.
    pub fn encode_clip(
        &self,
        face_raw: &FeatureSequence,
        motion_raw: &FeatureSequence,
        mode: ConditionMode,
        code_rate_hz: f64,
    ) -> Result<JointEmbedding> {
        let dtype = self.fusion.weight.dtype();
        let aligned = align_clip(face_raw, motion_raw, code_rate_hz)?.to_dtype(dtype)?;
        self.encode_aligned(&aligned, mode)
    }
}

/// One 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// `(out, in, 3, 3)`
    pub kernel: Tensor,
    /// `(out,)`
    pub bias: Tensor,
}

/// Convolutional embedder mapping an `H x W x 2` flow field to a 256-vector:
/// conv + ReLU per layer, then spatial average pooling.
#[derive(Debug, Clone)]
pub struct FlowEmbedder {
    layers: Vec<ConvLayer>,
}

/// Default channel progression of the flow CNN.
pub const FLOW_CHANNELS: [usize; 4] = [2, 32, 64, 256];

impl FlowEmbedder {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        let mut in_ch = 2;
        for (i, layer) in layers.iter().enumerate() {
            let (out, inp, kh, kw) = layer.kernel.dims4()?;
            if (kh, kw) != (3, 3) {
                return Err(Error::Shape(format!("conv layer {i}: kernel {kh}x{kw}, expected 3x3")));
            }
            if inp != in_ch || layer.bias.dims() != [out] {
                return Err(Error::Shape(format!("conv layer {i}: channel mismatch")));
            }
            in_ch = out;
        }
        if layers.is_empty() || in_ch != FLOW_EMBED_DIM {
            return Err(Error::Shape(format!(
                "flow embedder must end with {FLOW_EMBED_DIM} channels, got {in_ch}"
            )));
        }
        Ok(Self { layers })
    }

    /// He-uniform kernels and zero biases for the default 2-32-64-256 stack.
    pub fn seeded(seed: u64) -> Result<Self> {
        let mut init = Initializer::new(seed);
        let layers = FLOW_CHANNELS
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let bound = (6.0 / (inp * 9) as f64).sqrt();
                Ok(ConvLayer {
                    kernel: init.uniform(&[out, inp, 3, 3], bound)?,
                    bias: Tensor::zeros(out, DType::F32, &Device::Cpu)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    /// Embeds a batch of `n` flow fields given as `n x H x W x 2` values.
    pub fn embed_batch(&self, fields: &[f32], n: usize, h: usize, w: usize) -> Result<Tensor> {
        if h < 3 || w < 3 {
            return Err(Error::Shape(format!("flow field {h}x{w} is smaller than 3x3")));
        }
        if fields.len() != n * h * w * 2 {
            return Err(Error::Shape(format!(
                "expected {} flow values for {n} fields of {h}x{w}x2, got {}",
                n * h * w * 2,
                fields.len()
            )));
        }
        let x = Tensor::from_slice(fields, (n, h, w, 2), &Device::Cpu)?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        Ok(self.forward(&x)?)
    }

    /// Embeds one `H x W x 2` field.
    pub fn embed_flow(&self, field: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
        Ok(self.embed_batch(field, 1, h, w)?.squeeze(0)?.to_vec1::<f32>()?)
    }

    /// Embeds a `T x H x W x 2` stack sampled at `rate_hz` into a `T x 256`
    /// feature sequence.
    pub fn embed_sequence(&self, fields: &[f32], t: usize, h: usize, w: usize, rate_hz: f64) -> Result<FeatureSequence> {
        let emb = self.embed_batch(fields, t, h, w)?;
        FeatureSequence::new(
            emb.flatten_all()?.to_vec1::<f32>()?,
            t,
            FLOW_EMBED_DIM,
            rate_hz,
            SourceTag::Flow,
        )
    }
}

impl Module for FlowEmbedder {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = xs.clone();
        for layer in &self.layers {
            x = x
                .conv2d(&layer.kernel, 1, 1, 1, 1)?
                .broadcast_add(&layer.bias.reshape((1, (), 1, 1))?)?
                .relu()?;
        }
        x.mean(D::Minus1)?.mean(D::Minus1)
    }
}
