//! Synthetic paired clips with known cross-modal structure.
//!
//! Motion features oscillate at the beat frequency with zero phase at each
//! beat, face features carry a slowly varying intensity, and the token
//! stream places the marker code on beat frames and caption-specific event
//! codes elsewhere at a density that follows the face intensity.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignment::{ContextFeatures, FeatureSequence, SourceTag};
use crate::dataio::{write_manifest, write_tensor, ClipManifestEntry, Manifest, TensorFile};
use crate::decoder::{TokenSequence, MARKER_CODE, SUSTAIN_CODE};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub duration_s: f64,
    pub feature_rate_hz: f64,
    pub code_rate_hz: f64,
    pub bpm_range: [f64; 2],
    pub n_captions: usize,
    pub vocab_size: usize,
    /// Seeds clip content: tempos, phases and noise.
    pub seed: u64,
    /// Seeds what is shared across datasets: caption palettes and the face
    /// direction. Train and test sets must agree on it.
    pub style_seed: u64,
    pub face_dim: usize,
    pub motion_dim: usize,
    /// Context frames per motion window.
    pub motion_context: usize,
    pub flow_grid: [usize; 2],
    pub write_flow: bool,
    pub palette_size: usize,
    pub motion_noise: f64,
    pub face_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_clips: 16,
            duration_s: 10.0,
            feature_rate_hz: 5.0,
            code_rate_hz: 50.0,
            bpm_range: [80.0, 160.0],
            n_captions: 4,
            vocab_size: 256,
            seed: 0,
            style_seed: 7,
            face_dim: 768,
            motion_dim: 64,
            motion_context: 8,
            flow_grid: [16, 16],
            write_flow: true,
            palette_size: 24,
            motion_noise: 0.3,
            face_noise: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [lo, hi] = self.bpm_range;
        if !(lo > 30.0 && hi < 300.0 && lo <= hi) {
            return bad(format!("bpm_range [{lo}, {hi}] must lie within (30, 300) with low <= high"));
        }
        for (name, v) in [
            ("duration_s", self.duration_s),
            ("feature_rate_hz", self.feature_rate_hz),
            ("code_rate_hz", self.code_rate_hz),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("n_captions", self.n_captions),
            ("face_dim", self.face_dim),
            ("motion_dim", self.motion_dim),
            ("motion_context", self.motion_context),
            ("palette_size", self.palette_size),
            ("flow_grid height", self.flow_grid[0]),
            ("flow_grid width", self.flow_grid[1]),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.vocab_size < 3 || self.palette_size > self.vocab_size - 2 {
            return bad(format!(
                "palette_size {} needs vocab_size >= palette_size + 2, got {}",
                self.palette_size, self.vocab_size
            ));
        }
        for (name, v) in [("motion_noise", self.motion_noise), ("face_noise", self.face_noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.feature_frames() == 0 || self.code_frames() == 0 {
            return bad("duration too short for the configured rates".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn feature_frames(&self) -> usize {
        (self.duration_s * self.feature_rate_hz).round() as usize
    }

    pub fn code_frames(&self) -> usize {
        (self.duration_s * self.code_rate_hz).round() as usize
    }

    /// Caption palette: distinct event codes from `[2, K_v)` with Zipf
    /// weights `1 / (rank + 1)`.
    pub fn palette(&self, caption: u32) -> (Vec<u32>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.style_seed, 0xca97 + caption as u64));
        let mut pool: Vec<u32> = (2..self.vocab_size as u32).collect();
        let mut codes = Vec::with_capacity(self.palette_size);
        for _ in 0..self.palette_size {
            let i = rng.random_range(0..pool.len());
            codes.push(pool.swap_remove(i));
        }
        let weights = (0..self.palette_size).map(|r| 1.0 / (r as f64 + 1.0)).collect();
        (codes, weights)
    }

    /// Fixed unit-variance direction along which face intensity is written.
    pub fn face_direction(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.style_seed, 0xface));
        let n = Normal::new(0.0, 1.0).unwrap();
        (0..self.face_dim).map(|_| n.sample(&mut rng)).collect()
    }
}

/// Decorrelates derived seeds.
fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    /// `T_f x face_dim` at the feature rate.
    pub face: FeatureSequence,
    /// `T_f x C x motion_dim` at the feature rate.
    pub motion: ContextFeatures,
    /// `T_f x H x W x 2`, row-major.
    pub flow: Vec<f32>,
    pub tokens: TokenSequence,
    pub beat_times: Vec<f64>,
    pub intensity: Vec<f64>,
}

/// Slowly varying intensity in `[0.1, 0.9]`.
fn intensity_fn(period: f64, phase: f64) -> impl Fn(f64) -> f64 {
    move |t| 0.5 + 0.4 * (2.0 * PI * t / period + phase).sin()
}

pub fn generate_clip(spec: &SynthSpec, clip_seed: u64, bpm: f64, caption: u32) -> Result<SynthClip> {
    spec.validate()?;
    if !(bpm >= spec.bpm_range[0] && bpm <= spec.bpm_range[1]) {
        return Err(Error::Config(format!("bpm {bpm} outside {:?}", spec.bpm_range)));
    }
    if caption as usize >= spec.n_captions {
        return Err(Error::Config(format!("caption {caption} >= n_captions {}", spec.n_captions)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let freq = bpm / 60.0;
    let intensity = intensity_fn(rng.random_range(6.0..14.0), rng.random_range(0.0..2.0 * PI));

    // Motion: every channel mixes the beat-locked cosine and sine with a
    // peaked pulse train; channel 0 is the pure cosine.
    let tf = spec.feature_frames();
    let c = spec.motion_context;
    let sub_rate = spec.feature_rate_hz * c as f64;
    let mixes: Vec<[f64; 3]> = (0..spec.motion_dim)
        .map(|ch| {
            if ch == 0 {
                [1.0, 0.0, 0.0]

            } else {
                [unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)]
            }
        })
        .collect();
    let pulse_mean = (-4.0f64).exp() * bessel_i0(4.0);
    let mut motion = Vec::with_capacity(tf * c * spec.motion_dim);
    for j in 0..tf * c {
        let t = j as f64 / sub_rate;
        let phase = 2.0 * PI * freq * t;
        let pulse = (4.0 * (phase.cos() - 1.0)).exp() - pulse_mean;
        for m in &mixes {
            let v = m[0] * phase.cos() + m[1] * phase.sin() + m[2] * pulse + spec.motion_noise * unit.sample(&mut rng);
            motion.push(v as f32);
        }
    }

    let direction = spec.face_direction();
    let mut face = Vec::with_capacity(tf * spec.face_dim);
    let mut levels = Vec::with_capacity(tf);
    for i in 0..tf {
        let s = intensity(i as f64 / spec.feature_rate_hz);
        levels.push(s);
        for u in &direction {
            face.push((s * u + spec.face_noise * unit.sample(&mut rng)) as f32);
        }
    }

    // Flow: a uniform field whose vertical component follows the beat
    // cosine and whose magnitude follows the intensity, plus noise.
    let [h, w] = spec.flow_grid;
    let mut flow = Vec::new();
    if spec.write_flow {
        flow.reserve(tf * h * w * 2);
        for i in 0..tf {
            let t = i as f64 / spec.feature_rate_hz;
            let (dx, dy) = (intensity(t), (2.0 * PI * freq * t).cos());
            for _ in 0..h * w {
                flow.push((dx + spec.motion_noise * unit.sample(&mut rng)) as f32);
                flow.push((dy + spec.motion_noise * unit.sample(&mut rng)) as f32);
            }
        }
    }

    // Tokens.
    let t_codes = spec.code_frames();
    let period = 60.0 / bpm;
    let mut beat_frames = Vec::new();
    for k in 0.. {
        let frame = (k as f64 * period * spec.code_rate_hz).round() as usize;
        if frame >= t_codes {
            break;
        }
        beat_frames.push(frame);
    }
    let (palette, weights) = spec.palette(caption);
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut codes = vec![SUSTAIN_CODE; t_codes];
    let mut next_beat = beat_frames.iter().peekable();
    for (f, code) in codes.iter_mut().enumerate() {
        if next_beat.peek() == Some(&&f) {
            next_beat.next();
            *code = MARKER_CODE;
            continue;
        }
        let rho = 0.15 + 0.7 * intensity(f as f64 / spec.code_rate_hz);
        if rng.random::<f64>() < rho {
            *code = palette[pick.sample(&mut rng)];
        }
    }
    let beat_times = beat_frames.iter().map(|&f| f as f64 / spec.code_rate_hz).collect();
    let mut tokens = TokenSequence::new(codes, spec.code_rate_hz);
    tokens.beat_frames = Some(beat_frames);

    Ok(SynthClip {
        face: FeatureSequence::new(face, tf, spec.face_dim, spec.feature_rate_hz, SourceTag::Face)?,
        motion: ContextFeatures {
            values: motion,
            len: tf,
            context: c,
            dim: spec.motion_dim,
            rate_hz: spec.feature_rate_hz,
        },
        flow,
        tokens,
        beat_times,
        intensity: levels,
    })
}

/// Modified Bessel function of the first kind, order 0 (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        term *= (x / 2.0).powi(2) / (k as f64 * k as f64);
        sum += term;
    }
    sum
}

/// Per-clip `(seed, bpm, caption)` for a dataset.
pub fn clip_plan(spec: &SynthSpec) -> Vec<(u64, f64, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0xb9a));
    (0..spec.n_clips)
        .map(|i| {
            let bpm = rng.random_range(spec.bpm_range[0]..=spec.bpm_range[1]);
            (mix(spec.seed, i as u64 + 1), bpm, (i % spec.n_captions) as u32)
        })
        .collect()
}

fn tensor_err(path: &Path) -> impl Fn(crate::error::FormatError) -> Error + '_ {
    move |source| Error::Format {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes every clip and `manifest.json` under `out_dir`.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(spec.n_clips);
    for (i, (seed, bpm, caption)) in clip_plan(spec).into_iter().enumerate() {
        let clip = generate_clip(spec, seed, bpm, caption)?;
        let id = format!("clip_{i:03}");
        let tf = spec.feature_frames();
        let write = |suffix: &str, tensor: std::result::Result<TensorFile, crate::error::FormatError>| -> Result<String> {
            let name = format!("{id}_{suffix}.expt");
            let path = out_dir.join(&name);
            write_tensor(&path, &tensor.map_err(tensor_err(&path))?)?;
            Ok(name)
        };
        let face_path = write("face", TensorFile::f32(vec![tf, spec.face_dim], clip.face.as_slice().to_vec()))?;
        let motion_path = write(
            "motion",
            TensorFile::f32(vec![tf, spec.motion_context, spec.motion_dim], clip.motion.values.clone()),
        )?;
        let token_path = write(
            "tokens",
            TensorFile::i32(vec![clip.tokens.len()], clip.tokens.codes.iter().map(|&c| c as i32).collect()),
        )?;
        let flow_path = if spec.write_flow {
            let [h, w] = spec.flow_grid;
            Some(write("flow", TensorFile::f32(vec![tf, h, w, 2], clip.flow.clone()))?)
        } else {
            None
        };
        entries.push(ClipManifestEntry {
            clip_id: id,
            duration_s: spec.duration_s,
            face_path,
            motion_path,
            token_path,
            flow_path,
            caption_id: caption,
            tempo_bpm: bpm,
            beat_times_s: clip.beat_times,
        });
    }
    write_manifest(out_dir.join(MANIFEST_FILE), &entries)?;
    let manifest = crate::dataio::load_manifest(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
