//! Temporal alignment of visual feature streams to the music code rate:
//! nearest-frame video resampling, windowed extractor framing, context
//! flattening and linear-interpolation smoothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Face,
    MotionCtx,
    Flow,
}

/// A `T x D` matrix of per-frame features sampled at `rate_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<f32>,
    len: usize,
    dim: usize,
    rate_hz: f64,
    source: SourceTag,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f32>, len: usize, dim: usize, rate_hz: f64, source: SourceTag) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::Shape(format!("feature sequence must be at least 1x1, got {len}x{dim}")));
        }
        if frames.len() != len * dim {
            return Err(Error::Shape(format!(
                "{len}x{dim} feature sequence needs {} values, got {}",
                len * dim,
                frames.len()
            )));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::Input(format!("frame rate must be > 0, got {rate_hz}")));
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value at flat index {i}")));
        }
        Ok(Self {
            frames,
            len,
            dim,
            rate_hz,
            source,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], rate_hz: f64, source: SourceTag) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        Self::new(rows.concat(), rows.len(), dim, rate_hz, source)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn source(&self) -> SourceTag {
        self.source
    }

    pub fn duration_s(&self) -> f64 {
        self.len as f64 / self.rate_hz
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.frames.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.frames
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.frames
    }

    /// Linear interpolation at fractional source index `t`. Positions at or
    /// beyond the last frame clamp to it; negative positions clamp to frame 0.
    pub fn interpolate_at(&self, t: f64) -> Vec<f32> {
        let t = t.max(0.0);
        let i = t.floor() as usize;
        if i + 1 >= self.len {
            return self.row(self.len - 1).to_vec();
        }
        let alpha = t - i as f64;
        let (lo, hi) = (self.row(i), self.row(i + 1));
        lo.iter()
            .zip(hi)
            .map(|(&a, &b)| ((1.0 - alpha) * a as f64 + alpha * b as f64) as f32)
            .collect()
    }
}

/// A `T x C x D` tensor whose middle axis holds `C` consecutive sub-frames
/// of local temporal context per window.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures {
    pub values: Vec<f32>,
    pub len: usize,
    pub context: usize,
    pub dim: usize,
    pub rate_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramingSpec {
    pub window: usize,
    pub stride: usize,
}

impl FramingSpec {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::Input(format!("window ({window}) and stride ({stride}) must be >= 1")));
        }
        Ok(Self { window, stride })
    }
}

fn output_len(duration_s: f64, target_hz: f64) -> usize {
    (duration_s * target_hz).round() as usize
}

fn check_rate(target_hz: f64) -> Result<()> {
    if target_hz.is_finite() && target_hz > 0.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("target rate must be > 0, got {target_hz}")))
    }
}

/// Frame-rate conversion by nearest-earlier-frame duplication.
pub fn resample_nearest(seq: &FeatureSequence, target_hz: f64) -> Result<FeatureSequence> {
    check_rate(target_hz)?;
    let out_len = ((seq.len as f64) * target_hz / seq.rate_hz).round() as usize;
    if out_len == 0 {
        return Err(Error::Input(format!(
            "resampling {} frames from {} Hz to {target_hz} Hz leaves no frames",
            seq.len, seq.rate_hz
        )));
    }
    let mut frames = Vec::with_capacity(out_len * seq.dim);
    for j in 0..out_len {
        let src = ((j as f64 * seq.rate_hz) / target_hz).floor() as usize;
        frames.extend_from_slice(seq.row(src.min(seq.len - 1)));
    }
    FeatureSequence::new(frames, out_len, seq.dim, target_hz, seq.source)
}

/// Number of feature frames a windowed extractor emits over `video_frames`.
pub fn frame_count(video_frames: usize, spec: FramingSpec) -> Result<usize> {
    if video_frames < spec.window {
        return Err(Error::Input(format!(
            "clip too short: {video_frames} frames < window {}",
            spec.window
        )));
    }
    Ok((video_frames - spec.window) / spec.stride + 1)
}

/// Merges the window and context axes: row `t*C + c` is `input[t][c]` and the
/// rate scales by `C`.
pub fn flatten_context(ctx: &ContextFeatures) -> Result<FeatureSequence> {
    if ctx.context == 0 {
        return Err(Error::Shape("context axis must be >= 1".into()));
    }
    if ctx.values.len() != ctx.len * ctx.context * ctx.dim {
        return Err(Error::Shape(format!(
            "context tensor {}x{}x{} needs {} values, got {}",
            ctx.len,
            ctx.context,
            ctx.dim,
            ctx.len * ctx.context * ctx.dim,
            ctx.values.len()
        )));
    }
    // Row-major (T, C, D) is already row-major (T*C, D).
    FeatureSequence::new(
        ctx.values.clone(),
        ctx.len * ctx.context,
        ctx.dim,
        ctx.rate_hz * ctx.context as f64,
        SourceTag::MotionCtx,
    )
}

/// Linear-interpolation upsampling to `target_hz`. Output frame `j` sits at
/// source position `j * rate / target`; its value is the two-point blend of
/// the neighbouring frames, clamped to the last frame at the end. The output
/// spans `round(duration * target_hz)` frames.
pub fn smooth_interpolate(seq: &FeatureSequence, target_hz: f64) -> Result<FeatureSequence> {
    check_rate(target_hz)?;
    let out_len = output_len(seq.duration_s(), target_hz);
    if out_len == 0 {
        return Err(Error::Input(format!(
            "{} s at {target_hz} Hz is shorter than one output frame",
            seq.duration_s()
        )));
    }
    let mut frames = Vec::with_capacity(out_len * seq.dim);
    for j in 0..out_len {
        let t = (j as f64 * seq.rate_hz) / target_hz;
        frames.extend(seq.interpolate_at(t));
    }
    FeatureSequence::new(frames, out_len, seq.dim, target_hz, seq.source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: &[&[f32]], rate: f64) -> FeatureSequence {
        let rows: Vec<Vec<f32>> = rows.iter().map(|r| r.to_vec()).collect();
        FeatureSequence::from_rows(&rows, rate, SourceTag::Face).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize, rate: f64) -> FeatureSequence {
        let v = (0..len * dim).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        FeatureSequence::new(v, len, dim, rate, SourceTag::Face).unwrap()
    }

    #[test]
    fn rejects_bad_sequences() {
        assert!(FeatureSequence::new(vec![], 0, 1, 5.0, SourceTag::Face).is_err());
        assert!(FeatureSequence::new(vec![1.0], 1, 1, 0.0, SourceTag::Face).is_err());
        assert!(FeatureSequence::new(vec![f32::NAN], 1, 1, 5.0, SourceTag::Face).is_err());
    }

    #[test]
    fn nearest_30_to_80_fps_keeps_one_second() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_seq(&mut rng, 30, 2, 30.0);
        let r = resample_nearest(&s, 80.0).unwrap();
        assert_eq!(r.len(), 80);
        assert_eq!(r.duration_s(), 1.0);
    }

    #[test]
    fn nearest_identity_and_doubling() {
        let s = seq(&[&[1.0], &[2.0], &[3.0]], 3.0);
        assert_eq!(resample_nearest(&s, 3.0).unwrap(), s);
        let d = resample_nearest(&s, 6.0).unwrap();
        let got: Vec<f32> = d.rows().map(|r| r[0]).collect();
        // index formula floor(j * 3 / 6) for j = 0..6
        let expected: Vec<f32> = (0..6).map(|j| s.row(j * 3 / 6)[0]).collect();
        assert_eq!(got, expected);
        assert_eq!(got, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn nearest_mapping_is_monotone() {
        let s = FeatureSequence::new((0..37).map(|i| i as f32).collect(), 37, 1, 29.97, SourceTag::Face).unwrap();
        let r = resample_nearest(&s, 80.0).unwrap();
        let idx: Vec<f32> = r.rows().map(|x| x[0]).collect();
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(idx[0], 0.0);
        assert_eq!(*idx.last().unwrap(), 36.0);
    }

    #[test]
    fn frame_count_cases() {
        let marlin = FramingSpec::new(16, 16).unwrap();
        assert_eq!(frame_count(800, marlin).unwrap(), 50);
        assert_eq!(frame_count(16, marlin).unwrap(), 1);
        let sync = FramingSpec::new(16, 5).unwrap();
        // brute-force enumeration of window starts
        let starts = (0..800).step_by(5).filter(|s| s + 16 <= 800).count();
        assert_eq!(starts, 157);
        assert_eq!(frame_count(800, sync).unwrap(), starts);
        assert!(frame_count(15, marlin).is_err());
        assert!(FramingSpec::new(0, 1).is_err());
    }

    #[test]
    fn resample_then_frame_gives_five_per_second() {
        let marlin = FramingSpec::new(16, 16).unwrap();
        for secs in 1..=60usize {
            let video = FeatureSequence::new(vec![0.0; 30 * secs], 30 * secs, 1, 30.0, SourceTag::Face).unwrap();
            let at80 = resample_nearest(&video, 80.0).unwrap();
            assert_eq!(frame_count(at80.len(), marlin).unwrap(), 5 * secs);
        }
    }

    #[test]
    fn flatten_orders_rows_lexicographically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, c, d) = (3, 8, 4);
        let values: Vec<f32> = (0..t * c * d).map(|_| rng.random()).collect();
        let ctx = ContextFeatures {
            values: values.clone(),
            len: t,
            context: c,
            dim: d,
            rate_hz: 5.0,
        };
        let flat = flatten_context(&ctx).unwrap();
        assert_eq!((flat.len(), flat.dim(), flat.rate_hz()), (24, 4, 40.0));
        for ti in 0..t {
            for ci in 0..c {
                for di in 0..d {
                    assert_eq!(flat.row(ti * c + ci)[di], values[(ti * c + ci) * d + di]);
                }
            }
        }
        let two = ContextFeatures {
            values: (0..48).map(|i| i as f32).collect(),
            len: 2,
            context: 8,
            dim: 3,
            rate_hz: 5.0,
        };
        let f = flatten_context(&two).unwrap();
        assert_eq!((f.len(), f.dim()), (16, 3));
        assert_eq!(f.row(9), &[27.0, 28.0, 29.0]);
    }

    #[test]
    fn flatten_single_context_is_identity() {
        let ctx = ContextFeatures {
            values: vec![1.0, 2.0, 3.0, 4.0],
            len: 2,
            context: 1,
            dim: 2,
            rate_hz: 5.0,
        };
        let f = flatten_context(&ctx).unwrap();
        assert_eq!(f.as_slice(), &ctx.values[..]);
        assert_eq!(f.rate_hz(), 5.0);
    }

    #[test]
    fn interpolation_midpoint_and_grid() {
        let s = seq(&[&[0.0], &[10.0]], 1.0);
        assert_eq!(s.interpolate_at(0.5), vec![5.0]);
        assert_eq!(s.interpolate_at(1.0), vec![10.0]);
        assert_eq!(s.interpolate_at(0.0), vec![0.0]);
        assert_eq!(s.interpolate_at(7.3), vec![10.0]);
    }

    #[test]
    fn ten_second_clip_to_code_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_seq(&mut rng, 50, 3, 5.0);
        let up = smooth_interpolate(&s, 50.0).unwrap();
        assert_eq!(up.len(), 500);
        assert_eq!(up.rate_hz(), 50.0);
        for i in 0..50 {
            assert_eq!(up.row(10 * i), s.row(i));
        }
    }

    #[test]
    fn four_times_upsampling_matches_two_point_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_seq(&mut rng, 20, 5, 5.0);
        let up = smooth_interpolate(&s, 20.0).unwrap();
        assert_eq!(up.len(), 80);
        for j in 0..80 {
            let pos = j as f64 / 4.0;
            let lo = (pos.floor() as usize).min(19);
            let hi = (lo + 1).min(19);
            let w = pos - lo as f64;
            for k in 0..5 {
                let a = s.row(lo)[k] as f64;
                let b = s.row(hi)[k] as f64;
                let oracle = a * (1.0 - w) + b * w;
                assert!((up.row(j)[k] as f64 - oracle).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn interpolation_stays_in_envelope(
            vals in prop::collection::vec(-100.0f32..100.0, 2..60),
            factor in 1u32..12,
        ) {
            let n = vals.len();
            let s = FeatureSequence::new(vals.clone(), n, 1, 5.0, SourceTag::Face).unwrap();
            let up = smooth_interpolate(&s, 5.0 * factor as f64).unwrap();
            let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for r in up.rows() {
                prop_assert!(r[0] >= lo && r[0] <= hi);
            }
            for i in 0..n {
                prop_assert_eq!(up.row(i * factor as usize)[0].to_bits(), vals[i].to_bits());
            }
        }

        #[test]
        fn flatten_preserves_multiset(
            t in 1usize..5, c in 1usize..9, d in 1usize..4, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..t * c * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let ctx = ContextFeatures { values: values.clone(), len: t, context: c, dim: d, rate_hz: 5.0 };
            let flat = flatten_context(&ctx).unwrap();
            let mut a: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = flat.as_slice().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
