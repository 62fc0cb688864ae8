//! Run-level evaluation: per-clip rhythm scores against ground truth and
//! corpus-level distribution scores through pluggable models.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    beat_f1, extract_beats, frechet_distance, grid_tempo_error, inception_score, kl_divergence, BeatGrid,
    ClassProbMatrix, EmbeddingSet, DEFAULT_BEAT_TOLERANCE_S,
};
use crate::dataio::Manifest;
use crate::decoder::TokenSequence;
use crate::error::{Error, Result};
use crate::training::read_tokens;

/// Maps a token sequence to a fixed-width clip embedding.
pub trait Embedder: Sync {
    fn embed(&self, tokens: &TokenSequence) -> Vec<f64>;
}

/// Maps a token sequence to class probabilities.
pub trait Classifier: Sync {
    fn n_classes(&self) -> usize;
    fn predict_proba(&self, tokens: &TokenSequence) -> Vec<f64>;
}

/// Similarity between a clip's visual features and generated tokens, for
/// plugging in a joint audio-visual model. No implementation ships here.
pub trait CrossModalScorer: Sync {
    fn score(&self, visual: &[Vec<f32>], tokens: &TokenSequence) -> f64;
}

/// Hashed unigram and bigram frequencies, `2 * buckets` wide.
#[derive(Debug, Clone, Copy)]
pub struct NgramEmbedder {
    pub buckets: usize,
}

impl Default for NgramEmbedder {
    fn default() -> Self {
        Self { buckets: 16 }
    }
}

impl NgramEmbedder {
    fn bucket(&self, key: u64) -> usize {
        (key.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 32) as usize % self.buckets
    }
}

impl Embedder for NgramEmbedder {
    fn embed(&self, tokens: &TokenSequence) -> Vec<f64> {
        let b = self.buckets;
        let mut v = vec![0.0; 2 * b];
        for &c in &tokens.codes {
            v[self.bucket(c as u64)] += 1.0;
        }
        for w in tokens.codes.windows(2) {
            v[b + self.bucket(((w[0] as u64) << 32) | w[1] as u64 | 1 << 63)] += 1.0;
        }
        let n = tokens.len().max(1) as f64;
        let m = tokens.len().saturating_sub(1).max(1) as f64;
        v[..b].iter_mut().for_each(|x| *x /= n);
        v[b..].iter_mut().for_each(|x| *x /= m);
        v
    }
}

/// Multinomial logistic regression on embedder features, fitted by full
/// batch gradient descent with a small L2 penalty.
pub struct LogisticCaptionClassifier<E: Embedder> {
    embedder: E,
    /// `n_classes x (dim + 1)`, bias last.
    weights: Vec<Vec<f64>>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl<E: Embedder> LogisticCaptionClassifier<E> {
    pub fn fit(embedder: E, examples: &[(&TokenSequence, u32)], n_classes: usize) -> Result<Self> {
        if examples.is_empty() || n_classes == 0 {
            return Err(Error::Input("classifier needs labelled examples".into()));
        }
        if let Some((_, c)) = examples.iter().find(|(_, c)| *c as usize >= n_classes) {
            return Err(Error::Input(format!("label {c} >= {n_classes} classes")));
        }
        let xs: Vec<Vec<f64>> = examples
            .iter()
            .map(|(t, _)| {
                let mut x = embedder.embed(t);
                x.push(1.0);
                x
            })
            .collect();
        let d = xs[0].len();
        let mut w = vec![vec![0.0; d]; n_classes];
        let (lr, l2, n) = (2.0, 1e-4, xs.len() as f64);
        for _ in 0..500 {
            let mut grad = vec![vec![0.0; d]; n_classes];
            for (x, (_, y)) in xs.iter().zip(examples) {
                let p = softmax(&w.iter().map(|wc| wc.iter().zip(x).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>());
                for (c, g) in grad.iter_mut().enumerate() {
                    let r = p[c] - if c == *y as usize { 1.0 } else { 0.0 };
                    g.iter_mut().zip(x).for_each(|(gi, xi)| *gi += r * xi / n);
                }
            }
            for (wc, gc) in w.iter_mut().zip(&grad) {
                for (wi, gi) in wc.iter_mut().zip(gc) {
                    *wi -= lr * (gi + l2 * *wi);
                }
            }
        }
        Ok(Self { embedder, weights: w })
    }
}

impl<E: Embedder> Classifier for LogisticCaptionClassifier<E> {
    fn n_classes(&self) -> usize {
        self.weights.len()
    }

    fn predict_proba(&self, tokens: &TokenSequence) -> Vec<f64> {
        let mut x = self.embedder.embed(tokens);
        x.push(1.0);
        softmax(&self.weights.iter().map(|w| w.iter().zip(&x).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>())
    }
}

/// A clip as seen by the evaluator.
#[derive(Debug, Clone)]
pub struct EvalClip {
    pub clip_id: String,
    pub caption: u32,
    pub tokens: TokenSequence,
    pub tempo_bpm: f64,
    pub beats: BeatGrid,
}

impl EvalClip {
    fn from_manifest(manifest: &Manifest, code_rate_hz: f64) -> Result<Vec<Self>> {
        manifest
            .entries
            .iter()
            .map(|e| {
                Ok(Self {
                    clip_id: e.clip_id.clone(),
                    caption: e.caption_id,
                    tokens: read_tokens(&manifest.resolve(&e.token_path), code_rate_hz)?,
                    tempo_bpm: e.tempo_bpm,
                    beats: BeatGrid::new(e.beat_times_s.clone(), e.duration_s)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    /// `None` when fewer than two beats were generated.
    pub estimated_bpm: Option<f64>,
    pub reference_bpm: f64,
    pub tempo_error: f64,
    pub beat_precision: f64,
    pub beat_recall: f64,
    pub beat_f1: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub tempo_error_mean: f64,
    pub tempo_error_median: f64,
    pub beat_f1_mean: f64,
    pub frechet: f64,
    pub kl_mean: f64,
    pub inception_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_clips: usize,
    pub beat_tolerance_s: f64,
    pub aggregate: AggregateMetrics,
    pub clips: Vec<ClipMetrics>,
}

impl EvalReport {
    pub fn all_finite(&self) -> bool {
        let a = &self.aggregate;
        [a.tempo_error_mean, a.tempo_error_median, a.beat_f1_mean, a.frechet, a.kl_mean, a.inception_score]
            .iter()
            .all(|v| v.is_finite())
            && self
                .clips
                .iter()
                .all(|c| c.tempo_error.is_finite() && c.beat_f1.is_finite() && c.kl.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
    }

    /// Aligned plain-text table, rhythm columns then distribution columns.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>9} {:>9} {:>9} {:>8} {:>8}", "clip", "est_bpm", "ref_bpm", "tempo_err", "beat_f1", "kl");
        for c in &self.clips {
            let est = c.estimated_bpm.map_or("-".to_string(), |b| format!("{b:.2}"));
            let _ = writeln!(
                s,
                "{:<12} {:>9} {:>9.2} {:>9.2} {:>8.3} {:>8.4}",
                c.clip_id, est, c.reference_bpm, c.tempo_error, c.beat_f1, c.kl
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            s,
            "\nrhythm: tempo error mean {:.3} / median {:.3} bpm, beat F1 {:.3}",
            a.tempo_error_mean, a.tempo_error_median, a.beat_f1_mean
        );
        let _ = writeln!(
            s,
            "quality: Frechet {:.4}, KL {:.4}, IS {:.4}",
            a.frechet, a.kl_mean, a.inception_score
        );
        s
    }
}

struct PerClip {
    metrics: ClipMetrics,
    gen_embedding: Vec<f64>,
    ref_embedding: Vec<f64>,
    gen_probs: Vec<f64>,
}

fn score_clip(generated: &EvalClip, reference: &EvalClip, embedder: &dyn Embedder, classifier: &dyn Classifier) -> PerClip {
    let grid = extract_beats(&generated.tokens);
    let (estimated_bpm, tempo_error) = grid_tempo_error(&grid, reference.tempo_bpm);
    let beats = beat_f1(&grid, &reference.beats, DEFAULT_BEAT_TOLERANCE_S);
    let gen_probs = classifier.predict_proba(&generated.tokens);
    let ref_probs = classifier.predict_proba(&reference.tokens);
    PerClip {
        metrics: ClipMetrics {
            clip_id: reference.clip_id.clone(),
            estimated_bpm,
            reference_bpm: reference.tempo_bpm,
            tempo_error,
            beat_precision: beats.precision,
            beat_recall: beats.recall,
            beat_f1: beats.f1,
            kl: kl_divergence(&ref_probs, &gen_probs),
        },
        gen_embedding: embedder.embed(&generated.tokens),
        ref_embedding: embedder.embed(&reference.tokens),
        gen_probs,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Scores clip-aligned generated and reference sets. Work is split over
/// `jobs` threads; results are reduced in clip order, so the report does
/// not depend on `jobs`. Without a classifier, a caption classifier is
/// fitted on the reference tokens.
pub fn evaluate_clips(
    generated: &[EvalClip],
    reference: &[EvalClip],
    embedder: &dyn Embedder,
    classifier: Option<&dyn Classifier>,
    jobs: usize,
) -> Result<EvalReport> {
    if generated.len() != reference.len() {
        return Err(Error::Pairing(format!(
            "{} generated clips for {} reference clips",
            generated.len(),
            reference.len()
        )));
    }
    if let Some((g, r)) = generated.iter().zip(reference).find(|(g, r)| g.clip_id != r.clip_id) {
        return Err(Error::Pairing(format!("generated clip `{}` paired with reference `{}`", g.clip_id, r.clip_id)));
    }
    if reference.len() < 2 {
        return Err(Error::Input("evaluation needs at least 2 clips".into()));
    }
    let fitted;
    let classifier: &dyn Classifier = match classifier {
        Some(c) => c,
        None => {
            let examples: Vec<(&TokenSequence, u32)> = reference.iter().map(|c| (&c.tokens, c.caption)).collect();
            let n_classes = reference.iter().map(|c| c.caption as usize + 1).max().unwrap_or(1);
            fitted = LogisticCaptionClassifier::fit(NgramEmbedder::default(), &examples, n_classes)?;
            &fitted
        }
    };

    let jobs = jobs.clamp(1, reference.len());
    let chunk = reference.len().div_ceil(jobs);
    let pairs: Vec<(&EvalClip, &EvalClip)> = generated.iter().zip(reference).collect();
    let per_clip: Vec<PerClip> = std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|(g, r)| score_clip(g, r, embedder, classifier)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    });

    let gen_set = EmbeddingSet::new(per_clip.iter().map(|p| p.gen_embedding.clone()).collect())?;
    let ref_set = EmbeddingSet::new(per_clip.iter().map(|p| p.ref_embedding.clone()).collect())?;
    let probs = ClassProbMatrix::new(per_clip.iter().map(|p| p.gen_probs.clone()).collect())?;
    let mut errors: Vec<f64> = per_clip.iter().map(|p| p.metrics.tempo_error).collect();
    let aggregate = AggregateMetrics {
        tempo_error_mean: mean(errors.iter().copied()),
        tempo_error_median: super::median(&mut errors),
        beat_f1_mean: mean(per_clip.iter().map(|p| p.metrics.beat_f1)),
        frechet: frechet_distance(&ref_set, &gen_set)?,
        kl_mean: mean(per_clip.iter().map(|p| p.metrics.kl)),
        inception_score: inception_score(&probs),
    };
    Ok(EvalReport {
        n_clips: per_clip.len(),
        beat_tolerance_s: DEFAULT_BEAT_TOLERANCE_S,
        aggregate,
        clips: per_clip.into_iter().map(|p| p.metrics).collect(),
    })
}

/// Loads both manifests' tokens and evaluates them pairwise in order.
pub fn evaluate_run(
    generated: &Manifest,
    reference: &Manifest,
    embedder: &dyn Embedder,
    classifier: Option<&dyn Classifier>,
    code_rate_hz: f64,
    jobs: usize,
) -> Result<EvalReport> {
    let g = EvalClip::from_manifest(generated, code_rate_hz)?;
    let r = EvalClip::from_manifest(reference, code_rate_hz)?;
    evaluate_clips(&g, &r, embedder, classifier, jobs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::MARKER_CODE;

    fn clip(id: &str, bpm: f64, caption: u32, filler: u32) -> EvalClip {
        let period = (60.0 / bpm * 50.0).round() as usize;
        let codes: Vec<u32> = (0..500).map(|f| if f % period == 0 { MARKER_CODE } else { filler + (f % 3) as u32 }).collect();
        let tokens = TokenSequence::new(codes, 50.0);
        let beats = extract_beats(&tokens);
        EvalClip {
            clip_id: id.into(),
            caption,
            tokens,
            tempo_bpm: bpm,
            beats,
        }
    }

    fn reference() -> Vec<EvalClip> {
        vec![clip("a", 120.0, 0, 2), clip("b", 150.0, 1, 9), clip("c", 100.0, 0, 3), clip("d", 125.0, 1, 10)]
    }

    #[test]
    fn identical_sets_score_perfectly() {
        let r = reference();
        let report = evaluate_clips(&r, &r, &NgramEmbedder::default(), None, 1).unwrap();
        assert!(report.clips.iter().all(|c| c.tempo_error < 1e-9 && c.beat_f1 == 1.0));
        assert!(report.aggregate.frechet.abs() < 1e-8);
        assert!(report.aggregate.kl_mean.abs() < 1e-12);
        assert!(report.all_finite());
    }

    #[test]
    fn job_count_does_not_change_report() {
        let r = reference();
        let g = vec![clip("a", 100.0, 0, 2), clip("b", 120.0, 1, 4), clip("c", 90.0, 0, 9), clip("d", 130.0, 1, 3)];
        let one = evaluate_clips(&g, &r, &NgramEmbedder::default(), None, 1).unwrap();
        let three = evaluate_clips(&g, &r, &NgramEmbedder::default(), None, 3).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn misaligned_sets_are_pairing_errors() {
        let r = reference();
        assert!(matches!(
            evaluate_clips(&r[..3], &r, &NgramEmbedder::default(), None, 1),
            Err(Error::Pairing(_))
        ));
        let mut g = r.clone();
        g.swap(0, 1);
        assert!(matches!(evaluate_clips(&g, &r, &NgramEmbedder::default(), None, 1), Err(Error::Pairing(_))));
    }

    #[test]
    fn classifier_separates_captions() {
        let r = reference();
        let examples: Vec<(&TokenSequence, u32)> = r.iter().map(|c| (&c.tokens, c.caption)).collect();
        let clf = LogisticCaptionClassifier::fit(NgramEmbedder::default(), &examples, 2).unwrap();
        for c in &r {
            let p = clf.predict_proba(&c.tokens);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p[c.caption as usize] > 0.5);
        }
    }

    #[test]
    fn report_round_trips_as_json() {
        let r = reference();
        let report = evaluate_clips(&r, &r, &NgramEmbedder::default(), None, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), report);
        assert!(report.to_table().contains("beat F1"));
    }
}
