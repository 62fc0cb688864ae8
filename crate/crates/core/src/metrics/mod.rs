//! Rhythm and distribution metrics over token sequences.

mod eval;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::decoder::{TokenSequence, MARKER_CODE};
use crate::error::{Error, Result};

pub use eval::{
    evaluate_clips, evaluate_run, AggregateMetrics, Classifier, ClipMetrics, CrossModalScorer, EvalClip, EvalReport,
    Embedder, LogisticCaptionClassifier, NgramEmbedder,
};

pub const DEFAULT_BEAT_TOLERANCE_S: f64 = 0.07;
pub const KL_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatGrid {
    pub times_s: Vec<f64>,
    pub duration_s: f64,
}

impl BeatGrid {
    pub fn new(times_s: Vec<f64>, duration_s: f64) -> Result<Self> {
        if times_s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("beat times must be strictly increasing".into()));
        }
        if times_s.iter().any(|&t| !(0.0..=duration_s).contains(&t)) {
            return Err(Error::Input(format!("beat times must lie in [0, {duration_s}]")));
        }
        Ok(Self { times_s, duration_s })
    }

    pub fn len(&self) -> usize {
        self.times_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_s.is_empty()
    }
}

/// Beat instants at every marker-code frame.
pub fn extract_beats(tokens: &TokenSequence) -> BeatGrid {
    BeatGrid {
        times_s: tokens
            .codes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == MARKER_CODE)
            .map(|(f, _)| f as f64 / tokens.rate_hz)
            .collect(),
        duration_s: tokens.duration_s(),
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `60 / median(inter-beat interval)`, folded into `[60, 200)` by octaves.
pub fn estimate_tempo(grid: &BeatGrid) -> Result<f64> {
    if grid.len() < 2 {
        return Err(Error::UndefinedTempo(grid.len()));
    }
    let mut intervals: Vec<f64> = grid.times_s.windows(2).map(|w| w[1] - w[0]).collect();
    let mut bpm = 60.0 / median(&mut intervals);
    while bpm >= 200.0 {
        bpm /= 2.0;
    }
    while bpm < 60.0 {
        bpm *= 2.0;
    }
    Ok(bpm)
}

/// `|est - ref|` after folding `est` into `[ref/sqrt 2, ref*sqrt 2)`.
pub fn tempo_error(est_bpm: f64, ref_bpm: f64) -> f64 {
    let (lo, hi) = (ref_bpm / 2f64.sqrt(), ref_bpm * 2f64.sqrt());
    let mut est = est_bpm;
    while est >= hi {
        est /= 2.0;
    }
    while est < lo {
        est *= 2.0;
    }
    (est - ref_bpm).abs()
}

/// Tempo error of a generated grid; a grid without a defined tempo scores
/// the largest foldable error, `ref * (sqrt 2 - 1)`.
pub fn grid_tempo_error(grid: &BeatGrid, ref_bpm: f64) -> (Option<f64>, f64) {
    match estimate_tempo(grid) {
        Ok(bpm) => (Some(bpm), tempo_error(bpm, ref_bpm)),
        Err(_) => (None, ref_bpm * (2f64.sqrt() - 1.0)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedy one-to-one matching in reference order: each reference beat takes
/// the nearest unmatched estimate within `tolerance_s`.
pub fn beat_f1(est: &BeatGrid, reference: &BeatGrid, tolerance_s: f64) -> BeatScores {
    let mut used = vec![false; est.len()];
    let mut hits = 0usize;
    for &r in &reference.times_s {
        let best = est
            .times_s
            .iter()
            .enumerate()
            .filter(|(i, &e)| !used[*i] && (e - r).abs() <= tolerance_s)
            .min_by(|a, b| (a.1 - r).abs().total_cmp(&(b.1 - r).abs()));
        if let Some((i, _)) = best {
            used[i] = true;
            hits += 1;
        }
    }
    let ratio = |n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    let (precision, recall) = (ratio(est.len()), ratio(reference.len()));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    BeatScores { precision, recall, f1 }
}

/// `n x D` clip-level embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    rows: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("embedding rows differ in width".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding set contains non-finite values".into()));
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.len(), self.dim());
        let x = DMatrix::from_fn(n, d, |i, j| self.rows[i][j]);
        let mean = x.row_mean().transpose();
        let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        (mean, cov)
    }
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_A - mu_B|^2 + tr(S_A + S_B - 2 (S_A S_B)^(1/2))`. The trace of the
/// product root is taken from the eigenvalues of the symmetric matrix
/// `S_A^(1/2) S_B S_A^(1/2)`, with round-off negatives clamped to zero.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim() != b.dim() || a.dim() == 0 {
        return Err(Error::Shape(format!("embedding widths {} and {} differ", a.dim(), b.dim())));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Input("each embedding set needs at least 2 rows".into()));
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    let root_a = symmetric_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_root;
    if !value.is_finite() {
        return Err(Error::NonFinite("Frechet distance".into()));
    }
    Ok(value.max(0.0))
}

/// `sum p_i ln(p_i / q_i)` with `0 ln 0 = 0`; zero entries of `q` are
/// replaced by `1e-10`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / if qi > 0.0 { qi } else { KL_EPSILON }).ln())
        .sum()
}

/// Rows of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbMatrix {
    rows: Vec<Vec<f64>>,
}

impl ClassProbMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || c == 0 {
            return Err(Error::Input("class probability matrix needs a row and a class".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != c || r.iter().any(|&v| !(v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!("row {i} is not a probability distribution over {c} classes")));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_classes(&self) -> usize {
        self.rows[0].len()
    }
}

/// `exp(mean_i KL(row_i || marginal))`.
pub fn inception_score(m: &ClassProbMatrix) -> f64 {
    let n = m.rows.len() as f64;
    let c = m.n_classes();
    let marginal: Vec<f64> = (0..c).map(|j| m.rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    (m.rows.iter().map(|r| kl_divergence(r, &marginal)).sum::<f64>() / n).exp()
}
