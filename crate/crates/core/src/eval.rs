//! Baseline metrics and a logistic-regression reference model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchprep::WindowLabel;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("labels must contain both classes")]
    DegenerateLabels,
    #[error("non-finite score at position {0}")]
    NonFiniteScore(usize),
    #[error("training diverged: loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("no training samples")]
    Empty,
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    if pos == 0 || pos == labels.len() {
        return Err(EvalError::DegenerateLabels);
    }
    Ok(())
}

/// Exact pair counts behind AUROC: pairs (positive, negative) where the
/// positive scores higher, pairs with equal scores, and the class sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankCounts {
    pub concordant: u64,
    pub ties: u64,
    pub n_pos: u64,
    pub n_neg: u64,
}

impl RankCounts {
    pub fn auroc(&self) -> f64 {
        (self.concordant as f64 + 0.5 * self.ties as f64) / (self.n_pos as f64 * self.n_neg as f64)
    }
}

/// Sort-based pair counting in O(n log n).
pub fn rank_counts(scores: &[f64], labels: &[u8]) -> Result<RankCounts> {
    check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut c = RankCounts {
        concordant: 0,
        ties: 0,
        n_pos: 0,
        n_neg: 0,
    };
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] != 0 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        // Every negative seen so far scores strictly lower than this block.
        c.concordant += p * c.n_neg;
        c.ties += p * n;
        c.n_pos += p;
        c.n_neg += n;
        i = j;
    }
    Ok(c)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(rank_counts(scores, labels)?.auroc())
}

/// Average precision with tied scores treated as one threshold:
/// `Σ (R_k − R_{k−1}) · P_k` over distinct thresholds in decreasing order.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let total_pos = labels.iter().filter(|&&l| l != 0).count() as f64;
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut block_tp = 0;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            block_tp += usize::from(labels[idx[j]] != 0);
            j += 1;
        }
        tp += block_tp;
        seen += j - i;
        ap += (block_tp as f64 / total_pos) * (tp as f64 / seen as f64);
        i = j;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Threshold metrics with `score >= threshold` predicted positive. Precision
/// and recall are 0 when their denominators are, and so is F1.
pub fn classify_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClassifyMetrics> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassifyMetrics {
        accuracy: ratio(tp + tn, scores.len()),
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRegOptions {
    pub l2: f64,
    /// Step size; `None` uses the inverse of a Lipschitz bound on the
    /// gradient, estimated by power iteration.
    pub learning_rate: Option<f64>,
    pub iterations: usize,
}

impl Default for LogRegOptions {
    fn default() -> Self {
        LogRegOptions {
            l2: 1e-3,
            learning_rate: None,
            iterations: 300,
        }
    }
}

/// Largest eigenvalue of `XᵀX / n` for `X` with a trailing bias column of
/// ones, by power iteration from a fixed start.
pub fn gram_spectral_norm(xs: &[Vec<f64>], iterations: usize) -> f64 {
    use rayon::prelude::*;
    let d = xs.first().map_or(0, Vec::len) + 1;
    let n = xs.len().max(1) as f64;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let parts: Vec<Vec<f64>> = xs
            .par_chunks(512)
            .map(|chunk| {
                let mut acc = vec![0.0; d];
                for x in chunk {
                    let xv = x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d - 1];
                    for (a, xi) in acc.iter_mut().zip(x) {
                        *a += xv * xi;
                    }
                    acc[d - 1] += xv;
                }
                acc
            })
            .collect();
        let mut w = vec![0.0; d];
        for p in parts {
            for (a, b) in w.iter_mut().zip(p) {
                *a += b;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt() / n;
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.iter().map(|x| x / (norm * n)).collect();
    }
    lambda
}

/// Column-wise z-scoring fitted on training rows. Constant columns are
/// centred only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(xs: &[Vec<f64>]) -> Self {
        let d = xs.first().map_or(0, Vec::len);
        let n = xs.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }

    pub fn predict_all(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        use rayon::prelude::*;
        xs.par_iter().map(|x| self.predict(x)).collect()
    }
}

/// Full-batch gradient descent on mean log-loss plus `l2/2 · |w|²`, starting
/// from zero weights. The result depends only on the data and options.
pub fn train_logreg(xs: &[Vec<f64>], ys: &[u8], opts: &LogRegOptions) -> Result<LogisticModel> {
    use rayon::prelude::*;
    if xs.is_empty() {
        return Err(EvalError::Empty);
    }
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch {
            scores: xs.len(),
            labels: ys.len(),
        });
    }
    let d = xs[0].len();
    let n = xs.len() as f64;
    let step = match opts.learning_rate {
        Some(lr) => lr,
        None => 1.0 / (0.25 * gram_spectral_norm(xs, 20) + opts.l2).max(1e-12),
    };
    let mut m = LogisticModel {
        weights: vec![0.0; d],
        bias: 0.0,
    };
    const CHUNK: usize = 512;
    for it in 0..opts.iterations {
        // Per-chunk partial sums reduced in chunk order keep the result
        // independent of the thread count.
        let partials: Vec<(Vec<f64>, f64, f64)> = xs
            .par_chunks(CHUNK)
            .zip(ys.par_chunks(CHUNK))
            .map(|(xc, yc)| {
                let mut g = vec![0.0; d];
                let (mut gb, mut loss) = (0.0, 0.0);
                for (x, &y) in xc.iter().zip(yc) {
                    let p = m.predict(x);
                    let r = p - f64::from(y);
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi += r * xi;
                    }
                    gb += r;
                    let p = p.clamp(1e-15, 1.0 - 1e-15);
                    loss -= if y != 0 { p.ln() } else { (1.0 - p).ln() };
                }
                (g, gb, loss)
            })
            .collect();
        let mut g = vec![0.0; d];
        let (mut gb, mut loss) = (0.0, 0.0);
        for (pg, pb, pl) in partials {
            for (a, b) in g.iter_mut().zip(pg) {
                *a += b;
            }
            gb += pb;
            loss += pl;
        }
        if !loss.is_finite() {
            return Err(EvalError::NonFiniteLoss(it));
        }
        for (w, gi) in m.weights.iter_mut().zip(&g) {
            *w -= step * (gi / n + opts.l2 * *w);
        }
        m.bias -= step * gb / n;
        if m.weights.iter().any(|w| !w.is_finite()) || !m.bias.is_finite() {
            return Err(EvalError::NonFiniteLoss(it));
        }
    }
    Ok(m)
}

/// Unweighted mean of one-vs-rest AUROC over the classes present in `labels`.
/// Classes absent from the labels are skipped; fewer than two present classes
/// is an error.
pub fn macro_auroc(probs: &[[f64; 4]], labels: &[WindowLabel]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: probs.len(),
            labels: labels.len(),
        });
    }
    let mut aucs = Vec::new();
    for class in WindowLabel::ALL {
        let y: Vec<u8> = labels.iter().map(|&l| u8::from(l == class)).collect();
        let s: Vec<f64> = probs.iter().map(|p| p[class.index()]).collect();
        match auroc(&s, &y) {
            Ok(a) => aucs.push(a),
            Err(EvalError::DegenerateLabels) => {}
            Err(e) => return Err(e),
        }
    }
    if aucs.len() < 2 {
        return Err(EvalError::DegenerateLabels);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// One-vs-rest logistic models; missing classes get a constant model.
pub fn train_one_vs_rest(xs: &[Vec<f64>], labels: &[WindowLabel], opts: &LogRegOptions) -> Result<Vec<LogisticModel>> {
    WindowLabel::ALL
        .iter()
        .map(|&class| {
            let y: Vec<u8> = labels.iter().map(|&l| u8::from(l == class)).collect();
            train_logreg(xs, &y, opts)
        })
        .collect()
}

/// Class probabilities from one-vs-rest scores, normalized to sum to 1.
pub fn predict_one_vs_rest(models: &[LogisticModel], x: &[f64]) -> [f64; 4] {
    let mut p = [0.0; 4];
    for (pi, m) in p.iter_mut().zip(models) {
        *pi = m.predict(x);
    }
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        p.map(|v| v / s)
    } else {
        [0.25; 4]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Quadratic pairwise oracle, returning the exact numerator in halves.
    fn pairwise(scores: &[f64], labels: &[u8]) -> (u64, u64) {
        let mut twice = 0;
        let mut pairs = 0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        twice += 2;
                    } else if scores[i] == scores[j] {
                        twice += 1;
                    }
                }
            }
        }
        (twice, pairs)
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.2, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.2], &[1, 1]), Err(EvalError::DegenerateLabels));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.2], &[0, 1]).unwrap(), 0.5);
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn threshold_examples() {
        let m = classify_metrics(&[0.6, 0.6, 0.4], &[1, 0, 1], 0.5).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.f1, 0.5);
        let none = classify_metrics(&[0.1, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!(none.f1, 0.0);
        assert_eq!(classify_metrics(&[0.5], &[1], 0.5).unwrap().accuracy, 1.0);
    }

    #[test]
    fn logreg_learns_a_separable_signal() {
        let xs: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 - 100.0) / 50.0, 1.0]).collect();
        let ys: Vec<u8> = (0..200).map(|i| u8::from(i >= 100)).collect();
        let m = train_logreg(&xs, &ys, &LogRegOptions::default()).unwrap();
        let s = m.predict_all(&xs);
        assert!(auroc(&s, &ys).unwrap() > 0.99);
        let again = train_logreg(&xs, &ys, &LogRegOptions::default()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn logreg_reports_divergence() {
        let xs = vec![vec![1e200], vec![-1e200]];
        let ys = vec![1, 0];
        let opts = LogRegOptions {
            learning_rate: Some(1e200),
            ..Default::default()
        };
        assert!(matches!(train_logreg(&xs, &ys, &opts), Err(EvalError::NonFiniteLoss(_))));
    }

    #[test]
    fn spectral_norm_of_a_known_matrix() {
        // Rows (1, 0) and (0, 1) with the bias column give XᵀX/2 with
        // eigenvalues 1.5, 0.5 and 0.
        let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((gram_spectral_norm(&xs, 100) - 1.5).abs() < 1e-9);
    }

    #[test]
    fn standardizer_centres_and_scales() {
        let xs = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(&xs);
        assert_eq!(s.apply(&xs[0]), vec![-1.0, 0.0]);
        assert_eq!(s.apply(&xs[1]), vec![1.0, 0.0]);
    }

    #[test]
    fn macro_auroc_perfect_and_degenerate() {
        let labels = [WindowLabel::Onset, WindowLabel::StayOff, WindowLabel::StayOn];
        let probs = [[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 0.0]];
        assert_eq!(macro_auroc(&probs, &labels).unwrap(), 1.0);
        assert_eq!(
            macro_auroc(&probs[..1], &labels[..1]),
            Err(EvalError::DegenerateLabels)
        );
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_oracle(
            data in proptest::collection::vec((0u8..6, 0u8..2), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            let (twice, pairs) = pairwise(&scores, &labels);
            match rank_counts(&scores, &labels) {
                Ok(c) => {
                    prop_assert_eq!(2 * c.concordant + c.ties, twice);
                    prop_assert_eq!(c.n_pos * c.n_neg, pairs);
                }
                Err(e) => {
                    prop_assert_eq!(e, EvalError::DegenerateLabels);
                    prop_assert_eq!(pairs, 0);
                }
            }
        }

        #[test]
        fn auroc_is_rank_invariant(
            data in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            let moved: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
            prop_assert_eq!(auroc(&scores, &labels).ok(), auroc(&moved, &labels).ok());
        }
    }
}
