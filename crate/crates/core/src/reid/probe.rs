use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::gemm::{gemm, Layout};
use crate::autodiff::softmax_rows;
use crate::embedding::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 500, lr: 0.1 }
    }
}

/// Multinomial logistic regression on frozen embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub classes: Vec<u16>,
    dim: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

fn stack(embeddings: &[Embedding]) -> Result<(Vec<f64>, usize)> {
    let dim = embeddings.first().map(Embedding::dim).unwrap_or(0);
    if embeddings.iter().any(|e| e.dim() != dim) {
        return Err(Error::invalid("embeddings differ in dimension"));
    }
    Ok((embeddings.iter().flat_map(|e| e.as_slice().iter().copied()).collect(), dim))
}

/// Full-batch gradient descent from zero weights; deterministic.
pub fn linear_probe(embeddings: &[Embedding], labels: &[u16], cfg: &ProbeConfig) -> Result<LinearProbe> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::invalid("probe needs a nonempty, labeled training set"));
    }
    let classes: Vec<u16> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let (x, d) = stack(embeddings)?;
    let (n, k) = (embeddings.len(), classes.len());
    let y: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("collected above")).collect();

    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let mut logits = vec![0.0; n * k];
    let mut dw = vec![0.0; d * k];
    for _ in 0..cfg.epochs {
        gemm(n, d, k, &x, Layout::Normal, &w, Layout::Normal, &mut logits, false);
        logits.chunks_mut(k).for_each(|row| row.iter_mut().zip(&b).for_each(|(v, bj)| *v += bj));
        let mut g = softmax_rows(&logits, k);
        for (row, &yi) in g.chunks_mut(k).zip(&y) {
            row[yi] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
        gemm(d, n, k, &x, Layout::Transposed, &g, Layout::Normal, &mut dw, false);
        w.iter_mut().zip(&dw).for_each(|(wi, gi)| *wi -= cfg.lr * gi);
        for row in g.chunks(k) {
            b.iter_mut().zip(row).for_each(|(bj, gj)| *bj -= cfg.lr * gj);
        }
    }
    if w.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::numeric("probe weights diverged"));
    }
    Ok(LinearProbe { classes, dim: d, w, b })
}

impl LinearProbe {
    /// Predicted device id per embedding; ties go to the lowest id.
    pub fn predict(&self, embeddings: &[Embedding]) -> Result<Vec<u16>> {
        let (x, d) = stack(embeddings)?;
        if !embeddings.is_empty() && d != self.dim {
            return Err(Error::invalid(format!("probe expects {}-d embeddings, got {d}", self.dim)));
        }
        let (n, k) = (embeddings.len(), self.classes.len());
        let mut logits = vec![0.0; n * k];
        gemm(n, d, k, &x, Layout::Normal, &self.w, Layout::Normal, &mut logits, false);
        Ok(logits
            .chunks(k)
            .map(|row| {
                let scores: Vec<f64> = row.iter().zip(&self.b).map(|(v, b)| v + b).collect();
                self.classes[crate::fusion::argmax(&scores)]
            })
            .collect())
    }
}

/// Unweighted mean of per-class F1 over every label that occurs as truth or prediction.
pub fn macro_f1(truth: &[u16], pred: &[u16]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::invalid("F1 needs equally many, nonzero truths and predictions"));
    }
    let labels: BTreeSet<u16> = truth.iter().chain(pred).copied().collect();
    let mut total = 0.0;
    for &c in &labels {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
        let fne = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
        if tp > 0.0 {
            let (precision, recall) = (tp / (tp + fp), tp / (tp + fne));
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / labels.len() as f64)
}

/// Trains a probe on one set and scores macro-F1 on another.
/// Returns the score and the test predictions.
pub fn linear_probe_cf1(
    train: &[Embedding],
    train_labels: &[u16],
    test: &[Embedding],
    test_labels: &[u16],
    cfg: &ProbeConfig,
) -> Result<(f64, Vec<u16>)> {
    let probe = linear_probe(train, train_labels, cfg)?;
    if let Some(missing) = test_labels.iter().find(|l| probe.classes.binary_search(l).is_err()) {
        return Err(Error::invalid(format!("test device {missing} never appears in probe training")));
    }
    let pred = probe.predict(test)?;
    Ok((macro_f1(test_labels, &pred)?, pred))
}

/// Counts indexed `[true][predicted]` over `labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<u16>,
    pub counts: Vec<Vec<usize>>,
}

pub fn confusion_matrix(truth: &[u16], pred: &[u16]) -> Result<Confusion> {
    if truth.len() != pred.len() {
        return Err(Error::invalid("truths and predictions differ in length"));
    }
    let labels: Vec<u16> = truth.iter().chain(pred).copied().collect::<BTreeSet<_>>().into_iter().collect();
    let idx = |l: &u16| labels.binary_search(l).expect("collected above");
    let mut counts = vec![vec![0; labels.len()]; labels.len()];
    truth.iter().zip(pred).for_each(|(t, p)| counts[idx(t)][idx(p)] += 1);
    Ok(Confusion { labels, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn separable_classes_score_one() {
        let train = [unit(&[1.0, 0.1]), unit(&[1.0, -0.1]), unit(&[-1.0, 0.1]), unit(&[-1.0, -0.2])];
        let test = [unit(&[0.9, 0.3]), unit(&[-0.8, 0.0])];
        let (f1, pred) = linear_probe_cf1(&train, &[4, 4, 7, 7], &test, &[4, 7], &ProbeConfig::default()).unwrap();
        assert_eq!(pred, vec![4, 7]);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn hand_computed_macro_f1() {
        // class 0: tp 2, fn 0, fp 1 → P 2/3, R 1, F1 0.8
        // class 1: tp 1, fn 1, fp 0 → P 1, R 1/2, F1 2/3
        let f1 = macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        assert!((f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn unseen_test_class_rejected() {
        let e = [unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let r = linear_probe_cf1(&e, &[0, 1], &e, &[0, 2], &ProbeConfig::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn confusion_counts() {
        let c = confusion_matrix(&[3, 3, 5, 9], &[3, 5, 5, 3]).unwrap();
        assert_eq!(c.labels, vec![3, 5, 9]);
        assert_eq!(c.counts, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 0]]);
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut sample = |n: usize| -> (Vec<Embedding>, Vec<u16>) {
            let e = (0..n)
                .map(|_| unit(&(0..16).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect();
            let l = (0..n).map(|_| rng.random_range(0..13u16)).collect();
            (e, l)
        };
        let (tr, trl) = sample(2600);
        let (te, tel) = sample(2600);
        let (f1, _) = linear_probe_cf1(&tr, &trl, &te, &tel, &ProbeConfig::default()).unwrap();
        assert!((f1 - 1.0 / 13.0).abs() < 0.03, "{f1}");
    }
}
