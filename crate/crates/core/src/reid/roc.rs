use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};

/// Cosine distances of embedding pairs and whether each pair shares an id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub distance: Vec<f64>,
    pub same: Vec<bool>,
}

impl PairSet {
    fn push(&mut self, a: &Embedding, b: &Embedding, same: bool) {
        self.distance.push((1.0 - a.cosine(b)).clamp(0.0, 2.0));
        self.same.push(same);
    }

    pub fn positives(&self) -> usize {
        self.same.iter().filter(|&&s| s).count()
    }

    pub fn negatives(&self) -> usize {
        self.same.len() - self.positives()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// All pairs when there are at most `max_pairs`, otherwise a seeded sample
/// of `max_pairs / 2` same-id and as many different-id pairs.
pub fn pair_distances(embeddings: &[Embedding], labels: &[u16], max_pairs: usize, seed: u64) -> Result<PairSet> {
    let n = embeddings.len();
    if n != labels.len() {
        return Err(Error::invalid("embeddings and labels differ in length"));
    }
    let total = n * n.saturating_sub(1) / 2;
    let mut pairs = PairSet::default();
    if total <= max_pairs {
        for i in 0..n {
            for j in i + 1..n {
                pairs.push(&embeddings[i], &embeddings[j], labels[i] == labels[j]);
            }
        }
    } else {
        let mut by_id: std::collections::BTreeMap<u16, Vec<usize>> = Default::default();
        labels.iter().enumerate().for_each(|(i, &l)| by_id.entry(l).or_default().push(i));
        let has_pos = by_id.values().any(|v| v.len() >= 2);
        let has_neg = by_id.len() >= 2;
        if !has_pos || !has_neg {
            return Err(Error::invalid("need at least one same-id and one different-id pair"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = (max_pairs / 2).max(1);
        let mut taken = 0;
        while taken < half {
            let i = rng.random_range(0..n);
            let group = &by_id[&labels[i]];
            let j = group[rng.random_range(0..group.len())];
            if j != i {
                pairs.push(&embeddings[i], &embeddings[j], true);
                taken += 1;
            }
        }
        taken = 0;
        while taken < half {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if labels[i] != labels[j] {
                pairs.push(&embeddings[i], &embeddings[j], false);
                taken += 1;
            }
        }
    }
    if pairs.positives() == 0 || pairs.negatives() == 0 {
        return Err(Error::invalid("need at least one same-id and one different-id pair"));
    }
    Ok(pairs)
}

/// TPR/FPR when pairs with distance ≤ threshold are called "same", for
/// `num_thresholds` evenly spaced thresholds in [0, 2], preceded by a
/// threshold below every distance so the curve starts at (0, 0).
pub fn roc_curve(pairs: &PairSet, num_thresholds: usize) -> Result<RocCurve> {
    let (p, n) = (pairs.positives(), pairs.negatives());
    if p == 0 || n == 0 {
        return Err(Error::invalid("need at least one same-id and one different-id pair"));
    }
    if num_thresholds < 2 {
        return Err(Error::invalid("need at least two thresholds"));
    }
    let mut order: Vec<usize> = (0..pairs.distance.len()).collect();
    order.sort_by(|&a, &b| pairs.distance[a].total_cmp(&pairs.distance[b]));
    let mut points = vec![RocPoint {
        threshold: -1.0,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp, mut next) = (0usize, 0usize, 0usize);
    for t in 0..num_thresholds {
        let threshold = 2.0 * t as f64 / (num_thresholds - 1) as f64;
        while next < order.len() && pairs.distance[order[next]] <= threshold {
            if pairs.same[order[next]] {
                tp += 1;
            } else {
                fp += 1;
            }
            next += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    Ok(RocCurve { points })
}

/// Area under the ROC curve traced at every distinct distance, by the
/// trapezoid rule. Equals the probability that a same-id pair is closer than
/// a different-id pair, counting ties as one half.
pub fn auroc_exact(pairs: &PairSet) -> Result<f64> {
    let (p, n) = (pairs.positives(), pairs.negatives());
    if p == 0 || n == 0 {
        return Err(Error::invalid("need at least one same-id and one different-id pair"));
    }
    let mut order: Vec<usize> = (0..pairs.distance.len()).collect();
    order.sort_by(|&a, &b| pairs.distance[a].total_cmp(&pairs.distance[b]));
    let (mut area, mut tp) = (0.0, 0usize);
    let mut i = 0;
    while i < order.len() {
        let d = pairs.distance[order[i]];
        let (mut dtp, mut dfp) = (0usize, 0usize);
        while i < order.len() && pairs.distance[order[i]] == d {
            if pairs.same[order[i]] {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        area += dfp as f64 * (tp as f64 + dtp as f64 / 2.0);
        tp += dtp;
    }
    Ok(area / (p as f64 * n as f64))
}

pub fn roc_and_auroc(
    embeddings: &[Embedding],
    labels: &[u16],
    num_thresholds: usize,
    max_pairs: usize,
    seed: u64,
) -> Result<(RocCurve, f64)> {
    let pairs = pair_distances(embeddings, labels, max_pairs, seed)?;
    Ok((roc_curve(&pairs, num_thresholds)?, auroc_exact(&pairs)?))
}
