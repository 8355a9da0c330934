//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use uwb_rff::embedding::Embedding;

/// Direct O(N²) windowed DFT with the phase referenced to the absolute
/// sample index; output is `[frame][bin]`.
pub fn stft_direct(x: &[Complex64], window_len: usize, hop: usize) -> Vec<Complex64> {
    let n = window_len;
    let w = |i: usize| {
        if n == 1 {
            1.0
        } else {
            0.5 * (1.0 - (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        }
    };
    let frames = (x.len() - n) / hop + 1;
    let mut out = Vec::with_capacity(frames * n);
    for t in 0..frames {
        for k in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                let s = t * hop + i;
                let angle = -2.0 * PI * (k * s) as f64 / n as f64;
                acc += x[s] * w(i) * Complex64::from_polar(1.0, angle);
            }
            out.push(acc);
        }
    }
    out
}

pub fn random_trace(len: usize, rng: &mut impl Rng) -> Vec<Complex64> {
    (0..len)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Embedding {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(e) = Embedding::normalized(v) {
            return e;
        }
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// CMC(1..=G) by sorting every reference for every query; ties rank the
/// smaller id first.
pub fn cmc_brute_force(refs: &[(u16, Vec<f64>)], queries: &[Vec<f64>], labels: &[u16]) -> Vec<f64> {
    let g = refs.len();
    let mut hits = vec![0usize; g];
    for (q, &truth) in queries.iter().zip(labels) {
        let mut scored: Vec<(f64, u16)> = refs.iter().map(|(id, r)| (cos(q, r), *id)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let rank = scored.iter().position(|&(_, id)| id == truth).expect("query id in gallery");
        for h in hits.iter_mut().skip(rank) {
            *h += 1;
        }
    }
    hits.iter().map(|&h| h as f64 / queries.len() as f64).collect()
}

/// Probability that a random same-id pair is closer than a random
/// different-id pair (ties count one half), by enumerating every pair of pairs.
pub fn auroc_brute_force(distance: &[f64], same: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &di) in distance.iter().enumerate() {
        if !same[i] {
            continue;
        }
        for (j, &dj) in distance.iter().enumerate() {
            if same[j] {
                continue;
            }
            den += 1.0;
            num += if di < dj {
                1.0
            } else if di == dj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}
