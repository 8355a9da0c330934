use crate::embedding::{dot, norm, Embedding};
use crate::error::{Error, Result};

const TOL: f64 = 1e-9;
const MAX_ITERS: usize = 10_000;

/// Coordinates on the two leading principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub coords: Vec<[f64; 2]>,
    /// Variance captured by each axis.
    pub variance: [f64; 2],
    pub total_variance: f64,
}

impl Pca2 {
    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance > 0.0 {
            (self.variance[0] + self.variance[1]) / self.total_variance
        } else {
            0.0
        }
    }
}

fn leading_eigvec(cov: &[f64], d: usize) -> (Vec<f64>, f64) {
    // deterministic, non-symmetric start so no axis is missed by construction
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 * 0.618_033_988_75).fract()).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERS {
        let w: Vec<f64> = cov.chunks(d).map(|row| dot(row, &v)).collect();
        let n = norm(&w);
        if n == 0.0 {
            return (v, 0.0);
        }
        let w: Vec<f64> = w.into_iter().map(|x| x / n).collect();
        let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        lambda = n;
        if delta < TOL {
            break;
        }
    }
    (v, lambda)
}

/// Mean-centered projection onto the top two principal components, found by
/// power iteration with deflation.
pub fn pca2(embeddings: &[Embedding]) -> Result<Pca2> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::invalid("pca needs at least two embeddings"));
    }
    let d = embeddings[0].dim();
    if embeddings.iter().any(|e| e.dim() != d) || d < 2 {
        return Err(Error::invalid("embeddings must share a dimension of at least 2"));
    }
    let mut mean = vec![0.0; d];
    for e in embeddings {
        mean.iter_mut().zip(e.as_slice()).for_each(|(m, x)| *m += x / n as f64);
    }
    let centered: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.as_slice().iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for x in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += x[i] * x[j] / n as f64;
            }
        }
    }
    let total_variance = (0..d).map(|i| cov[i * d + i]).sum();
    let (v1, l1) = leading_eigvec(&cov, d);
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, l2) = leading_eigvec(&cov, d);
    let coords = centered.iter().map(|x| [dot(x, &v1), dot(x, &v2)]).collect();
    Ok(Pca2 {
        coords,
        variance: [l1, l2],
        total_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn points_in_a_plane_are_reconstructed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = ([0.6, 0.0, 0.8, 0.0], [0.0, 0.0, 0.0, 1.0]);
        let embs: Vec<Embedding> = (0..40)
            .map(|_| {
                let t: f64 = rng.random_range(0.0..3.0);
                Embedding::from_unit((0..4).map(|i| t.cos() * a[i] + t.sin() * b[i]).collect()).unwrap()
            })
            .collect();
        let p = pca2(&embs).unwrap();
        assert!((p.explained_ratio() - 1.0).abs() < 1e-9);
        // rebuild each point from its two coordinates
        let n = embs.len() as f64;
        let mean: Vec<f64> = (0..4).map(|i| embs.iter().map(|e| e.as_slice()[i]).sum::<f64>() / n).collect();
        let sq = |v: &[f64]| dot(v, v);
        let axis = |k: usize| -> Vec<f64> {
            // least-squares axis from coordinates: Σ c_k x / Σ c_k²
            let ck: Vec<f64> = p.coords.iter().map(|c| c[k]).collect();
            (0..4)
                .map(|i| embs.iter().zip(&ck).map(|(e, c)| c * (e.as_slice()[i] - mean[i])).sum::<f64>() / sq(&ck))
                .collect()
        };
        let (v1, v2) = (axis(0), axis(1));
        for (e, c) in embs.iter().zip(&p.coords) {
            let r: Vec<f64> = (0..4).map(|i| mean[i] + c[0] * v1[i] + c[1] * v2[i] - e.as_slice()[i]).collect();
            assert!(norm(&r) < 1e-6, "residual {}", norm(&r));
        }
    }

    #[test]
    fn duplicates_share_coordinates() {
        let e = Embedding::normalized(vec![0.2, 0.9, -0.1]).unwrap();
        let f = Embedding::normalized(vec![-0.5, 0.1, 0.7]).unwrap();
        let p = pca2(&[e.clone(), f, e]).unwrap();
        assert_eq!(p.coords[0], p.coords[2]);
    }

    #[test]
    fn isotropic_data_spreads_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let embs: Vec<Embedding> = (0..4000)
            .map(|_| {
                let v: Vec<f64> = (0..192).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
                Embedding::normalized(v).unwrap()
            })
            .collect();
        let p = pca2(&embs).unwrap();
        let ratio = p.explained_ratio();
        // sampling noise inflates the top eigenvalues above the 2/192 ideal
        assert!(ratio > 2.0 / 192.0 && ratio < 2.0 * 2.0 / 192.0, "{ratio}");
    }
}
