//! Minimal dense reverse-mode differentiation over real arrays.
//!
//! A [`Graph`] records operations on [`DiffArray`] values; trainable arrays
//! live in a [`ParamSet`] and receive gradients from [`Graph::backward`].

mod array;
mod checkpoint;
pub mod gemm;
mod gradcheck;
mod graph;
mod optim;

pub use array::{DiffArray, ParamId, ParamSet};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, guarded_relative_error};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::softmax_rows;
pub use optim::{adam_step, AdamState};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DiffArray {
        let n = shape.iter().product();
        DiffArray::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_value_and_gradient() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", DiffArray::scalar(3.0));
        let mut g = Graph::new();
        let xv = g.param(&ps, x).unwrap();
        let y = g.mul(xv, xv).unwrap();
        assert_eq!(g.scalar(y), 9.0);
        g.backward(y, &mut ps).unwrap();
        assert_eq!(ps.get(x).grad.as_deref(), Some(&[6.0][..]));
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", DiffArray::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let xv = g.param(&ps, x).unwrap();
        let r = g.relu(xv).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s, &mut ps).unwrap();
        assert_eq!(ps.get(x).grad.as_deref(), Some(&[0.0, 0.0, 1.0][..]));
    }

    #[test]
    fn two_layer_perceptron_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let w1 = ps.add("w1", random(&[6, 10], &mut rng));
        let b1 = ps.add("b1", random(&[10], &mut rng));
        let w2 = ps.add("w2", random(&[10, 4], &mut rng));
        let b2 = ps.add("b2", random(&[4], &mut rng));
        let x = random(&[5, 6], &mut rng);
        let labels = [0, 3, 1, 1, 2];
        let err = grad_check(
            &mut ps,
            |ps, g| {
                let xi = g.constant(x.clone())?;
                let (w1, b1, w2, b2) = (g.param(ps, w1)?, g.param(ps, b1)?, g.param(ps, w2)?, g.param(ps, b2)?);
                let h = g.matmul(xi, w1)?;
                let h = g.add(h, b1)?;
                let h = g.relu(h)?;
                let o = g.matmul(h, w2)?;
                let o = g.add(o, b2)?;
                g.cross_entropy(o, &labels)
            },
            1e-4,
            1,
        )
        .unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn linear_model_squared_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let w = ps.add("w", random(&[8, 3], &mut rng));
        let x = random(&[7, 8], &mut rng);
        let t = random(&[7, 3], &mut rng);
        let err = grad_check(
            &mut ps,
            |ps, g| {
                let (xi, ti) = (g.constant(x.clone())?, g.constant(t.clone())?);
                let wv = g.param(ps, w)?;
                let y = g.matmul(xi, wv)?;
                let d = g.sub(y, ti)?;
                let sq = g.mul(d, d)?;
                g.sum(sq)
            },
            1e-4,
            2,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut ps = ParamSet::new();
        ps.add("w", DiffArray::filled(&[60], 0.3));
        let err = grad_check(
            &mut ps,
            |_, g| g.constant(DiffArray::scalar(4.0)),
            1e-4,
            0,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn shape_mismatch_is_invalid_argument() {
        let mut g = Graph::new();
        let a = g.constant(DiffArray::zeros(&[2, 3])).unwrap();
        let b = g.constant(DiffArray::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::InvalidArgument(_))));
        let c = g.constant(DiffArray::zeros(&[4])).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let mut g = Graph::new();
        let a = g.constant(DiffArray::filled(&[2], 1e308)).unwrap();
        assert!(matches!(g.scale(a, 10.0), Err(Error::Numeric(_))));
        let z = g.constant(DiffArray::zeros(&[1, 4])).unwrap();
        assert!(matches!(g.l2_normalize(z), Err(Error::Numeric(_))));
    }

    #[test]
    fn l2_normalize_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let a = g.constant(random(&[4, 7], &mut rng)).unwrap();
        let n = g.l2_normalize(a).unwrap();
        for row in g.value(n).chunks(7) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let a = g.constant(random(&[2, 3, 4, 5], &mut rng)).unwrap();
        let p = g.permute(a, &[2, 0, 3, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 5, 3]);
        // element [i, j, k, l] of the input lands at [k, i, l, j]
        let (i, j, k, l) = (1, 2, 3, 4);
        assert_eq!(g.value(p)[((k * 2 + i) * 5 + l) * 3 + j], g.value(a)[((i * 3 + j) * 4 + k) * 5 + l]);
        let back = g.permute(p, &[1, 3, 0, 2]).unwrap();
        assert_eq!(g.value(back), g.value(a));
    }

    #[test]
    fn max_pool_and_im2col_shapes() {
        let mut g = Graph::new();
        let x = g
            .constant(DiffArray::new(&[1, 4, 4, 1], (0..16).map(|v| v as f64).collect()).unwrap())
            .unwrap();
        let p = g.max_pool2(x).unwrap();
        assert_eq!(g.value(p), &[5.0, 7.0, 13.0, 15.0]);
        let c = g.im2col(x, 3, 1).unwrap();
        assert_eq!(g.shape(c), &[1, 4, 4, 9]);
        // centre of the 3x3 patch at (1,1) is pixel 5; top-left corner is padding
        assert_eq!(g.value(c)[(4 + 1) * 9 + 4], 5.0);
        assert_eq!(g.value(c)[4], 0.0);
    }
}
