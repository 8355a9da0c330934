use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::{ParamId, ParamSet};
use super::graph::{Graph, Var};
use crate::error::Result;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn guarded_relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients of the scalar built by `loss_fn` against
/// central differences on a random 1% subsample of parameter entries (at
/// least 50, or all when fewer exist). Returns the largest guarded relative
/// error.
pub fn grad_check<F>(params: &mut ParamSet, mut loss_fn: F, eps: f64, seed: u64) -> Result<f64>
where
    F: FnMut(&ParamSet, &mut Graph) -> Result<Var>,
{
    params.clear_grads();
    let mut graph = Graph::new();
    let loss = loss_fn(params, &mut graph)?;
    graph.backward(loss, params)?;

    let mut entries: Vec<(ParamId, usize)> = Vec::new();
    for id in params.ids() {
        entries.extend((0..params.get(id).len()).map(|j| (id, j)));
    }
    let total = entries.len();
    let count = total.div_ceil(100).max(total.min(50));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, count);

    let mut eval = |params: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(params, &mut g)?;
        Ok(g.scalar(l))
    };

    let mut worst: f64 = 0.0;
    for k in picks.iter() {
        let (id, j) = entries[k];
        let analytic = params.get(id).grad.as_ref().map_or(0.0, |g| g[j]);
        let orig = params.get(id).values[j];
        params.get_mut(id).values[j] = orig + eps;
        let plus = eval(params)?;
        params.get_mut(id).values[j] = orig - eps;
        let minus = eval(params)?;
        params.get_mut(id).values[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(guarded_relative_error(analytic, numeric));
    }
    params.clear_grads();
    Ok(worst)
}
