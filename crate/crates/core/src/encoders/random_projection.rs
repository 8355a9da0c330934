use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{input_batch, FingerprintModel};
use crate::autodiff::{DiffArray, Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};

/// Frozen Gaussian projection of the flattened input, used as a null baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomProjectionConfig {
    pub input_len: usize,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for RandomProjectionConfig {
    fn default() -> Self {
        Self {
            input_len: 32 * 32,
            latent_dim: 192,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomProjection {
    pub cfg: RandomProjectionConfig,
    params: ParamSet,
    proj: ParamId,
}

impl RandomProjection {
    pub fn new(cfg: &RandomProjectionConfig) -> Result<Self> {
        if cfg.input_len == 0 || cfg.latent_dim == 0 {
            return Err(Error::invalid("random projection dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (cfg.input_len as f64).sqrt();
        let values = (0..cfg.input_len * cfg.latent_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32 as f64
            })
            .collect();
        let mut params = ParamSet::new();
        let proj = params.add("proj.w", DiffArray::new(&[cfg.input_len, cfg.latent_dim], values)?);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            proj,
        })
    }
}

impl FingerprintModel for RandomProjection {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn input_len(&self) -> usize {
        self.cfg.input_len
    }

    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn num_classes(&self) -> usize {
        0
    }

    fn embed_graph(&self, g: &mut Graph, batch: &[&[f64]]) -> Result<Var> {
        let x = input_batch(g, batch, &[self.cfg.input_len])?;
        let w = g.param(&self.params, self.proj)?;
        let y = g.matmul(x, w)?;
        g.l2_normalize(y)
    }

    fn loss_graph(&self, _: &mut Graph, _: Var, _: &[usize]) -> Result<Var> {
        Err(Error::InvalidState("random projection is frozen".into()))
    }

    fn probs_graph(&self, _: &mut Graph, _: Var) -> Result<Var> {
        Err(Error::InvalidState("random projection has no classification head".into()))
    }
}
