use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{input_batch, FingerprintModel};
use crate::autodiff::{DiffArray, Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};

/// Convolutional baseline: three (3×3 conv, ReLU, 2×2 max-pool) blocks and a
/// linear map to the latent, with a linear softmax head for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: vec![16, 32, 64],
            kernel: 3,
            latent_dim: 192,
            num_classes: 13,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.channels.len();
        if blocks == 0 || self.channels.contains(&0) {
            return Err(Error::invalid("cnn needs at least one block with positive channels"));
        }
        if self.kernel % 2 == 0 || self.input_size % (1 << blocks) != 0 {
            return Err(Error::invalid("cnn kernel must be odd and input divisible by 2^blocks"));
        }
        if self.latent_dim == 0 || self.num_classes == 0 {
            return Err(Error::invalid("latent_dim and num_classes must be positive"));
        }
        Ok(())
    }

    fn final_side(&self) -> usize {
        self.input_size >> self.channels.len()
    }
}

#[derive(Debug, Clone)]
pub struct CnnModel {
    pub cfg: CnnConfig,
    params: ParamSet,
    convs: Vec<(ParamId, ParamId)>,
    fc: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

pub fn init_cnn(cfg: &CnnConfig, seed: u64) -> Result<CnnModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let k2 = cfg.kernel * cfg.kernel;
    let mut convs = Vec::new();
    let mut cin = 1;
    for (i, &cout) in cfg.channels.iter().enumerate() {
        let w = params.add(format!("conv{i}.w"), DiffArray::glorot(&[k2 * cin, cout], k2 * cin, cout, &mut rng));
        let b = params.add(format!("conv{i}.b"), DiffArray::zeros(&[cout]));
        convs.push((w, b));
        cin = cout;
    }
    let flat = cfg.final_side().pow(2) * cin;
    let fc = (
        params.add("fc.w", DiffArray::glorot(&[flat, cfg.latent_dim], flat, cfg.latent_dim, &mut rng)),
        params.add("fc.b", DiffArray::zeros(&[cfg.latent_dim])),
    );
    let head = (
        params.add(
            "head.w",
            DiffArray::glorot(&[cfg.latent_dim, cfg.num_classes], cfg.latent_dim, cfg.num_classes, &mut rng),
        ),
        params.add("head.b", DiffArray::zeros(&[cfg.num_classes])),
    );
    Ok(CnnModel {
        cfg: cfg.clone(),
        params,
        convs,
        fc,
        head,
    })
}

impl CnnModel {
    pub fn from_params(cfg: &CnnConfig, params: ParamSet) -> Result<Self> {
        let reference = init_cnn(cfg, 0)?;
        for (name, array) in reference.params.iter() {
            let got = params.id(name).map(|i| &params.get(i).shape);
            if got != Some(&array.shape) {
                return Err(Error::invalid(format!("tensor {name} has shape {got:?}, expected {:?}", array.shape)));
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        Ok(Self {
            convs: (0..cfg.channels.len())
                .map(|i| (id(&format!("conv{i}.w")), id(&format!("conv{i}.b"))))
                .collect(),
            fc: (id("fc.w"), id("fc.b")),
            head: (id("head.w"), id("head.b")),
            cfg: cfg.clone(),
            params,
        })
    }

    /// Unnormalized latent features `[B, latent]`.
    fn features(&self, g: &mut Graph, batch: &[&[f64]]) -> Result<Var> {
        let s = self.cfg.input_size;
        let mut x = input_batch(g, batch, &[s, s, 1])?;
        for &(w, b) in &self.convs {
            let cols = g.im2col(x, self.cfg.kernel, self.cfg.kernel / 2)?;
            let (w, b) = (g.param(&self.params, w)?, g.param(&self.params, b)?);
            let y = g.matmul(cols, w)?;
            let y = g.add(y, b)?;
            let y = g.relu(y)?;
            x = g.max_pool2(y)?;
        }
        let flat: usize = g.shape(x)[1..].iter().product();
        let x = g.reshape(x, &[batch.len(), flat])?;
        let (w, b) = (g.param(&self.params, self.fc.0)?, g.param(&self.params, self.fc.1)?);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn logits(&self, g: &mut Graph, feats: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.params, self.head.0)?, g.param(&self.params, self.head.1)?);
        let y = g.matmul(feats, w)?;
        g.add(y, b)
    }
}

impl FingerprintModel for CnnModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn input_len(&self) -> usize {
        self.cfg.input_size * self.cfg.input_size
    }

    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn embed_graph(&self, g: &mut Graph, batch: &[&[f64]]) -> Result<Var> {
        let feats = self.features(g, batch)?;
        g.l2_normalize(feats)
    }

    fn loss_graph(&self, g: &mut Graph, emb: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.logits(g, emb)?;
        g.cross_entropy(logits, labels)
    }

    fn probs_graph(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        let logits = self.logits(g, emb)?;
        g.softmax(logits)
    }
}
