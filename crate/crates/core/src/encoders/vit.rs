use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arcface::{arcface_loss, class_probabilities};
use super::transformer::EncoderLayer;
use super::{input_batch, FingerprintModel};
use crate::autodiff::{DiffArray, Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};

/// Spectrogram transformer. Defaults: 8×8 patches of a 32×32 grid, one
/// encoder layer with 6 heads of width 32, MLP width 32, a 192-d latent and
/// an angular-margin head with margin 0.1 and scale 64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub input_size: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub latent_dim: usize,
    pub arcface_margin: f64,
    pub arcface_scale: f64,
    pub num_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            patch_kernel: 8,
            patch_stride: 8,
            token_dim: 192,
            layers: 1,
            heads: 6,
            head_dim: 32,
            mlp_hidden: 32,
            latent_dim: 192,
            arcface_margin: 0.1,
            arcface_scale: 64.0,
            num_classes: 13,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.token_dim != self.heads * self.head_dim || self.heads == 0 {
            return bad("token_dim must equal heads × head_dim");
        }
        if self.latent_dim != self.token_dim {
            return bad("latent_dim must equal token_dim (mean-pooled tokens)");
        }
        if self.patch_kernel != self.patch_stride || self.patch_stride == 0 || self.input_size % self.patch_stride != 0 {
            return bad("patches must be non-overlapping and tile the input");
        }
        if !(0.0..std::f64::consts::PI).contains(&self.arcface_margin) {
            return bad("arcface margin must lie in [0, π)");
        }
        if !(self.arcface_scale > 0.0) {
            return bad("arcface scale must be positive");
        }
        if self.layers == 0 || self.mlp_hidden == 0 || self.num_classes == 0 {
            return bad("layers, mlp_hidden and num_classes must be positive");
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.input_size / self.patch_stride
    }

    pub fn num_tokens(&self) -> usize {
        self.patches_per_side().pow(2)
    }
}

#[derive(Debug, Clone)]
pub struct VitModel {
    pub cfg: VitConfig,
    params: ParamSet,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    head: ParamId,
}

pub fn init_vit(cfg: &VitConfig, seed: u64) -> Result<VitModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let patch_len = cfg.patch_kernel * cfg.patch_kernel;
    let d = cfg.token_dim;
    let patch_w = params.add("patch.w", DiffArray::glorot(&[patch_len, d], patch_len, d, &mut rng));
    let patch_b = params.add("patch.b", DiffArray::zeros(&[d]));
    let pos = params.add("pos", DiffArray::glorot(&[cfg.num_tokens(), d], cfg.num_tokens(), d, &mut rng));
    let layers = (0..cfg.layers)
        .map(|l| EncoderLayer::register(&mut params, &format!("layer{l}"), cfg.heads, cfg.head_dim, cfg.mlp_hidden, &mut rng))
        .collect();
    let head = params.add(
        "arcface.w",
        DiffArray::glorot(&[d, cfg.num_classes], d, cfg.num_classes, &mut rng),
    );
    Ok(VitModel {
        cfg: cfg.clone(),
        params,
        patch_w,
        patch_b,
        pos,
        layers,
        head,
    })
}

impl VitModel {
    /// Rebuilds a model from checkpointed parameters.
    pub fn from_params(cfg: &VitConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let missing = |n: &str| Error::invalid(format!("checkpoint lacks tensor {n}"));
        let id = |n: &str| params.id(n).ok_or_else(|| missing(n));
        let layers = (0..cfg.layers)
            .map(|l| {
                EncoderLayer::lookup(&params, &format!("layer{l}"), cfg.heads, cfg.head_dim)
                    .ok_or_else(|| missing(&format!("layer{l}.*")))
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            patch_w: id("patch.w")?,
            patch_b: id("patch.b")?,
            pos: id("pos")?,
            head: id("arcface.w")?,
            layers,
            cfg: cfg.clone(),
            params,
        };
        let reference = init_vit(cfg, 0)?;
        for (name, array) in reference.params.iter() {
            let got = model.params.id(name).map(|i| &model.params.get(i).shape);
            if got != Some(&array.shape) {
                return Err(Error::invalid(format!("tensor {name} has shape {got:?}, expected {:?}", array.shape)));
            }
        }
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Token sequence `[B, T, D]` after patch embedding and positional embedding.
    pub fn tokens(&self, g: &mut Graph, batch: &[&[f64]]) -> Result<Var> {
        let (n, p) = (self.cfg.patches_per_side(), self.cfg.patch_stride);
        let b = batch.len();
        let x = input_batch(g, batch, &[self.cfg.input_size, self.cfg.input_size])?;
        let x = g.reshape(x, &[b, n, p, n, p])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4])?;
        let x = g.reshape(x, &[b, n * n, p * p])?;
        let (w, bias, pos) = (
            g.param(&self.params, self.patch_w)?,
            g.param(&self.params, self.patch_b)?,
            g.param(&self.params, self.pos)?,
        );
        let t = g.matmul(x, w)?;
        let t = g.add(t, bias)?;
        g.add(t, pos)
    }

    /// Mean-pooled encoder output `[B, D]` before normalization.
    pub fn pooled(&self, g: &mut Graph, batch: &[&[f64]]) -> Result<Var> {
        let mut x = self.tokens(g, batch)?;
        for layer in &self.layers {
            x = layer.forward(g, &self.params, x)?;
        }
        g.mean(x, 1)
    }

    pub fn positional_embedding_mut(&mut self) -> &mut DiffArray {
        self.params.get_mut(self.pos)
    }
}

impl FingerprintModel for VitModel {
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
        let pooled = self.pooled(g, batch)?;
        g.l2_normalize(pooled)
    }

    fn loss_graph(&self, g: &mut Graph, emb: Var, labels: &[usize]) -> Result<Var> {
        let w = g.param(&self.params, self.head)?;
        arcface_loss(g, emb, w, labels, self.cfg.arcface_margin, self.cfg.arcface_scale)
    }

    fn probs_graph(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        class_probabilities(g, &self.params, emb, self.head, self.cfg.arcface_scale)
    }
}
