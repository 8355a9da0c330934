//! Checkpoint plus JSON sidecar describing how to rebuild a trained model.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    init_cnn, init_vit, CnnConfig, CnnModel, FingerprintModel, History, LabelMap, RandomProjection,
    RandomProjectionConfig, TrainHyper, VitConfig, VitModel,
};
use crate::autodiff::{read_checkpoint, write_checkpoint, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::fusion::{ConcatVitConfig, ConcatVitModel};
use crate::signal::StftConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Vit(VitConfig),
    Cnn(CnnConfig),
    RandomProjection(RandomProjectionConfig),
    ConcatVit(ConcatVitConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Vit(VitConfig::default())
    }
}

impl ModelConfig {
    /// Same architecture with the head resized to `k` classes.
    pub fn with_classes(&self, k: usize) -> Self {
        let mut cfg = self.clone();
        match &mut cfg {
            ModelConfig::Vit(c) => c.num_classes = k,
            ModelConfig::Cnn(c) => c.num_classes = k,
            ModelConfig::ConcatVit(c) => c.num_classes = k,
            ModelConfig::RandomProjection(_) => {}
        }
        cfg
    }

    /// Fresh model; weights are rounded to f32 so they survive a checkpoint.
    pub fn init(&self, seed: u64) -> Result<AnyModel> {
        let mut model = match self {
            ModelConfig::Vit(c) => AnyModel::Vit(init_vit(c, seed)?),
            ModelConfig::Cnn(c) => AnyModel::Cnn(init_cnn(c, seed)?),
            ModelConfig::RandomProjection(c) => AnyModel::RandomProjection(RandomProjection::new(c)?),
            ModelConfig::ConcatVit(c) => AnyModel::ConcatVit(ConcatVitModel::init(c, seed)?),
        };
        model.params_mut().round_to_f32();
        Ok(model)
    }

    fn rebuild(&self, params: ParamSet) -> Result<AnyModel> {
        Ok(match self {
            ModelConfig::Vit(c) => AnyModel::Vit(VitModel::from_params(c, params)?),
            ModelConfig::Cnn(c) => AnyModel::Cnn(CnnModel::from_params(c, params)?),
            ModelConfig::ConcatVit(c) => AnyModel::ConcatVit(ConcatVitModel::from_params(c, params)?),
            ModelConfig::RandomProjection(c) => {
                let model = RandomProjection::new(c)?;
                if model.params().iter().map(|(_, a)| &a.shape).ne(params.iter().map(|(_, a)| &a.shape)) {
                    return Err(Error::invalid("checkpoint does not match the random projection shape"));
                }
                AnyModel::RandomProjection(model)
            }
        })
    }
}

/// Any trainable or frozen encoder known to the pipeline.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Vit(VitModel),
    Cnn(CnnModel),
    RandomProjection(RandomProjection),
    ConcatVit(ConcatVitModel),
}

impl AnyModel {
    pub fn config(&self) -> ModelConfig {
        match self {
            AnyModel::Vit(m) => ModelConfig::Vit(m.cfg.clone()),
            AnyModel::Cnn(m) => ModelConfig::Cnn(m.cfg.clone()),
            AnyModel::RandomProjection(m) => ModelConfig::RandomProjection(m.cfg.clone()),
            AnyModel::ConcatVit(m) => ModelConfig::ConcatVit(m.cfg.clone()),
        }
    }

    fn inner(&self) -> &dyn FingerprintModel {
        match self {
            AnyModel::Vit(m) => m,
            AnyModel::Cnn(m) => m,
            AnyModel::RandomProjection(m) => m,
            AnyModel::ConcatVit(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn FingerprintModel {
        match self {
            AnyModel::Vit(m) => m,
            AnyModel::Cnn(m) => m,
            AnyModel::RandomProjection(m) => m,
            AnyModel::ConcatVit(m) => m,
        }
    }

    /// Side length of the square spectrogram the model consumes.
    pub fn input_side(&self) -> Result<usize> {
        match self {
            AnyModel::Vit(m) => Ok(m.cfg.input_size),
            AnyModel::Cnn(m) => Ok(m.cfg.input_size),
            AnyModel::RandomProjection(m) => {
                let side = (m.cfg.input_len as f64).sqrt().round() as usize;
                if side * side == m.cfg.input_len {
                    Ok(side)
                } else {
                    Err(Error::invalid("random projection input is not a square grid"))
                }
            }
            AnyModel::ConcatVit(_) => Err(Error::invalid("the concatenated-input model reads raw traces, not spectrograms")),
        }
    }
}

impl FingerprintModel for AnyModel {
    fn params(&self) -> &ParamSet {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.inner_mut().params_mut()
    }

    fn input_len(&self) -> usize {
        self.inner().input_len()
    }

    fn latent_dim(&self) -> usize {
        self.inner().latent_dim()
    }

    fn num_classes(&self) -> usize {
        self.inner().num_classes()
    }

    fn embed_graph(&self, g: &mut Graph, batch: &[&[f64]]) -> Result<Var> {
        self.inner().embed_graph(g, batch)
    }

    fn loss_graph(&self, g: &mut Graph, emb: Var, labels: &[usize]) -> Result<Var> {
        self.inner().loss_graph(g, emb, labels)
    }

    fn probs_graph(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        self.inner().probs_graph(g, emb)
    }
}

/// Everything besides the weights needed to reuse a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub model: ModelConfig,
    pub labels: LabelMap,
    pub stft: StftConfig,
    pub hyper: TrainHyper,
    pub history: History,
}

fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes `path` (binary weights) and `path.json` (sidecar).
pub fn save_model(path: impl AsRef<Path>, model: &AnyModel, sidecar: &ModelSidecar) -> Result<()> {
    let path = path.as_ref();
    if sidecar.model != model.config() {
        return Err(Error::invalid("sidecar config does not describe the model"));
    }
    write_checkpoint(model.params(), path)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(AnyModel, ModelSidecar)> {
    let path = path.as_ref();
    let sidecar: ModelSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let params = read_checkpoint(path)?;
    let model = sidecar.model.rebuild(params)?;
    Ok((model, sidecar))
}
