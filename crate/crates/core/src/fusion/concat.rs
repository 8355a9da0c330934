//! Transformer over `k` concatenated raw traces, patched in 1-D.

use std::collections::HashMap;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_bundles, LocationPolicy, SampleBundle};
use crate::autodiff::{DiffArray, Graph, ParamId, ParamSet, Var};
use crate::encoders::arcface::{arcface_loss, class_probabilities};
use crate::encoders::transformer::EncoderLayer;
use crate::encoders::{
    input_batch, predict_proba, AnyModel, FingerprintModel, History, LabelMap, TrainHyper, TrainedEncoder, Trainer,
};
use crate::error::{Error, Result};
use crate::signal::{center_peak, normalize_amplitude, CirMeasurement, DEFAULT_PEAK_INDEX, DEFAULT_SIGNAL_LEN};

/// Reals per complex sample: interleaved real and imaginary parts.
const CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcatVitConfig {
    pub k: usize,
    pub signal_len: usize,
    pub peak_index: usize,
    /// Complex samples per token.
    pub patch_len: usize,
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub arcface_margin: f64,
    pub arcface_scale: f64,
    pub num_classes: usize,
    pub policy: LocationPolicy,
}

impl Default for ConcatVitConfig {
    fn default() -> Self {
        Self {
            k: 3,
            signal_len: DEFAULT_SIGNAL_LEN,
            peak_index: DEFAULT_PEAK_INDEX,
            patch_len: 8,
            token_dim: 192,
            layers: 1,
            heads: 6,
            head_dim: 32,
            mlp_hidden: 32,
            arcface_margin: 0.1,
            arcface_scale: 64.0,
            num_classes: 13,
            policy: LocationPolicy::DifferentLocation,
        }
    }
}

impl ConcatVitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.k == 0 || self.signal_len == 0 || self.patch_len == 0 {
            return bad("k, signal_len and patch_len must be positive");
        }
        if self.peak_index >= self.signal_len {
            return bad("peak_index must lie inside the trace");
        }
        if self.token_dim != self.heads * self.head_dim || self.heads == 0 {
            return bad("token_dim must equal heads × head_dim");
        }
        if !(0.0..std::f64::consts::PI).contains(&self.arcface_margin) || !(self.arcface_scale > 0.0) {
            return bad("arcface margin must lie in [0, π) and scale be positive");
        }
        if self.layers == 0 || self.mlp_hidden == 0 || self.num_classes == 0 {
            return bad("layers, mlp_hidden and num_classes must be positive");
        }
        Ok(())
    }

    /// Tokens after zero-padding the concatenation to a whole number of patches.
    pub fn num_tokens(&self) -> usize {
        (self.k * self.signal_len).div_ceil(self.patch_len)
    }

    fn token_width(&self) -> usize {
        self.patch_len * CHANNELS
    }
}

#[derive(Debug, Clone)]
pub struct ConcatVitModel {
    pub cfg: ConcatVitConfig,
    params: ParamSet,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    head: ParamId,
}

impl ConcatVitModel {
    pub fn init(cfg: &ConcatVitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (w, d, t) = (cfg.token_width(), cfg.token_dim, cfg.num_tokens());
        let patch_w = params.add("patch.w", DiffArray::glorot(&[w, d], w, d, &mut rng));
        let patch_b = params.add("patch.b", DiffArray::zeros(&[d]));
        let pos = params.add("pos", DiffArray::glorot(&[t, d], t, d, &mut rng));
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer::register(&mut params, &format!("layer{l}"), cfg.heads, cfg.head_dim, cfg.mlp_hidden, &mut rng))
            .collect();
        let head = params.add("arcface.w", DiffArray::glorot(&[d, cfg.num_classes], d, cfg.num_classes, &mut rng));
        Ok(Self {
            cfg: cfg.clone(),
            params,
            patch_w,
            patch_b,
            pos,
            layers,
            head,
        })
    }

    pub fn from_params(cfg: &ConcatVitConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::init(cfg, 0)?;
        for (name, array) in reference.params.iter() {
            let got = params.id(name).map(|i| &params.get(i).shape);
            if got != Some(&array.shape) {
                return Err(Error::invalid(format!("tensor {name} has shape {got:?}, expected {:?}", array.shape)));
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer::lookup(&params, &format!("layer{l}"), cfg.heads, cfg.head_dim).expect("checked above"))
            .collect();
        Ok(Self {
            patch_w: id("patch.w"),
            patch_b: id("patch.b"),
            pos: id("pos"),
            head: id("arcface.w"),
            layers,
            cfg: cfg.clone(),
            params,
        })
    }
}

impl FingerprintModel for ConcatVitModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn input_len(&self) -> usize {
        self.cfg.num_tokens() * self.cfg.token_width()
    }

    fn latent_dim(&self) -> usize {
        self.cfg.token_dim
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn embed_graph(&self, g: &mut Graph, batch: &[&[f64]]) -> Result<Var> {
        let (t, w) = (self.cfg.num_tokens(), self.cfg.token_width());
        let x = input_batch(g, batch, &[t, w])?;
        let (pw, pb, pos) = (
            g.param(&self.params, self.patch_w)?,
            g.param(&self.params, self.patch_b)?,
            g.param(&self.params, self.pos)?,
        );
        let x = g.matmul(x, pw)?;
        let x = g.add(x, pb)?;
        let mut x = g.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, &self.params, x)?;
        }
        let pooled = g.mean(x, 1)?;
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

/// One trace after amplitude normalization, peak centering and removal of the
/// carrier phase (the peak sample is rotated onto the positive real axis), as
/// interleaved reals.
fn prepared_trace(m: &CirMeasurement, cfg: &ConcatVitConfig) -> Result<Vec<f64>> {
    m.validate(cfg.signal_len)?;
    let centered = center_peak(&normalize_amplitude(m), cfg.peak_index)?;
    let peak = centered.samples[cfg.peak_index];
    let rot = if peak.norm() > 0.0 { peak.conj() / peak.norm() } else { Complex64::new(1.0, 0.0) };
    Ok(centered.samples.iter().map(|c| c * rot).flat_map(|c| [c.re, c.im]).collect())
}

fn assemble(traces: &[&[f64]], cfg: &ConcatVitConfig) -> Vec<f64> {
    let mut x = Vec::with_capacity(cfg.num_tokens() * cfg.token_width());
    traces.iter().for_each(|t| x.extend_from_slice(t));
    x.resize(cfg.num_tokens() * cfg.token_width(), 0.0);
    x
}

/// Model input for a bundle: `k` prepared traces back to back, zero-padded.
pub fn concat_input(bundle: &[&CirMeasurement], cfg: &ConcatVitConfig) -> Result<Vec<f64>> {
    if bundle.len() != cfg.k {
        return Err(Error::invalid(format!("bundle has {} samples, model expects k = {}", bundle.len(), cfg.k)));
    }
    let traces = bundle.iter().map(|m| prepared_trace(m, cfg)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = traces.iter().map(Vec::as_slice).collect();
    Ok(assemble(&refs, cfg))
}

/// Trains on bundles of the training records, drawing fresh bundles every epoch.
pub fn concat_train(cfg: &ConcatVitConfig, records: &[CirMeasurement], train_idx: &[usize], hyper: &TrainHyper) -> Result<TrainedEncoder> {
    let labels = LabelMap::from_devices(train_idx.iter().filter_map(|&i| records.get(i)).map(|r| r.device_id));
    if labels.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let cfg = ConcatVitConfig {
        num_classes: labels.len(),
        ..cfg.clone()
    };
    let mut traces = HashMap::with_capacity(train_idx.len());
    for &i in train_idx {
        let r = records.get(i).ok_or_else(|| Error::invalid(format!("record index {i} out of range")))?;
        traces.insert(i, prepared_trace(r, &cfg)?);
    }

    let mut model = ConcatVitModel::init(&cfg, hyper.seed)?;
    let mut trainer = Trainer::new(&model, hyper)?;
    let mut history = History::default();
    for epoch in 0..hyper.epochs {
        let bundles = build_bundles(records, train_idx, cfg.k, cfg.policy, trainer.rng())?.bundles;
        if bundles.is_empty() {
            return Err(Error::invalid(format!("no device has {} training records", cfg.k)));
        }
        let inputs: Vec<Vec<f64>> = bundles
            .iter()
            .map(|b| {
                let parts: Vec<&[f64]> = b.indices.iter().map(|i| traces[i].as_slice()).collect();
                assemble(&parts, &cfg)
            })
            .collect();
        let y: Vec<usize> = bundles.iter().map(|b| labels.class_of(b.device_id).expect("train device")).collect();
        let samples: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let loss = trainer.run_epoch(&mut model, &samples, &y)?;
        log::info!("epoch {epoch}: loss {loss:.5} over {} bundles", bundles.len());
        history.epoch_loss.push(loss);
    }
    model.params_mut().round_to_f32();
    Ok(TrainedEncoder {
        model: AnyModel::ConcatVit(model),
        labels,
        history,
    })
}

/// Softmax class probabilities for each bundle.
pub fn concat_predict(model: &ConcatVitModel, records: &[CirMeasurement], bundles: &[SampleBundle], threads: usize) -> Result<Vec<Vec<f64>>> {
    let inputs = bundles
        .iter()
        .map(|b| {
            let ms = b
                .indices
                .iter()
                .map(|&i| records.get(i).ok_or_else(|| Error::invalid(format!("record index {i} out of range"))))
                .collect::<Result<Vec<_>>>()?;
            concat_input(&ms, &model.cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    predict_proba(model, &refs, threads)
}
