//! Fingerprint encoders and their supervised training loop.

pub(crate) mod arcface;
mod artifact;
mod cnn;
mod random_projection;
pub(crate) mod transformer;
mod vit;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use arcface::{arcface_loss, arcface_loss_value, cosine_logits, margin_logits, COS_CLAMP};
pub use artifact::{load_model, save_model, AnyModel, ModelConfig, ModelSidecar};
pub use cnn::{init_cnn, CnnConfig, CnnModel};
pub use random_projection::{RandomProjection, RandomProjectionConfig};
pub use vit::{init_vit, VitConfig, VitModel};

use crate::autodiff::{adam_step, AdamState, DiffArray, Graph, ParamSet, Var};
use crate::datastore::ScenarioSplit;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::signal::ModelInput;

/// A differentiable encoder with a classification head.
pub trait FingerprintModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Number of reals per input sample.
    fn input_len(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Unit-norm embeddings `[B, latent]` for a batch of flattened inputs.
    fn embed_graph(&self, g: &mut Graph, batch: &[&[f64]]) -> Result<Var>;
    /// Training objective given the embedding node.
    fn loss_graph(&self, g: &mut Graph, emb: Var, labels: &[usize]) -> Result<Var>;
    /// Class probabilities `[B, K]` given the embedding node.
    fn probs_graph(&self, g: &mut Graph, emb: Var) -> Result<Var>;
}

/// Stacks equally sized samples into a `[B, ..sample_shape]` constant.
pub(crate) fn input_batch(g: &mut Graph, batch: &[&[f64]], sample_shape: &[usize]) -> Result<Var> {
    let n: usize = sample_shape.iter().product();
    let mut flat = Vec::with_capacity(n * batch.len());
    for (i, s) in batch.iter().enumerate() {
        if s.len() != n {
            return Err(Error::invalid(format!(
                "input {i} has {} values, model expects {sample_shape:?}",
                s.len()
            )));
        }
        flat.extend_from_slice(s);
    }
    let mut shape = vec![batch.len()];
    shape.extend_from_slice(sample_shape);
    g.constant(DiffArray::new(&shape, flat)?)
}

/// Bijection between device ids and contiguous class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMap {
    devices: Vec<u16>,
}

impl LabelMap {
    /// Classes ordered by ascending device id.
    pub fn from_devices(devices: impl IntoIterator<Item = u16>) -> Self {
        let set: BTreeSet<u16> = devices.into_iter().collect();
        Self {
            devices: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn class_of(&self, device: u16) -> Option<usize> {
        self.devices.binary_search(&device).ok()
    }

    pub fn device_of(&self, class: usize) -> Option<u16> {
        self.devices.get(class).copied()
    }

    pub fn devices(&self) -> &[u16] {
        &self.devices
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 512,
            epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Optimizer state and shuffling stream shared across epochs.
pub struct Trainer {
    adam: AdamState,
    rng: ChaCha8Rng,
    hyper: TrainHyper,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &impl FingerprintModel, hyper: &TrainHyper) -> Result<Self> {
        if hyper.batch == 0 || !(hyper.lr > 0.0) {
            return Err(Error::invalid("batch must be positive and lr > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        rng.set_stream(0x5348_5546);
        Ok(Self {
            adam: AdamState::new(model.params(), hyper.lr),
            rng,
            hyper: *hyper,
            epoch: 0,
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One pass over `samples` in a freshly shuffled order; returns the mean loss.
    pub fn run_epoch<M: FingerprintModel>(&mut self, model: &mut M, samples: &[&[f64]], labels: &[usize]) -> Result<f64> {
        if samples.is_empty() || samples.len() != labels.len() {
            return Err(Error::invalid("training needs a nonempty, labeled sample set"));
        }
        let epoch = self.epoch;
        self.epoch += 1;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);

        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.hyper.batch).enumerate() {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| samples[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let context = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            };
            let mut g = Graph::new();
            let emb = model.embed_graph(&mut g, &batch).map_err(context)?;
            let loss = model.loss_graph(&mut g, emb, &y).map_err(context)?;
            let value = g.scalar(loss);
            g.backward(loss, model.params_mut()).map_err(context)?;
            adam_step(model.params_mut(), &mut self.adam)?;
            total += value * chunk.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }
}

/// Trains on fixed samples for `hyper.epochs` epochs.
pub fn fit<M: FingerprintModel>(model: &mut M, samples: &[&[f64]], labels: &[usize], hyper: &TrainHyper) -> Result<History> {
    let mut trainer = Trainer::new(model, hyper)?;
    let mut history = History::default();
    for epoch in 0..hyper.epochs {
        let loss = trainer.run_epoch(model, samples, labels)?;
        log::info!("epoch {epoch}: loss {loss:.5}");
        history.epoch_loss.push(loss);
    }
    model.params_mut().round_to_f32();
    Ok(history)
}

/// Flattened 32×32 grids, rejecting inputs of any other shape.
pub fn grid_slices<'a>(inputs: impl IntoIterator<Item = &'a ModelInput>, side: usize) -> Result<Vec<&'a [f64]>> {
    inputs
        .into_iter()
        .map(|m| {
            if m.rows != side || m.cols != side || m.grid.len() != side * side {
                Err(Error::invalid(format!("input is {}×{}, expected {side}×{side}", m.rows, m.cols)))
            } else {
                Ok(m.grid.as_slice())
            }
        })
        .collect()
}

/// Trained encoder plus the class mapping and loss curve.
pub struct TrainedEncoder {
    pub model: AnyModel,
    pub labels: LabelMap,
    pub history: History,
}

/// Trains a spectrogram encoder on the split's training records.
/// `inputs` are the preprocessed records of the whole dataset, indexed like it.
pub fn train_encoder(cfg: &ModelConfig, inputs: &[ModelInput], split: &ScenarioSplit, hyper: &TrainHyper) -> Result<TrainedEncoder> {
    if split.train_idx.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let train: Vec<&ModelInput> = split.train_idx.iter().map(|&i| &inputs[i]).collect();
    let labels = LabelMap::from_devices(train.iter().map(|m| m.source_labels.device_id));
    let y: Vec<usize> = train
        .iter()
        .map(|m| labels.class_of(m.source_labels.device_id).expect("built from these records"))
        .collect();
    let mut model = cfg.with_classes(labels.len()).init(hyper.seed)?;
    let side = model.input_side()?;
    let samples = grid_slices(train.iter().copied(), side)?;
    let history = fit(&mut model, &samples, &y, hyper)?;
    Ok(TrainedEncoder { model, labels, history })
}

fn run_batched<M, T>(model: &M, inputs: &[&[f64]], threads: usize, per_batch: impl Fn(&M, &[&[f64]]) -> Result<Vec<T>> + Sync) -> Result<Vec<T>>
where
    M: FingerprintModel + Sync,
    T: Send,
{
    const CHUNK: usize = 128;
    let chunks: Vec<&[&[f64]]> = inputs.chunks(CHUNK).collect();
    let threads = threads.max(1).min(chunks.len().max(1));
    if threads == 1 {
        let mut out = Vec::with_capacity(inputs.len());
        for c in chunks {
            out.extend(per_batch(model, c)?);
        }
        return Ok(out);
    }
    let per_worker = chunks.len().div_ceil(threads);
    let results: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per_worker)
            .map(|group| {
                let per_batch = &per_batch;
                s.spawn(move || {
                    let mut out = Vec::new();
                    for c in group {
                        out.extend(per_batch(model, c)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("inference worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(inputs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Embeds every input; `threads` workers share the batches.
pub fn embed_all<M: FingerprintModel + Sync>(model: &M, inputs: &[&[f64]], threads: usize) -> Result<Vec<Embedding>> {
    run_batched(model, inputs, threads, |m, batch| {
        let mut g = Graph::new();
        let emb = m.embed_graph(&mut g, batch)?;
        let d = m.latent_dim();
        g.value(emb).chunks(d).map(|row| Embedding::from_unit(row.to_vec())).collect()
    })
}

/// Softmax class probabilities of every input.
pub fn predict_proba<M: FingerprintModel + Sync>(model: &M, inputs: &[&[f64]], threads: usize) -> Result<Vec<Vec<f64>>> {
    run_batched(model, inputs, threads, |m, batch| {
        let mut g = Graph::new();
        let emb = m.embed_graph(&mut g, batch)?;
        let p = m.probs_graph(&mut g, emb)?;
        let k = g.shape(p)[1];
        Ok(g.value(p).chunks(k).map(<[f64]>::to_vec).collect())
    })
}

/// Single-input convenience wrapper around [`embed_all`].
pub fn embed_one<M: FingerprintModel + Sync>(model: &M, input: &ModelInput) -> Result<Embedding> {
    let side = (model.input_len() as f64).sqrt() as usize;
    let slices = grid_slices([input], side)?;
    Ok(embed_all(model, &slices, 1)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_inputs(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..len).map(|_| rng.random::<f64>()).collect()).collect()
    }

    fn small_vit(classes: usize) -> VitConfig {
        VitConfig {
            input_size: 8,
            patch_kernel: 4,
            patch_stride: 4,
            token_dim: 16,
            heads: 2,
            head_dim: 8,
            mlp_hidden: 8,
            latent_dim: 16,
            arcface_scale: 16.0,
            num_classes: classes,
            ..VitConfig::default()
        }
    }

    #[test]
    fn default_vit_parameter_budget() {
        let m = init_vit(&VitConfig::default(), 0).unwrap();
        let n = m.num_parameters();
        assert!((120_000..=280_000).contains(&n), "{n} parameters");
        assert_eq!(VitConfig::default().num_tokens(), 16);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_vit(&VitConfig::default(), 3).unwrap();
        let b = init_vit(&VitConfig::default(), 3).unwrap();
        let c = init_vit(&VitConfig::default(), 4).unwrap();
        let values = |m: &VitModel| m.params().iter().flat_map(|(_, a)| a.values.clone()).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn vit_tokens_and_unit_embeddings() {
        let m = init_vit(&VitConfig::default(), 1).unwrap();
        let xs = random_inputs(3, 1024, 2);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let t = m.tokens(&mut g, &refs).unwrap();
        assert_eq!(g.shape(t), &[3, 16, 192]);
        for e in embed_all(&m, &refs, 1).unwrap() {
            assert_eq!(e.dim(), 192);
            assert!((crate::embedding::norm(e.as_slice()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = init_vit(&VitConfig::default(), 1).unwrap();
        let x = vec![0.5; 1000];
        let mut g = Graph::new();
        assert!(matches!(m.embed_graph(&mut g, &[&x]), Err(Error::InvalidArgument(_))));
    }

    /// Without positional information, mean pooling makes the encoder blind to
    /// the order of patches.
    #[test]
    fn patch_permutation_invariance_without_positions() {
        let cfg = small_vit(3);
        let mut m = init_vit(&cfg, 5).unwrap();
        m.positional_embedding_mut().values.iter_mut().for_each(|v| *v = 0.0);
        let x = &random_inputs(1, 64, 9)[0];
        // swap patch (0,0) with patch (1,1)
        let mut y = x.clone();
        for r in 0..4 {
            for c in 0..4 {
                y.swap(r * 8 + c, (r + 4) * 8 + c + 4);
            }
        }
        let e = embed_all(&m, &[x, &y], 1).unwrap();
        for (a, b) in e[0].as_slice().iter().zip(e[1].as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn cnn_and_projection_embed_to_unit_norm() {
        let xs = random_inputs(2, 1024, 4);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let cnn = init_cnn(&CnnConfig::default(), 0).unwrap();
        let rp = RandomProjection::new(&RandomProjectionConfig::default()).unwrap();
        for e in embed_all(&cnn, &refs, 1).unwrap().into_iter().chain(embed_all(&rp, &refs, 2).unwrap()) {
            assert_eq!(e.dim(), 192);
            assert!((crate::embedding::norm(e.as_slice()) - 1.0).abs() < 1e-9);
        }
        let p = predict_proba(&cnn, &refs, 1).unwrap();
        assert!(p.iter().all(|row| row.len() == 13 && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn threaded_inference_matches_serial() {
        let m = init_vit(&small_vit(2), 0).unwrap();
        let xs = random_inputs(300, 64, 8);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        assert_eq!(embed_all(&m, &refs, 1).unwrap(), embed_all(&m, &refs, 3).unwrap());
    }

    #[test]
    fn label_map_is_a_bijection() {
        let map = LabelMap::from_devices([7, 2, 9, 2, 4]);
        assert_eq!(map.len(), 4);
        for c in 0..map.len() {
            assert_eq!(map.class_of(map.device_of(c).unwrap()), Some(c));
        }
        assert_eq!(map.class_of(3), None);
        assert_eq!(map.device_of(4), None);
    }

    fn toy_task(classes: usize, per_class: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos = random_inputs(classes, 64, seed + 100);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (c, p) in protos.iter().enumerate() {
            for _ in 0..per_class {
                xs.push(p.iter().map(|v| v + 0.05 * rng.random::<f64>()).collect());
                ys.push(c);
            }
        }
        (xs, ys)
    }

    fn accuracy(m: &impl FingerprintModel, xs: &[&[f64]], ys: &[usize]) -> f64 {
        let mut g = Graph::new();
        let e = m.embed_graph(&mut g, xs).unwrap();
        let p = m.probs_graph(&mut g, e).unwrap();
        let k = m.num_classes();
        let hits = g
            .value(p)
            .chunks(k)
            .zip(ys)
            .filter(|(row, &y)| crate::fusion::argmax(row) == y)
            .count();
        hits as f64 / ys.len() as f64
    }

    #[test]
    fn overfits_a_small_set() {
        let (xs, ys) = toy_task(4, 16, 1);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let mut m = init_vit(&small_vit(4), 2).unwrap();
        let hyper = TrainHyper {
            lr: 3e-3,
            batch: 16,
            epochs: 200,
            seed: 3,
        };
        let h = fit(&mut m, &refs, &ys, &hyper).unwrap();
        assert!(h.epoch_loss.last().unwrap() < &h.epoch_loss[0]);
        assert!(accuracy(&m, &refs, &ys) >= 0.99);
    }

    #[test]
    fn training_is_reproducible() {
        let (xs, ys) = toy_task(3, 8, 4);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let hyper = TrainHyper {
            lr: 1e-3,
            batch: 8,
            epochs: 5,
            seed: 9,
        };
        let mut a = init_cnn(
            &CnnConfig {
                input_size: 8,
                channels: vec![4, 8],
                latent_dim: 8,
                num_classes: 3,
                ..CnnConfig::default()
            },
            0,
        )
        .unwrap();
        let mut b = a.clone();
        let ha = fit(&mut a, &refs, &ys, &hyper).unwrap();
        let hb = fit(&mut b, &refs, &ys, &hyper).unwrap();
        assert_eq!(ha, hb);
        assert!(ha.epoch_loss.last().unwrap() < &ha.epoch_loss[0]);
    }

    #[test]
    fn larger_margin_raises_loss() {
        let m0 = init_vit(&small_vit(3), 0).unwrap();
        let xs = random_inputs(6, 64, 1);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let ys = [0, 1, 2, 0, 1, 2];
        let mut last = f64::NEG_INFINITY;
        for margin in [0.0, 0.1, 0.3, 0.5] {
            let mut m = m0.clone();
            m.cfg.arcface_margin = margin;
            let mut g = Graph::new();
            let e = m.embed_graph(&mut g, &refs).unwrap();
            let l = m.loss_graph(&mut g, e, &ys).unwrap();
            let v = g.scalar(l);
            assert!(v > last, "margin {margin}: {v} <= {last}");
            last = v;
        }
    }

    #[test]
    fn artifacts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.uwbp");
        for cfg in [
            ModelConfig::Vit(small_vit(3)),
            ModelConfig::Cnn(CnnConfig::default()),
            ModelConfig::RandomProjection(RandomProjectionConfig::default()),
        ] {
            let model = cfg.init(1).unwrap();
            let sidecar = ModelSidecar {
                model: cfg.clone(),
                labels: LabelMap::from_devices([1, 5, 6]),
                stft: Default::default(),
                hyper: TrainHyper::default(),
                history: History { epoch_loss: vec![1.5, 0.25] },
            };
            save_model(&path, &model, &sidecar).unwrap();
            let (back, side) = load_model(&path).unwrap();
            assert_eq!(side, sidecar);
            let xs = random_inputs(2, model.input_len(), 3);
            let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            assert_eq!(embed_all(&model, &refs, 1).unwrap(), embed_all(&back, &refs, 1).unwrap());
        }
    }

    #[test]
    fn model_config_json_is_tagged() {
        let json = r#"{"kind":"vit","heads":6,"head_dim":32}"#;
        let cfg: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg, ModelConfig::Vit(VitConfig::default()));
        assert!(serde_json::from_str::<ModelConfig>(r#"{"kind":"vit","bogus":1}"#).is_err());
    }
}
