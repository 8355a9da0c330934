use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use uwb_rff::datastore::{import_csv, make_split, read_dataset, synth_generate, write_dataset, Dataset, ScenarioSplit, DATASET_MAGIC};
use uwb_rff::embedding::Embedding;
use uwb_rff::encoders::{
    embed_all, load_model, predict_proba, save_model, train_encoder, AnyModel, LabelMap, ModelConfig, ModelSidecar,
    TrainedEncoder,
};
use uwb_rff::fusion::{argmax, bundle_builder, concat_predict, concat_train, vote_predict, ConcatVitConfig};
use uwb_rff::reid::report::{
    append_metrics, read_cmc, read_confusion, read_loss, read_roc, write_cmc, write_confusion, write_embeddings2d,
    write_loss, write_roc, MetricsRow,
};
use uwb_rff::reid::{build_gallery, evaluate_scenario, identify as rank, macro_f1, pca2, scenario_roles, Gallery};
use uwb_rff::signal::{preprocess, CirMeasurement, StftConfig};

use crate::config::RunConfig;
use crate::svg::{heat_map, line_plot, LinePlot};
use crate::CliError;

type CmdResult = Result<(), CliError>;

/// Inference worker count from `UWB_RFF_THREADS` (default 1).
fn threads() -> usize {
    std::env::var("UWB_RFF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    Ok(read_dataset(cfg.require(&cfg.paths.dataset, "dataset")?)?)
}

/// The split file when one is configured, otherwise a split derived from the config.
fn scenario_split(cfg: &RunConfig, ds: &Dataset) -> Result<ScenarioSplit, CliError> {
    let split = match &cfg.paths.split {
        Some(p) => ScenarioSplit::from_json(&fs::read_to_string(p).map_err(uwb_rff::Error::from)?)?,
        None => make_split(&ds.records, cfg.scenario.kind, &cfg.split_params())?,
    };
    let n = ds.records.len();
    if split.train_idx.iter().chain(&split.test_idx).any(|&i| i >= n) {
        return Err(CliError::data("split refers to records beyond the dataset"));
    }
    Ok(split)
}

struct LoadedModel {
    model: AnyModel,
    labels: LabelMap,
    stft: StftConfig,
}

/// The checkpointed model, or — without `paths.checkpoint` — a freshly
/// initialized, untrained one whose head covers the split's training devices.
fn model(cfg: &RunConfig, ds: &Dataset, split: &ScenarioSplit) -> Result<LoadedModel, CliError> {
    match &cfg.paths.checkpoint {
        Some(p) => {
            let (model, side) = load_model(p)?;
            Ok(LoadedModel {
                model,
                labels: side.labels,
                stft: side.stft,
            })
        }
        None => {
            let labels = LabelMap::from_devices(split.train_idx.iter().map(|&i| ds.records[i].device_id));
            log::warn!("no checkpoint configured; using an untrained {} model", kind_name(&cfg.model));
            Ok(LoadedModel {
                model: cfg.model.with_classes(labels.len().max(1)).init(cfg.seed)?,
                labels,
                stft: cfg.stft,
            })
        }
    }
}

fn kind_name(m: &ModelConfig) -> &'static str {
    match m {
        ModelConfig::Vit(_) => "vit",
        ModelConfig::Cnn(_) => "cnn",
        ModelConfig::RandomProjection(_) => "random_projection",
        ModelConfig::ConcatVit(_) => "concat_vit",
    }
}

fn spectrogram_model(m: &LoadedModel) -> Result<usize, CliError> {
    m.model.input_side().map_err(|e| CliError::usage(format!("{e}; use `fuse` for this model")))
}

fn grids(records: &[CirMeasurement], idx: &[usize], stft: &StftConfig, side: usize) -> Result<Vec<Vec<f64>>, CliError> {
    idx.iter()
        .map(|&i| {
            let input = preprocess(&records[i], stft)?;
            if input.rows != side || input.cols != side {
                return Err(CliError::usage(format!(
                    "STFT grid is {}×{}, model expects {side}×{side}",
                    input.rows, input.cols
                )));
            }
            Ok(input.grid)
        })
        .collect()
}

fn embed(m: &LoadedModel, records: &[CirMeasurement], idx: &[usize]) -> Result<Vec<Embedding>, CliError> {
    let side = spectrogram_model(m)?;
    let xs = grids(records, idx, &m.stft, side)?;
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    Ok(embed_all(&m.model, &refs, threads())?)
}

fn report_path(cfg: &RunConfig, name: &str) -> Result<Option<std::path::PathBuf>, CliError> {
    match &cfg.paths.report_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(uwb_rff::Error::from)?;
            Ok(Some(dir.join(name)))
        }
        None => Ok(None),
    }
}

pub fn synth(cfg: &RunConfig) -> CmdResult {
    let out = cfg.require(&cfg.paths.dataset, "dataset")?;
    let synth = uwb_rff::datastore::SynthConfig {
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    let ds = synth_generate(&synth)?;
    write_dataset(&ds.meta, &ds.records, out)?;
    println!("wrote {} records to {}", ds.len(), out.display());
    Ok(())
}

pub fn import(cfg: &RunConfig) -> CmdResult {
    let src = cfg.require(&cfg.paths.csv, "csv")?;
    let out = cfg.require(&cfg.paths.dataset, "dataset")?;
    let ds = import_csv(src)?;
    write_dataset(&ds.meta, &ds.records, out)?;
    println!("imported {} records to {}", ds.len(), out.display());
    Ok(())
}

pub fn split(cfg: &RunConfig) -> CmdResult {
    let out = cfg.require(&cfg.paths.split, "split")?;
    let ds = dataset(cfg)?;
    let split = make_split(&ds.records, cfg.scenario.kind, &cfg.split_params())?;
    fs::write(out, split.to_json()?).map_err(uwb_rff::Error::from)?;
    println!(
        "{}: {} train / {} test records -> {}",
        split.kind,
        split.train_idx.len(),
        split.test_idx.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> CmdResult {
    let out = cfg.require(&cfg.paths.checkpoint, "checkpoint")?;
    let ds = dataset(cfg)?;
    let split = scenario_split(cfg, &ds)?;
    let hyper = cfg.hyper();
    let trained: TrainedEncoder = match &cfg.model {
        ModelConfig::RandomProjection(_) => return Err(CliError::usage("the random projection is frozen and cannot be trained")),
        ModelConfig::ConcatVit(c) => concat_train(c, &ds.records, &split.train_idx, &hyper)?,
        other => {
            let inputs = ds
                .records
                .iter()
                .map(|r| preprocess(r, &cfg.stft))
                .collect::<Result<Vec<_>, _>>()?;
            train_encoder(other, &inputs, &split, &hyper)?
        }
    };
    let sidecar = ModelSidecar {
        model: trained.model.config(),
        labels: trained.labels.clone(),
        stft: cfg.stft,
        hyper,
        history: trained.history.clone(),
    };
    save_model(out, &trained.model, &sidecar)?;
    if let Some(p) = report_path(cfg, "loss.csv")? {
        write_loss(p, &trained.history)?;
    }
    let last = trained.history.epoch_loss.last().copied().unwrap_or(f64::NAN);
    println!("trained {} epochs (final loss {last:.5}) -> {}", hyper.epochs, out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CmdResult {
    let ds = dataset(cfg)?;
    let split = scenario_split(cfg, &ds)?;
    let m = model(cfg, &ds, &split)?;
    spectrogram_model(&m)?;
    let seen: RefCell<Option<(Vec<usize>, Vec<Embedding>)>> = RefCell::new(None);
    let report = evaluate_scenario(
        &split,
        &ds.records,
        |idx| {
            let e = embed(&m, &ds.records, idx).map_err(|e| match e.code {
                CliError::NUMERIC => uwb_rff::Error::Numeric(e.msg),
                _ => uwb_rff::Error::InvalidArgument(e.msg),
            })?;
            *seen.borrow_mut() = Some((idx.to_vec(), e.clone()));
            Ok(e)
        },
        &cfg.eval,
    )?;
    let row = MetricsRow {
        scenario: split.kind.to_string(),
        k: 1,
        policy: String::new(),
        method: kind_name(&m.model.config()).to_string(),
        cf1: report.cf1,
        cmc1: report.cmc.first().copied(),
        auroc: Some(report.auroc),
    };
    if let Some(dir) = &cfg.paths.report_dir {
        fs::create_dir_all(dir).map_err(uwb_rff::Error::from)?;
        write_cmc(dir.join("cmc.csv"), &report.cmc)?;
        write_roc(dir.join("roc.csv"), &report.roc)?;
        write_confusion(dir.join("confusion.csv"), &report.confusion)?;
        if let Some((idx, embs)) = seen.into_inner() {
            if embs.len() >= 2 {
                let devices: Vec<u16> = idx.iter().map(|&i| ds.records[i].device_id).collect();
                let locations: Vec<u16> = idx.iter().map(|&i| ds.records[i].location_id).collect();
                write_embeddings2d(dir.join("embeddings2d.csv"), &pca2(&embs)?, &devices, &locations)?;
            }
        }
        append_metrics(dir.join("metrics.csv"), std::slice::from_ref(&row))?;
    }
    println!(
        "scenario={} cf1={:.4} cmc@1={:.4} auroc={:.4}",
        row.scenario, report.cf1, report.cmc[0], report.auroc
    );
    Ok(())
}

pub fn enroll(cfg: &RunConfig) -> CmdResult {
    let out = cfg.require(&cfg.paths.gallery, "gallery")?;
    let ds = dataset(cfg)?;
    let split = scenario_split(cfg, &ds)?;
    let m = model(cfg, &ds, &split)?;
    let roles = scenario_roles(&split, &ds.records)?;
    let embs = embed(&m, &ds.records, &roles.reference)?;
    let labels: Vec<u16> = roles.reference.iter().map(|&i| ds.records[i].device_id).collect();
    let gallery = build_gallery(&embs, &labels)?;
    gallery.save(out)?;
    println!("enrolled {} devices -> {}", gallery.len(), out.display());
    Ok(())
}

fn read_traces(path: &Path) -> Result<Dataset, CliError> {
    let head = fs::read(path).map_err(uwb_rff::Error::from)?;
    if head.starts_with(DATASET_MAGIC) {
        Ok(read_dataset(path)?)
    } else {
        Ok(import_csv(path)?)
    }
}

pub fn identify(cfg: &RunConfig) -> CmdResult {
    let gallery = Gallery::load(cfg.require(&cfg.paths.gallery, "gallery")?)?;
    if gallery.is_empty() {
        return Err(CliError::data("gallery is empty"));
    }
    let traces = read_traces(cfg.require(&cfg.paths.traces, "traces")?)?;
    let m = match &cfg.paths.checkpoint {
        Some(p) => {
            let (model, side) = load_model(p)?;
            LoadedModel {
                model,
                labels: side.labels,
                stft: side.stft,
            }
        }
        None => return Err(CliError::usage("identify needs paths.checkpoint")),
    };
    let idx: Vec<usize> = (0..traces.records.len()).collect();
    let embs = embed(&m, &traces.records, &idx)?;
    let mut out = BufWriter::new(io::stdout().lock());
    let written = (|| -> io::Result<()> {
        writeln!(out, "query,rank,device_id,similarity")?;
        for (q, e) in embs.iter().enumerate() {
            for (r, (id, sim)) in rank(&gallery, e).into_iter().enumerate() {
                writeln!(out, "{q},{},{id},{sim}", r + 1)?;
            }
        }
        out.flush()
    })();
    match written {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(uwb_rff::Error::from(e).into()),
        _ => Ok(()),
    }
}

pub fn fuse(cfg: &RunConfig) -> CmdResult {
    let ds = dataset(cfg)?;
    let split = scenario_split(cfg, &ds)?;
    let mut rows = Vec::new();
    let f1_of = |bundles: &[uwb_rff::fusion::SampleBundle], probs: &[Vec<f64>], labels: &LabelMap| -> Result<f64, CliError> {
        let truth: Vec<u16> = bundles.iter().map(|b| b.device_id).collect();
        let pred: Vec<u16> = probs
            .iter()
            .map(|p| labels.device_of(argmax(p)).ok_or_else(|| CliError::data("model head is larger than its label map")))
            .collect::<Result<_, _>>()?;
        Ok(macro_f1(&truth, &pred)?)
    };

    if !matches!(cfg.model, ModelConfig::ConcatVit(_)) || cfg.paths.checkpoint.is_some() {
        let m = model(cfg, &ds, &split)?;
        if spectrogram_model(&m).is_ok() {
            let side = spectrogram_model(&m)?;
            let xs = grids(&ds.records, &split.test_idx, &m.stft, side)?;
            let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let probs = predict_proba(&m.model, &refs, threads())?;
            let at: HashMap<usize, usize> = split.test_idx.iter().enumerate().map(|(j, &i)| (i, j)).collect();
            let lookup = |i: usize| at.get(&i).map(|&j| probs[j].clone());
            for &policy in &cfg.fusion.policies {
                for &k in &cfg.fusion.ks {
                    let b = bundle_builder(&ds.records, &split.test_idx, k, policy, cfg.seed)?;
                    if b.skipped > 0 {
                        log::warn!("k={k} {policy}: skipped {} groups with fewer than {k} records", b.skipped);
                    }
                    if b.bundles.is_empty() {
                        continue;
                    }
                    let voted = vote_predict(&lookup, &b.bundles)?;
                    rows.push(fusion_row(&split, k, policy, "V", f1_of(&b.bundles, &voted, &m.labels)?));
                }
            }
        }
    }

    if cfg.fusion.concat {
        let hyper = cfg.hyper();
        for &policy in &cfg.fusion.policies {
            for &k in &cfg.fusion.ks {
                let c = ConcatVitConfig {
                    k,
                    policy,
                    ..cfg.fusion.concat_model.clone()
                };
                let trained = concat_train(&c, &ds.records, &split.train_idx, &hyper)?;
                let AnyModel::ConcatVit(model) = &trained.model else { unreachable!("concat_train returns a concat model") };
                let b = bundle_builder(&ds.records, &split.test_idx, k, policy, cfg.seed)?;
                if b.bundles.is_empty() {
                    continue;
                }
                let probs = concat_predict(model, &ds.records, &b.bundles, threads())?;
                rows.push(fusion_row(&split, k, policy, "CI", f1_of(&b.bundles, &probs, &trained.labels)?));
            }
        }
    }

    if rows.is_empty() {
        return Err(CliError::usage("no fusion experiment ran; check fusion.ks, fusion.policies and the model"));
    }
    if let Some(p) = report_path(cfg, "metrics.csv")? {
        append_metrics(p, &rows)?;
    }
    for r in &rows {
        println!("scenario={} k={} policy={} method={} cf1={:.4}", r.scenario, r.k, r.policy, r.method, r.cf1);
    }
    Ok(())
}

fn fusion_row(split: &ScenarioSplit, k: usize, policy: uwb_rff::fusion::LocationPolicy, method: &str, cf1: f64) -> MetricsRow {
    MetricsRow {
        scenario: split.kind.to_string(),
        k,
        policy: policy.to_string(),
        method: method.to_string(),
        cf1,
        cmc1: None,
        auroc: None,
    }
}

pub fn report(cfg: &RunConfig) -> CmdResult {
    let dir = cfg.require(&cfg.paths.report_dir, "report_dir")?;
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> CmdResult {
        fs::write(dir.join(name), svg).map_err(uwb_rff::Error::from)?;
        written.push(name.to_string());
        Ok(())
    };
    if dir.join("cmc.csv").exists() {
        let cmc = read_cmc(dir.join("cmc.csv"))?;
        let pts: Vec<(f64, f64)> = cmc.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
        emit(
            "cmc.svg",
            line_plot(&LinePlot {
                title: "Cumulative match characteristic",
                x_label: "rank N",
                y_label: "CMC(N)",
                x_range: (1.0, cmc.len().max(2) as f64),
                y_range: (0.0, 1.0),
                points: &pts,
                diagonal: false,
            }),
        )?;
    }
    if dir.join("roc.csv").exists() {
        let roc = read_roc(dir.join("roc.csv"))?;
        let pts: Vec<(f64, f64)> = roc.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        emit(
            "roc.svg",
            line_plot(&LinePlot {
                title: "ROC",
                x_label: "false-positive rate",
                y_label: "true-positive rate",
                x_range: (0.0, 1.0),
                y_range: (0.0, 1.0),
                points: &pts,
                diagonal: true,
            }),
        )?;
    }
    if dir.join("loss.csv").exists() {
        let loss = read_loss(dir.join("loss.csv"))?;
        let pts: Vec<(f64, f64)> = loss.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
        let hi = loss.iter().copied().fold(0.0, f64::max);
        emit(
            "loss.svg",
            line_plot(&LinePlot {
                title: "Training loss",
                x_label: "epoch",
                y_label: "mean loss",
                x_range: (0.0, (loss.len().max(2) - 1) as f64),
                y_range: (0.0, if hi > 0.0 { hi } else { 1.0 }),
                points: &pts,
                diagonal: false,
            }),
        )?;
    }
    if dir.join("confusion.csv").exists() {
        let c = read_confusion(dir.join("confusion.csv"))?;
        emit("confusion.svg", heat_map("Confusion matrix", &c.labels, &c.counts))?;
    }
    if written.is_empty() {
        return Err(CliError::data(format!("no report CSVs found in {}", dir.display())));
    }
    println!("rendered {}", written.join(", "));
    Ok(())
}
