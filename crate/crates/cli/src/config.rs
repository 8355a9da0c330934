use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use uwb_rff::datastore::{ScenarioKind, SplitParams, SynthConfig};
use uwb_rff::encoders::{ModelConfig, TrainHyper};
use uwb_rff::fusion::{ConcatVitConfig, LocationPolicy};
use uwb_rff::reid::EvalOptions;
use uwb_rff::signal::StftConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            lr: h.lr,
            batch: h.batch,
            epochs: h.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    pub holdout_devices: usize,
    pub holdout_locations: usize,
    pub test_fraction: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let p = SplitParams::default();
        Self {
            kind: ScenarioKind::S1,
            holdout_devices: p.holdout_devices,
            holdout_locations: p.holdout_locations,
            test_fraction: p.test_fraction,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    /// CSV source for `import`.
    pub csv: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    /// Query traces for `identify` (binary dataset or CSV).
    pub traces: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub ks: Vec<usize>,
    pub policies: Vec<LocationPolicy>,
    /// Train the concatenated-input model for each (k, policy) as well.
    pub concat: bool,
    pub concat_model: ConcatVitConfig,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            ks: vec![1, 3, 10],
            policies: vec![LocationPolicy::SameLocation, LocationPolicy::DifferentLocation],
            concat: false,
            concat_model: ConcatVitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub scenario: ScenarioSection,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub eval: EvalOptions,
    pub fusion: FusionSection,
}

impl RunConfig {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.train.lr,
            batch: self.train.batch,
            epochs: self.train.epochs,
            seed: self.seed,
        }
    }

    pub fn split_params(&self) -> SplitParams {
        SplitParams {
            seed: self.seed,
            holdout_devices: self.scenario.holdout_devices,
            holdout_locations: self.scenario.holdout_locations,
            test_fraction: self.scenario.test_fraction,
        }
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        path.as_deref()
            .ok_or_else(|| CliError::usage(format!("missing required setting paths.{key}")))
    }
}

/// Short keys accepted on the command line in place of their dotted form.
fn expand_alias(key: &str) -> String {
    let target = match key {
        "dataset" | "csv" | "split" | "checkpoint" | "gallery" | "traces" | "report_dir" | "report-dir" => "paths",
        "lr" | "batch" | "epochs" => "train",
        "kind" | "scenario" => "scenario",
        _ => return key.to_string(),
    };
    match key {
        "scenario" => "scenario.kind".into(),
        "report-dir" => "paths.report_dir".into(),
        _ => format!("{target}.{key}"),
    }
}

/// Values that parse as JSON keep their type; anything else is a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("malformed key {key:?}")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    let last = parts[parts.len() - 1];
    if !node.is_object() {
        *node = Value::Object(Map::new());
    }
    let obj = node.as_object_mut().expect("object");
    // switching the model family drops settings of the previous family
    if parts.len() == 2 && parts[0] == "model" && last == "kind" {
        obj.clear();
    }
    obj.insert(last.to_string(), value);
    Ok(())
}

/// Builds the run configuration from an optional JSON file and `--key value`
/// overrides (which win).
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut root = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    let mut args = overrides.iter();
    while let Some(flag) = args.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| CliError::usage(format!("expected --key, found {flag:?}")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = args.next().ok_or_else(|| CliError::usage(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        set_dotted(&mut root, &expand_alias(&key), parse_value(&raw))?;
    }
    if let Some(model) = root.get_mut("model").and_then(Value::as_object_mut) {
        model.entry("kind").or_insert_with(|| Value::String("vit".into()));
    }
    serde_json::from_value(root).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))
}
