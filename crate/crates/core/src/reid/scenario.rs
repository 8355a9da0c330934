use serde::{Deserialize, Serialize};

use super::{build_gallery, cmc_curve, confusion_matrix, linear_probe_cf1, roc_and_auroc, Confusion, ProbeConfig, RocCurve};
use crate::datastore::{ScenarioKind, ScenarioSplit};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::signal::CirMeasurement;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub roc_thresholds: usize,
    pub max_pairs: usize,
    pub seed: u64,
    pub probe: ProbeConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            roc_thresholds: 200,
            max_pairs: 200_000,
            seed: 0,
            probe: ProbeConfig::default(),
        }
    }
}

/// Which records play which part in an evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioRoles {
    /// Records averaged into gallery references; also the probe training set.
    pub reference: Vec<usize>,
    pub query: Vec<usize>,
}

impl ScenarioRoles {
    /// Sorted, deduplicated union of both roles.
    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.reference.iter().chain(&self.query).copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Closed-set scenarios reference the training records and query the test
/// records. Unseen devices (S3) are referenced from every record at one
/// held-out location — none of which was trained on — and queried at the
/// remaining locations.
pub fn scenario_roles(split: &ScenarioSplit, records: &[CirMeasurement]) -> Result<ScenarioRoles> {
    let roles = match split.kind {
        ScenarioKind::S3 => {
            let loc = split
                .reference_location()
                .ok_or_else(|| Error::invalid("S3 split names no held-out location"))?;
            ScenarioRoles {
                reference: (0..records.len()).filter(|&i| records[i].location_id == loc).collect(),
                query: split.test_idx.iter().copied().filter(|&i| records[i].location_id != loc).collect(),
            }
        }
        _ => ScenarioRoles {
            reference: split.train_idx.clone(),
            query: split.test_idx.clone(),
        },
    };
    if roles.reference.is_empty() || roles.query.is_empty() {
        return Err(Error::invalid(format!("scenario {} leaves no reference or no query records", split.kind)));
    }
    if roles.all().last().is_some_and(|&i| i >= records.len()) {
        return Err(Error::invalid("split indexes past the end of the dataset"));
    }
    Ok(roles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: ScenarioKind,
    pub cf1: f64,
    /// `cmc[n-1]` = CMC(n).
    pub cmc: Vec<f64>,
    pub auroc: f64,
    pub roc: RocCurve,
    pub confusion: Confusion,
}

/// Runs the metric suite. `embed` receives the sorted record indices that
/// need embeddings and returns them in the same order.
pub fn evaluate_scenario(
    split: &ScenarioSplit,
    records: &[CirMeasurement],
    embed: impl FnOnce(&[usize]) -> Result<Vec<Embedding>>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let roles = scenario_roles(split, records)?;
    let all = roles.all();
    let embs = embed(&all)?;
    if embs.len() != all.len() {
        return Err(Error::InvalidState("embedding callback returned the wrong count".into()));
    }
    let pick = |idx: &[usize]| -> (Vec<Embedding>, Vec<u16>) {
        idx.iter()
            .map(|i| (embs[all.binary_search(i).expect("in union")].clone(), records[*i].device_id))
            .unzip()
    };
    let (ref_e, ref_l) = pick(&roles.reference);
    let (q_e, q_l) = pick(&roles.query);

    let gallery = build_gallery(&ref_e, &ref_l)?;
    let cmc = cmc_curve(&gallery, &q_e, &q_l)?;
    let (roc, auroc) = roc_and_auroc(&q_e, &q_l, opts.roc_thresholds, opts.max_pairs, opts.seed)?;
    let (cf1, pred) = linear_probe_cf1(&ref_e, &ref_l, &q_e, &q_l, &opts.probe)?;
    let confusion = confusion_matrix(&q_l, &pred)?;
    Ok(EvalReport {
        scenario: split.kind,
        cf1,
        cmc,
        auroc,
        roc,
        confusion,
    })
}
