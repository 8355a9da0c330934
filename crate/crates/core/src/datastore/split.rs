use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::CirMeasurement;

/// Evaluation scenario, ordered by difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// Seen devices at seen locations.
    S1,
    /// Seen devices at unseen locations.
    S2,
    /// Unseen devices at unseen locations (open set).
    S3,
    /// Different day and receiver distance.
    S4,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" | "1" => Ok(Self::S1),
            "S2" | "2" => Ok(Self::S2),
            "S3" | "3" => Ok(Self::S3),
            "S4" | "4" => Ok(Self::S4),
            _ => Err(Error::invalid(format!("unknown scenario {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    pub seed: u64,
    pub holdout_devices: usize,
    pub holdout_locations: usize,
    pub test_fraction: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            seed: 0,
            holdout_devices: 3,
            holdout_locations: 3,
            test_fraction: 0.2,
        }
    }
}

/// Train/test partition of record indices. Serialized as the split JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSplit {
    pub kind: ScenarioKind,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub heldout_devices: Vec<u16>,
    pub heldout_locations: Vec<u16>,
    pub seed: u64,
}

impl ScenarioSplit {
    /// Location whose data serves as the open-set reference in scenario 3.
    pub fn reference_location(&self) -> Option<u16> {
        self.heldout_locations.first().copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn pick<T: Copy + Ord>(values: &BTreeSet<T>, n: usize, what: &str, rng: &mut ChaCha8Rng) -> Result<Vec<T>> {
    if n >= values.len() {
        return Err(Error::invalid(format!(
            "cannot hold out {n} {what}: only {} distinct values",
            values.len()
        )));
    }
    let mut pool: Vec<T> = values.iter().copied().collect();
    pool.shuffle(rng);
    let mut chosen = pool[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn make_split(records: &[CirMeasurement], kind: ScenarioKind, params: &SplitParams) -> Result<ScenarioSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let devices: BTreeSet<u16> = records.iter().map(|r| r.device_id).collect();
    let locations: BTreeSet<u16> = records.iter().map(|r| r.location_id).collect();
    let mut split = ScenarioSplit {
        kind,
        train_idx: Vec::new(),
        test_idx: Vec::new(),
        heldout_devices: Vec::new(),
        heldout_locations: Vec::new(),
        seed: params.seed,
    };

    match kind {
        ScenarioKind::S1 => {
            if !(0.0..1.0).contains(&params.test_fraction) {
                return Err(Error::invalid("test_fraction must lie in [0, 1)"));
            }
            let mut cells: BTreeMap<(u16, u16), Vec<usize>> = BTreeMap::new();
            for (i, r) in records.iter().enumerate() {
                cells.entry((r.device_id, r.location_id)).or_default().push(i);
            }
            for idx in cells.values_mut() {
                idx.shuffle(&mut rng);
                // keep at least one record of every cell in train
                let n_test = ((idx.len() as f64 * params.test_fraction).round() as usize).min(idx.len() - 1);
                split.test_idx.extend_from_slice(&idx[..n_test]);
                split.train_idx.extend_from_slice(&idx[n_test..]);
            }
        }
        ScenarioKind::S2 => {
            if params.holdout_locations == 0 {
                return Err(Error::invalid("scenario 2 needs at least one held-out location"));
            }
            split.heldout_locations = pick(&locations, params.holdout_locations, "locations", &mut rng)?;
            for (i, r) in records.iter().enumerate() {
                if split.heldout_locations.contains(&r.location_id) {
                    split.test_idx.push(i);
                } else {
                    split.train_idx.push(i);
                }
            }
        }
        ScenarioKind::S3 => {
            if params.holdout_devices == 0 || params.holdout_locations == 0 {
                return Err(Error::invalid("scenario 3 needs held-out devices and locations"));
            }
            split.heldout_devices = pick(&devices, params.holdout_devices, "devices", &mut rng)?;
            split.heldout_locations = pick(&locations, params.holdout_locations, "locations", &mut rng)?;
            for (i, r) in records.iter().enumerate() {
                let dev_out = split.heldout_devices.contains(&r.device_id);
                let loc_out = split.heldout_locations.contains(&r.location_id);
                if dev_out {
                    split.test_idx.push(i);
                } else if !loc_out {
                    split.train_idx.push(i);
                }
            }
        }
        ScenarioKind::S4 => {
            for (i, r) in records.iter().enumerate() {
                if r.distance_m == 1.0 {
                    split.train_idx.push(i);
                } else if r.distance_m == 2.0 {
                    split.test_idx.push(i);
                }
            }
            if split.train_idx.is_empty() || split.test_idx.is_empty() {
                return Err(Error::invalid("scenario 4 needs both 1 m and 2 m sessions"));
            }
        }
    }
    split.train_idx.sort_unstable();
    split.test_idx.sort_unstable();
    Ok(split)
}
