//! Dataset container, on-disk formats, scenario splits and the synthetic
//! CIR generator.

mod csv_import;
mod format;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

pub use csv_import::{import_csv, read_csv};
pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use split::{make_split, ScenarioKind, ScenarioSplit, SplitParams};
pub use synth::{synth_generate, SynthConfig};

use crate::signal::{CirMeasurement, DEFAULT_SIGNAL_LEN};

/// One recording session (day and placement of the receiver).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionInfo {
    pub session_id: u8,
    pub distance_m: f32,
    pub day_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub signal_len: usize,
    pub num_devices: usize,
    pub num_locations: usize,
    pub measurements_per_cell: usize,
    pub uwb_channel: u8,
    pub center_freq_mhz: f64,
    pub bandwidth_mhz: f64,
    pub sessions: Vec<SessionInfo>,
}

impl Default for DatasetMeta {
    /// The measurement campaign layout: 13 emitters, 50 locations around the
    /// receiver, 2000 traces per cell, UWB channel 5.
    fn default() -> Self {
        Self {
            signal_len: DEFAULT_SIGNAL_LEN,
            num_devices: 13,
            num_locations: 50,
            measurements_per_cell: 2000,
            uwb_channel: 5,
            center_freq_mhz: 6489.6,
            bandwidth_mhz: 500.0,
            sessions: vec![
                SessionInfo {
                    session_id: 0,
                    distance_m: 1.0,
                    day_tag: "day1".into(),
                },
                SessionInfo {
                    session_id: 1,
                    distance_m: 2.0,
                    day_tag: "day2".into(),
                },
            ],
        }
    }
}

/// Metadata plus records, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<CirMeasurement>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Vec<&CirMeasurement> {
        idx.iter().map(|&i| &self.records[i]).collect()
    }
}
