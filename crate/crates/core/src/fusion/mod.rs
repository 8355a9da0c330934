//! Multi-sample identification: probability voting over single-sample
//! predictions, and a transformer over concatenated raw traces.

mod concat;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use concat::{concat_input, concat_predict, concat_train, ConcatVitConfig, ConcatVitModel};

use crate::error::{Error, Result};
use crate::signal::CirMeasurement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LocationPolicy {
    #[serde(rename = "Sl")]
    SameLocation,
    #[serde(rename = "Dl")]
    DifferentLocation,
}

impl fmt::Display for LocationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocationPolicy::SameLocation => "Sl",
            LocationPolicy::DifferentLocation => "Dl",
        })
    }
}

impl FromStr for LocationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sl" | "same" | "same-location" => Ok(LocationPolicy::SameLocation),
            "dl" | "different" | "different-location" => Ok(LocationPolicy::DifferentLocation),
            _ => Err(Error::invalid(format!("unknown location policy {s:?}"))),
        }
    }
}

/// `k` records of one device, referenced by index into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleBundle {
    pub device_id: u16,
    pub indices: Vec<usize>,
    pub location_policy: LocationPolicy,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bundles {
    pub bundles: Vec<SampleBundle>,
    /// Devices (or, for same-location bundles, device×location cells) with
    /// fewer than `k` records.
    pub skipped: usize,
}

/// Groups `idx` into bundles of `k` records per device, drawn without
/// replacement in a seeded order.
pub fn bundle_builder(records: &[CirMeasurement], idx: &[usize], k: usize, policy: LocationPolicy, seed: u64) -> Result<Bundles> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_bundles(records, idx, k, policy, &mut rng)
}

pub(crate) fn build_bundles(
    records: &[CirMeasurement],
    idx: &[usize],
    k: usize,
    policy: LocationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Bundles> {
    if k == 0 {
        return Err(Error::invalid("bundle size k must be positive"));
    }
    let mut cells: BTreeMap<u16, BTreeMap<u16, Vec<usize>>> = BTreeMap::new();
    for &i in idx {
        let r = records.get(i).ok_or_else(|| Error::invalid(format!("record index {i} out of range")))?;
        cells.entry(r.device_id).or_default().entry(r.location_id).or_default().push(i);
    }
    let mut out = Bundles::default();
    for (device, mut locations) in cells {
        locations.values_mut().for_each(|v| v.shuffle(rng));
        let groups: Vec<Vec<usize>> = match policy {
            LocationPolicy::SameLocation => {
                let mut groups = Vec::new();
                for cell in locations.values() {
                    if cell.len() < k {
                        out.skipped += 1;
                    }
                    groups.extend(cell.chunks_exact(k).map(<[usize]>::to_vec));
                }
                groups
            }
            LocationPolicy::DifferentLocation => {
                // Interleave locations so consecutive draws differ in location
                // whenever the device still has records at several of them.
                let total: usize = locations.values().map(Vec::len).sum();
                if total < k {
                    out.skipped += 1;
                    continue;
                }
                let mut queues: Vec<Vec<usize>> = locations.into_values().collect();
                queues.shuffle(rng);
                let mut seq = Vec::with_capacity(total);
                while seq.len() < total {
                    queues.sort_by_key(|q| std::cmp::Reverse(q.len()));
                    for q in queues.iter_mut().filter(|q| !q.is_empty()).take(k) {
                        seq.push(q.pop().expect("nonempty"));
                    }
                }
                seq.chunks_exact(k).map(<[usize]>::to_vec).collect()
            }
        };
        out.bundles.extend(groups.into_iter().map(|indices| SampleBundle {
            device_id: device,
            indices,
            location_policy: policy,
        }));
    }
    Ok(out)
}

/// Mean of per-sample probability vectors.
pub fn vote(probs: &[&[f64]]) -> Result<Vec<f64>> {
    let first = probs.first().ok_or_else(|| Error::invalid("cannot vote over an empty bundle"))?;
    let k = first.len();
    if probs.iter().any(|p| p.len() != k) {
        return Err(Error::invalid("probability vectors differ in length"));
    }
    let mut mean = vec![0.0; k];
    for p in probs {
        mean.iter_mut().zip(*p).for_each(|(m, v)| *m += v);
    }
    let n = probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Voted probabilities for each bundle, given per-record probabilities
/// indexed like the dataset.
pub fn vote_predict(record_probs: &dyn Fn(usize) -> Option<Vec<f64>>, bundles: &[SampleBundle]) -> Result<Vec<Vec<f64>>> {
    bundles
        .iter()
        .map(|b| {
            let probs = b
                .indices
                .iter()
                .map(|&i| record_probs(i).ok_or_else(|| Error::invalid(format!("no prediction for record {i}"))))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
            vote(&refs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn records(layout: &[(u16, u16, usize)]) -> Vec<CirMeasurement> {
        let mut out = Vec::new();
        for &(d, l, n) in layout {
            for _ in 0..n {
                out.push(CirMeasurement::new(vec![Complex64::new(1.0, 0.0); 4], d, l));
            }
        }
        out
    }

    #[test]
    fn vote_hand_case() {
        let p = vote(&[&[0.6, 0.4], &[0.2, 0.8]]).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-12 && (p[1] - 0.6).abs() < 1e-12);
        assert_eq!(argmax(&p), 1);
    }

    #[test]
    fn vote_identities() {
        let p = [0.1, 0.7, 0.2];
        assert_eq!(vote(&[&p]).unwrap(), p.to_vec());
        let three = vote(&[&p, &p, &p]).unwrap();
        three.iter().zip(p).for_each(|(a, b)| assert!((a - b).abs() < 1e-15));
        assert!((three.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn vote_rejects_empty() {
        assert!(matches!(vote(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.25, 0.5, 0.5, 0.25]), 1);
    }

    #[test]
    fn k1_gives_one_bundle_per_record() {
        let recs = records(&[(0, 0, 3), (1, 2, 4)]);
        let idx: Vec<usize> = (0..recs.len()).collect();
        for policy in [LocationPolicy::SameLocation, LocationPolicy::DifferentLocation] {
            let b = bundle_builder(&recs, &idx, 1, policy, 1).unwrap();
            assert_eq!(b.bundles.len(), 7);
            assert_eq!(b.skipped, 0);
        }
    }

    #[test]
    fn short_device_is_skipped() {
        let recs = records(&[(0, 0, 5), (0, 1, 4), (1, 0, 12)]);
        let idx: Vec<usize> = (0..recs.len()).collect();
        let b = bundle_builder(&recs, &idx, 10, LocationPolicy::DifferentLocation, 1).unwrap();
        assert_eq!(b.skipped, 1);
        assert_eq!(b.bundles.len(), 1);
        assert!(b.bundles.iter().all(|x| x.device_id == 1));
    }

    #[test]
    fn different_location_spreads_over_locations() {
        let recs = records(&[(0, 0, 6), (0, 1, 6), (0, 2, 6)]);
        let idx: Vec<usize> = (0..recs.len()).collect();
        let b = bundle_builder(&recs, &idx, 3, LocationPolicy::DifferentLocation, 9).unwrap();
        assert_eq!(b.bundles.len(), 6);
        for bundle in &b.bundles {
            let mut locs: Vec<u16> = bundle.indices.iter().map(|&i| recs[i].location_id).collect();
            locs.sort();
            locs.dedup();
            assert_eq!(locs.len(), 3);
        }
    }

    #[test]
    fn same_location_stays_in_cell() {
        let recs = records(&[(0, 0, 7), (0, 1, 2), (1, 0, 3)]);
        let idx: Vec<usize> = (0..recs.len()).collect();
        let b = bundle_builder(&recs, &idx, 3, LocationPolicy::SameLocation, 4).unwrap();
        assert_eq!(b.bundles.len(), 3);
        assert_eq!(b.skipped, 1);
        for bundle in &b.bundles {
            let l = recs[bundle.indices[0]].location_id;
            assert!(bundle.indices.iter().all(|&i| recs[i].location_id == l && recs[i].device_id == bundle.device_id));
        }
    }

    #[test]
    fn bundles_are_seeded_and_disjoint() {
        let recs = records(&[(0, 0, 10), (0, 1, 10), (1, 3, 10)]);
        let idx: Vec<usize> = (0..recs.len()).collect();
        let a = bundle_builder(&recs, &idx, 3, LocationPolicy::DifferentLocation, 5).unwrap();
        let b = bundle_builder(&recs, &idx, 3, LocationPolicy::DifferentLocation, 5).unwrap();
        let c = bundle_builder(&recs, &idx, 3, LocationPolicy::DifferentLocation, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut used: Vec<usize> = a.bundles.iter().flat_map(|x| x.indices.clone()).collect();
        let n = used.len();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), n);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("Dl".parse::<LocationPolicy>().unwrap(), LocationPolicy::DifferentLocation);
        assert_eq!("sl".parse::<LocationPolicy>().unwrap(), LocationPolicy::SameLocation);
        assert!("xx".parse::<LocationPolicy>().is_err());
    }
}
