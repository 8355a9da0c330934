//! Open-set re-identification: reference galleries, cosine ranking and the
//! evaluation metrics (linear-probe F1, CMC, ROC/AUROC).

mod pca;
mod probe;
pub mod report;
mod roc;
mod scenario;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use pca::{pca2, Pca2};
pub use probe::{confusion_matrix, linear_probe, linear_probe_cf1, macro_f1, Confusion, LinearProbe, ProbeConfig};
pub use roc::{auroc_exact, pair_distances, roc_and_auroc, roc_curve, PairSet, RocCurve, RocPoint};
pub use scenario::{evaluate_scenario, scenario_roles, EvalOptions, EvalReport, ScenarioRoles};

use crate::embedding::{norm, Embedding};
use crate::error::{Error, Result};

/// Mean embeddings below this norm cannot be renormalized.
pub const DEGENERATE_NORM: f64 = 1e-9;

/// One unit-norm reference per device.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gallery {
    pub entries: BTreeMap<u16, Embedding>,
}

impl Gallery {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u16) -> Option<&Embedding> {
        self.entries.get(&id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Gallery = serde_json::from_str(text)?;
        for (&id, e) in &g.entries {
            if ((norm(e.as_slice())) - 1.0).abs() > crate::embedding::UNIT_NORM_TOLERANCE {
                return Err(Error::invalid(format!("reference for device {id} is not unit-norm")));
            }
        }
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Per-device mean of `embeddings`, renormalized.
pub fn build_gallery(embeddings: &[Embedding], labels: &[u16]) -> Result<Gallery> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid("embeddings and labels differ in length"));
    }
    if embeddings.is_empty() {
        return Err(Error::invalid("cannot build a gallery from no embeddings"));
    }
    let dim = embeddings[0].dim();
    let mut sums: BTreeMap<u16, (Vec<f64>, usize, &Embedding)> = BTreeMap::new();
    for (e, &id) in embeddings.iter().zip(labels) {
        if e.dim() != dim {
            return Err(Error::invalid("embeddings differ in dimension"));
        }
        let s = sums.entry(id).or_insert_with(|| (vec![0.0; dim], 0, e));
        s.0.iter_mut().zip(e.as_slice()).for_each(|(a, b)| *a += b);
        s.1 += 1;
    }
    let mut entries = BTreeMap::new();
    for (id, (sum, count, first)) in sums {
        // a lone embedding is kept verbatim rather than renormalized
        let reference = if count == 1 {
            first.clone()
        } else if norm(&sum) / (count as f64) < DEGENERATE_NORM {
            return Err(Error::DegenerateReference(id));
        } else {
            Embedding::normalized(sum)?
        };
        entries.insert(id, reference);
    }
    Ok(Gallery { entries })
}

/// All gallery ids ranked by cosine similarity to `query`, highest first;
/// equal similarities rank the lower id first.
pub fn identify(gallery: &Gallery, query: &Embedding) -> Vec<(u16, f64)> {
    let mut ranked: Vec<(u16, f64)> = gallery.entries.iter().map(|(&id, r)| (id, r.cosine(query))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// `cmc[n-1]` is the fraction of queries whose true id ranks within the top `n`.
pub fn cmc_curve(gallery: &Gallery, queries: &[Embedding], labels: &[u16]) -> Result<Vec<f64>> {
    if queries.len() != labels.len() {
        return Err(Error::invalid("queries and labels differ in length"));
    }
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::invalid("CMC needs queries and a nonempty gallery"));
    }
    let g = gallery.len();
    let mut hits = vec![0usize; g];
    for (q, &id) in queries.iter().zip(labels) {
        if gallery.get(id).is_none() {
            return Err(Error::invalid(format!("query device {id} has no gallery reference")));
        }
        let rank = identify(gallery, q).iter().position(|&(gid, _)| gid == id).expect("id is in gallery");
        hits[rank] += 1;
    }
    let m = queries.len() as f64;
    let mut acc = 0;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / m
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn single_embedding_is_its_own_reference() {
        let e = unit(&[0.3, -0.4, 0.5]);
        let g = build_gallery(&[e.clone()], &[4]).unwrap();
        assert_eq!(g.get(4), Some(&e));
    }

    #[test]
    fn opposite_embeddings_are_degenerate() {
        let e = unit(&[1.0, 2.0]);
        let f = unit(&[-1.0, -2.0]);
        assert!(matches!(build_gallery(&[e, f], &[3, 3]), Err(Error::DegenerateReference(3))));
    }

    #[test]
    fn reference_bisects_symmetric_pair() {
        let a = 10f64.to_radians();
        let dir = 0.7f64;
        let e = unit(&[(dir + a).cos(), (dir + a).sin()]);
        let f = unit(&[(dir - a).cos(), (dir - a).sin()]);
        let g = build_gallery(&[e, f], &[1, 1]).unwrap();
        let r = g.get(1).unwrap().as_slice();
        assert!((r[0] - dir.cos()).abs() < 1e-12 && (r[1] - dir.sin()).abs() < 1e-12);
    }

    #[test]
    fn exact_match_ranks_first() {
        let refs = [unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0]), unit(&[0.6, 0.8, 0.0])];
        let g = build_gallery(&refs, &[5, 2, 9]).unwrap();
        let r = identify(&g, &refs[2]);
        assert_eq!(r[0].0, 9);
        assert!((r[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![9, 2, 5]);
    }

    #[test]
    fn orthogonal_query_falls_back_to_id_order() {
        let g = build_gallery(&[unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])], &[8, 3]).unwrap();
        let r = identify(&g, &unit(&[0.0, 0.0, 1.0]));
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![3, 8]);
        assert!(r.iter().all(|x| x.1.abs() < 1e-12));
    }

    #[test]
    fn cmc_hand_case() {
        let refs = [unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[-1.0, 0.0])];
        let g = build_gallery(&refs, &[0, 1, 2]).unwrap();
        let queries = [unit(&[1.0, 0.1]), unit(&[0.1, 1.0]), unit(&[0.9, 0.2])];
        let cmc = cmc_curve(&g, &queries, &[0, 1, 2]).unwrap();
        assert!((cmc[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(cmc[2], 1.0);
    }

    #[test]
    fn cmc_rejects_unknown_id() {
        let g = build_gallery(&[unit(&[1.0, 0.0])], &[0]).unwrap();
        assert!(matches!(cmc_curve(&g, &[unit(&[1.0, 0.0])], &[7]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gallery_json_round_trip() {
        let g = build_gallery(&[unit(&[0.1, 0.2, 0.3]), unit(&[-0.7, 0.1, 0.05])], &[12, 3]).unwrap();
        let back = Gallery::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(g, back);
    }
}
