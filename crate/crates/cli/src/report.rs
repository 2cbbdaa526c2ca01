//! JSON documents printed or written by the commands.

use std::collections::BTreeMap;

use aurec_core::{GeometryReport, InteractionSet, RankingMetrics};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub l_align: f64,
    pub l_uniform: f64,
    pub l_uniform_user: f64,
    pub l_uniform_item: f64,
}

impl From<GeometryReport> for Geometry {
    fn from(g: GeometryReport) -> Self {
        Geometry {
            l_align: g.l_align,
            l_uniform: g.l_uniform,
            l_uniform_user: g.l_uniform_user,
            l_uniform_item: g.l_uniform_item,
        }
    }
}

/// Output of `eval`, also stored per split in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub recall: BTreeMap<String, f64>,
    pub ndcg: BTreeMap<String, f64>,
    pub n_users_evaluated: usize,
    /// `train` or `all`: which interactions the geometry terms cover.
    pub geometry_over: String,
    #[serde(flatten)]
    pub geometry: Geometry,
}

impl MetricsReport {
    pub fn new(split: &str, ranking: &RankingMetrics, geometry_over: &str, geometry: GeometryReport) -> Self {
        let keyed = |m: &BTreeMap<usize, f64>| m.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        MetricsReport {
            split: split.to_owned(),
            recall: keyed(&ranking.recall),
            ndcg: keyed(&ranking.ndcg),
            n_users_evaluated: ranking.n_users_evaluated,
            geometry_over: geometry_over.to_owned(),
            geometry: geometry.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub path: String,
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    /// SHA-256 over `user\titem\n` lines in stored order.
    pub sha256: String,
}

impl DatasetFingerprint {
    pub fn of(path: &str, set: &InteractionSet) -> Self {
        let mut h = Sha256::new();
        for p in set.pairs() {
            h.update(format!("{}\t{}\n", p.user, p.item).as_bytes());
        }
        DatasetFingerprint {
            path: path.to_owned(),
            n_users: set.n_users(),
            n_items: set.n_items(),
            n_interactions: set.len(),
            sha256: hex::encode(h.finalize()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: String,
    pub checkpoint_meta: String,
    pub trace: String,
}

/// Record of one `train` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Effective config as `key=value` lines.
    pub config: String,
    pub dataset: DatasetFingerprint,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics: BTreeMap<String, MetricsReport>,
    pub artifacts: Artifacts,
}
