//! Synthetic multimodal implicit-feedback data with planted user preferences
//! and labeled false-positive edges.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::graph::InteractionGraph;
use crate::io::{features_file, write_features, write_interactions, write_labels, write_string, EdgeLabel};
use crate::io::{INTERACTIONS_FILE, LABELS_FILE};
use crate::refine::{EdgeWeightSet, Modality, ModalityFeatureTable};
use crate::rng::{stream_rng, Stream};

pub const SPEC_FILE: &str = "spec.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub modality: Modality,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub modalities: Vec<ModalitySpec>,
    pub interactions_per_user: usize,
    /// Fraction `φ` of each user's edges that are false positives.
    pub noise_fraction: f64,
    /// Radius of the sphere the cluster centroids are drawn on.
    pub cluster_separation: f64,
    /// Standard deviation of the per-item Gaussian perturbation.
    pub feature_noise_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return fail(format!("noise_fraction must lie in [0, 1), got {}", self.noise_fraction));
        }
        if self.num_clusters == 0 || self.num_clusters > self.num_items {
            return fail(format!(
                "num_clusters must lie in 1..={}, got {}",
                self.num_items, self.num_clusters
            ));
        }
        if self.num_users == 0 || self.interactions_per_user == 0 {
            return fail("num_users and interactions_per_user must be positive".into());
        }
        if self.modalities.iter().any(|m| m.width == 0) {
            return fail("modality widths must be positive".into());
        }
        let mut names: Vec<Modality> = self.modalities.iter().map(|m| m.modality).collect();
        names.sort();
        names.dedup();
        if names.len() != self.modalities.len() {
            return fail("modalities listed twice".into());
        }
        if !(self.cluster_separation >= 0.0 && self.feature_noise_scale >= 0.0) {
            return fail("cluster_separation and feature_noise_scale must be non-negative".into());
        }
        Ok(())
    }

    /// `(true, false)` edge counts per user.
    pub fn edge_counts(&self) -> (usize, usize) {
        let k = self.interactions_per_user;
        let n_false = ((self.noise_fraction * k as f64) + 1e-9).floor() as usize;
        (k - n_false, n_false)
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub graph: InteractionGraph,
    pub features: Vec<ModalityFeatureTable<f64>>,
    /// One label per edge, in the graph's sorted edge order.
    pub labels: Vec<((usize, usize), EdgeLabel)>,
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
}

impl SynthDataset {
    pub fn false_fraction(&self) -> f64 {
        let f = self.labels.iter().filter(|l| l.1 == EdgeLabel::FalsePositive).count();
        f as f64 / self.labels.len().max(1) as f64
    }

    /// Write interactions, one feature file per modality, labels, and the
    /// spec echo into `dir`. Returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut paths = vec![dir.join(INTERACTIONS_FILE)];
        write_interactions(&paths[0], self.graph.edges())?;
        for table in &self.features {
            let p = dir.join(features_file(table.modality));
            write_features(&p, &table.features)?;
            paths.push(p);
        }
        let p = dir.join(LABELS_FILE);
        write_labels(&p, &self.labels)?;
        paths.push(p);
        let p = dir.join(SPEC_FILE);
        write_string(&p, &(serde_json::to_string_pretty(&self.spec).expect("spec serializes") + "\n"))?;
        paths.push(p);
        Ok(paths)
    }
}

/// Balanced assignment: shuffle, then deal positions round-robin.
fn deal(count: usize, clusters: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let mut out = vec![0; count];
    for (pos, &x) in order.iter().enumerate() {
        out[x] = pos % clusters;
    }
    out
}

fn on_sphere(width: usize, radius: f64, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..width).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| radius * x / norm).collect();
        }
    }
}

/// Draw a dataset. Items and users are dealt evenly across clusters; each
/// user's true edges come from their own cluster and false edges uniformly
/// from the others.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Synth, 0);
    let c = spec.num_clusters;
    let item_cluster = deal(spec.num_items, c, &mut rng);
    let user_cluster = deal(spec.num_users, c, &mut rng);

    let noise = Normal::new(0.0, spec.feature_noise_scale)
        .map_err(|e| Error::Generation(format!("feature noise: {e}")))?;
    let mut features = Vec::with_capacity(spec.modalities.len());
    for m in &spec.modalities {
        let centroids: Vec<Vec<f64>> = (0..c).map(|_| on_sphere(m.width, spec.cluster_separation, &mut rng)).collect();
        let table = Tensor::from_fn(spec.num_items, m.width, |i, d| {
            centroids[item_cluster[i]][d] + noise.sample(&mut rng)
        });
        features.push(ModalityFeatureTable::new(m.modality, table)?);
    }

    let mut members = vec![Vec::new(); c];
    for (i, &k) in item_cluster.iter().enumerate() {
        members[k].push(i);
    }
    if let Some(k) = members.iter().position(Vec::is_empty) {
        return Err(Error::Generation(format!("cluster {k} has no items")));
    }
    let (n_true, n_false) = spec.edge_counts();
    let mut labeled = Vec::with_capacity(spec.num_users * spec.interactions_per_user);
    for u in 0..spec.num_users {
        let own = &members[user_cluster[u]];
        if own.len() < n_true {
            return Err(Error::Generation(format!(
                "user {u} needs {n_true} true edges but cluster {} has {} items",
                user_cluster[u],
                own.len()
            )));
        }
        let others: Vec<usize> = (0..spec.num_items).filter(|&i| item_cluster[i] != user_cluster[u]).collect();
        if others.len() < n_false {
            return Err(Error::Generation(format!(
                "user {u} needs {n_false} false edges but only {} items lie outside cluster {}",
                others.len(),
                user_cluster[u]
            )));
        }
        for &i in own.choose_multiple(&mut rng, n_true) {
            labeled.push(((u, i), EdgeLabel::TruePositive));
        }
        for &i in others.choose_multiple(&mut rng, n_false) {
            labeled.push(((u, i), EdgeLabel::FalsePositive));
        }
    }
    labeled.sort_by_key(|l| l.0);
    let edges: Vec<(usize, usize)> = labeled.iter().map(|l| l.0).collect();
    let graph = InteractionGraph::build(spec.num_users, spec.num_items, &edges)?;
    Ok(SynthDataset {
        spec: spec.clone(),
        graph,
        features,
        labels: labeled,
        user_cluster,
        item_cluster,
    })
}

/// AUC of the fused `s_{u←i}` weights separating true-positive from
/// false-positive training edges. Labels on edges without a weight (held
/// out of training) are ignored.
pub fn edge_weight_auc(weights: &EdgeWeightSet<f64>, labels: &[((usize, usize), EdgeLabel)]) -> Result<f64> {
    let (scores, flags) = labeled_weights(weights, labels);
    auc(&scores, &flags)
}

/// Mean fused `s_{u←i}` weight over true and false training edges.
pub fn mean_weights(weights: &EdgeWeightSet<f64>, labels: &[((usize, usize), EdgeLabel)]) -> (f64, f64) {
    let (scores, flags) = labeled_weights(weights, labels);
    let mean = |want: bool| {
        let v: Vec<f64> = scores.iter().zip(&flags).filter(|p| *p.1 == want).map(|p| *p.0).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    (mean(true), mean(false))
}

fn labeled_weights(weights: &EdgeWeightSet<f64>, labels: &[((usize, usize), EdgeLabel)]) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut flags = Vec::new();
    for &(edge, label) in labels {
        if let Ok(k) = weights.edges.binary_search(&edge) {
            scores.push(weights.user_from_item[k]);
            flags.push(label == EdgeLabel::TruePositive);
        }
    }
    (scores, flags)
}
