//! Bipartite user-item interaction graph, per-user holdout split, and BPR
//! triplet sampling.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Neighborhoods;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }
}

/// Implicit-feedback graph. `A[u][i] = 1` iff `(u, i)` is an edge.
///
/// Edges are stored sorted by `(user, item)` and carry one partition label
/// each. Adjacency lists cover every edge regardless of partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    edges: Vec<(usize, usize)>,
    partition: Vec<Partition>,
    user_adj: Vec<Vec<usize>>,
    item_adj: Vec<Vec<usize>>,
    duplicate_count: usize,
}

impl InteractionGraph {
    /// Build from an edge list. Duplicates are dropped and counted; every
    /// edge starts in the training partition.
    pub fn build(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Result<Self> {
        for (row, &(u, i)) in edges.iter().enumerate() {
            if u >= num_users || i >= num_items {
                return Err(Error::Validation(format!(
                    "edge row {row}: ({u}, {i}) out of range for {num_users} users and {num_items} items"
                )));
            }
        }
        let mut sorted = edges.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let duplicate_count = edges.len() - sorted.len();

        let mut user_adj = vec![Vec::new(); num_users];
        let mut item_adj = vec![Vec::new(); num_items];
        for &(u, i) in &sorted {
            user_adj[u].push(i);
            item_adj[i].push(u);
        }
        Ok(Self {
            num_users,
            num_items,
            partition: vec![Partition::Train; sorted.len()],
            edges: sorted,
            user_adj,
            item_adj,
            duplicate_count,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn duplicate_count(&self) -> usize {
        self.duplicate_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn partition(&self) -> &[Partition] {
        &self.partition
    }

    /// All items of user `u`, sorted.
    pub fn user_items(&self, u: usize) -> &[usize] {
        &self.user_adj[u]
    }

    /// All users of item `i`, sorted.
    pub fn item_users(&self, i: usize) -> &[usize] {
        &self.item_adj[i]
    }

    pub fn has_edge(&self, u: usize, i: usize) -> bool {
        self.user_adj[u].binary_search(&i).is_ok()
    }

    pub fn edge_index(&self, u: usize, i: usize) -> Option<usize> {
        self.edges.binary_search(&(u, i)).ok()
    }

    pub fn label(&self, u: usize, i: usize) -> Option<Partition> {
        self.edge_index(u, i).map(|k| self.partition[k])
    }

    /// Range of `edges` belonging to user `u`.
    fn user_range(&self, u: usize) -> std::ops::Range<usize> {
        let start = self.edges.partition_point(|&(v, _)| v < u);
        start..start + self.user_adj[u].len()
    }

    /// Items of user `u` in partition `p`, sorted.
    pub fn items_in(&self, u: usize, p: Partition) -> Vec<usize> {
        self.user_range(u)
            .filter(|&k| self.partition[k] == p)
            .map(|k| self.edges[k].1)
            .collect()
    }

    /// Training edges in `(user, item)` order.
    pub fn train_edges(&self) -> Vec<(usize, usize)> {
        self.edges_in(Partition::Train)
    }

    pub fn edges_in(&self, p: Partition) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .zip(&self.partition)
            .filter(|(_, &q)| q == p)
            .map(|(&e, _)| e)
            .collect()
    }

    /// Replace the partition labels, given in sorted edge order.
    pub fn with_labels(&self, labels: &[Partition]) -> Result<Self> {
        if labels.len() != self.edges.len() {
            return Err(Error::Validation(format!(
                "{} labels for {} edges",
                labels.len(),
                self.edges.len()
            )));
        }
        let mut out = self.clone();
        out.partition = labels.to_vec();
        Ok(out)
    }

    /// Relabel every edge by a seeded per-user shuffle and largest-remainder
    /// split of `ratios` (train, validation, test). Users with fewer than
    /// three interactions keep everything in train.
    pub fn split_per_user(&self, ratios: [usize; 3], rng: &mut impl Rng) -> Result<Self> {
        if ratios.iter().any(|&r| r == 0) {
            return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
        }
        let mut out = self.clone();
        for u in 0..self.num_users {
            let range = self.user_range(u);
            let mut ks: Vec<usize> = range.collect();
            ks.shuffle(rng);
            let counts = if ks.len() < 3 {
                [ks.len(), 0, 0]
            } else {
                largest_remainder(ks.len(), ratios)
            };
            let labels = [Partition::Train, Partition::Validation, Partition::Test];
            let mut pos = 0;
            for (label, count) in labels.into_iter().zip(counts) {
                for &k in &ks[pos..pos + count] {
                    out.partition[k] = label;
                }
                pos += count;
            }
        }
        Ok(out)
    }
}

/// Split `n` into parts proportional to `ratios`; leftover units go to the
/// largest fractional remainders, earlier parts first on ties.
pub fn largest_remainder(n: usize, ratios: [usize; 3]) -> [usize; 3] {
    let total: usize = ratios.iter().sum();
    let mut counts = [0; 3];
    let mut rems = [(0usize, 0usize); 3];
    for k in 0..3 {
        counts[k] = n * ratios[k] / total;
        rems[k] = (n * ratios[k] % total, k);
    }
    let left = n - counts.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, k) in rems.iter().take(left) {
        counts[k] += 1;
    }
    counts
}

/// Training-edge structure consumed by the differentiable model.
///
/// Training edges are numbered `0..E` in `(user, item)` order. Per-edge
/// vectors (logits, scores, weights) use that numbering.
#[derive(Debug, Clone)]
pub struct TrainTopology {
    pub num_users: usize,
    pub num_items: usize,
    pub edge_users: Arc<[usize]>,
    pub edge_items: Arc<[usize]>,
    /// Row per user; entries are (edge, item).
    pub by_user: Arc<Neighborhoods>,
    /// Row per item; entries are (edge, user).
    pub by_item: Arc<Neighborhoods>,
    /// Row per node over the stacked `[users; items]` embedding matrix.
    /// User rows read item rows through slots `0..E` (user-side weights);
    /// item rows read user rows through slots `E..2E` (item-side weights).
    pub by_node: Arc<Neighborhoods>,
}

impl TrainTopology {
    pub fn new(g: &InteractionGraph) -> Self {
        let train = g.train_edges();
        let (n, m, e) = (g.num_users(), g.num_items(), train.len());
        let mut user_rows = vec![Vec::new(); n];
        let mut item_rows = vec![Vec::new(); m];
        for (k, &(u, i)) in train.iter().enumerate() {
            user_rows[u].push((k, i));
            item_rows[i].push((k, u));
        }
        let node_rows: Vec<Vec<(usize, usize)>> = user_rows
            .iter()
            .map(|row| row.iter().map(|&(k, i)| (k, n + i)).collect())
            .chain(item_rows.iter().map(|row| row.iter().map(|&(k, u)| (e + k, u)).collect()))
            .collect();
        Self {
            num_users: n,
            num_items: m,
            edge_users: train.iter().map(|e| e.0).collect(),
            edge_items: train.iter().map(|e| e.1).collect(),
            by_user: Arc::new(Neighborhoods::from_rows(&user_rows)),
            by_item: Arc::new(Neighborhoods::from_rows(&item_rows)),
            by_node: Arc::new(Neighborhoods::from_rows(&node_rows)),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edge_users.len()
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.by_user.range(u).len()
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.by_item.range(i).len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Rows of `(u, i⁺, j⁻)` with `i⁺` a training item of `u` and `j⁻` an item
/// `u` never interacted with in any partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub rows: Vec<Triplet>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn chunks(&self, size: usize) -> impl Iterator<Item = TripletBatch> + '_ {
        self.rows.chunks(size.max(1)).map(|c| TripletBatch { rows: c.to_vec() })
    }
}

fn sample_negative(g: &InteractionGraph, u: usize, rng: &mut impl Rng) -> Result<usize> {
    if g.user_items(u).len() >= g.num_items() {
        return Err(Error::Sampling { user: u });
    }
    loop {
        let j = rng.random_range(0..g.num_items());
        if !g.has_edge(u, j) {
            return Ok(j);
        }
    }
}

/// Draw `batch_size` triplets: a uniform training edge, then a uniform
/// non-interacted item by rejection.
pub fn sample_triplets(g: &InteractionGraph, batch_size: usize, rng: &mut impl Rng) -> Result<TripletBatch> {
    if batch_size == 0 {
        return Ok(TripletBatch::default());
    }
    let train = g.train_edges();
    if train.is_empty() {
        return Err(Error::Validation("no training edges to sample from".into()));
    }
    let mut rows = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (user, pos) = train[rng.random_range(0..train.len())];
        let neg = sample_negative(g, user, rng)?;
        rows.push(Triplet { user, pos, neg });
    }
    Ok(TripletBatch { rows })
}

/// One epoch of triplets: every training edge exactly once, shuffled, each
/// paired with a fresh negative.
pub fn epoch_triplets(g: &InteractionGraph, rng: &mut impl Rng) -> Result<TripletBatch> {
    let mut train = g.train_edges();
    train.shuffle(rng);
    let rows = train
        .into_iter()
        .map(|(user, pos)| Ok(Triplet { user, pos, neg: sample_negative(g, user, rng)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(TripletBatch { rows })
}
