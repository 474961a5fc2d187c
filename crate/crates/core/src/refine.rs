//! Graph refining layer.
//!
//! Item content is projected into a per-modality metric space, each user's
//! preference prototype is found by neighbor routing over their training
//! items, and every training edge is scored in both directions by a softmax
//! over the relevant neighborhood. Per-modality scores are then fused into
//! one weight per edge and direction; low weights softly prune the edge.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Neighborhoods, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::TrainTopology;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Acoustic,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Acoustic, Modality::Textual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Acoustic => "acoustic",
            Modality::Textual => "textual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "visual" | "v" => Ok(Modality::Visual),
            "acoustic" | "a" => Ok(Modality::Acoustic),
            "textual" | "t" => Ok(Modality::Textual),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Raw content features of every item for one modality (`M × D_m`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatureTable<S> {
    pub modality: Modality,
    pub features: Tensor<S>,
}

impl<S: Scalar> ModalityFeatureTable<S> {
    pub fn new(modality: Modality, features: Tensor<S>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Shape(format!(
                "{modality} features must be a matrix, got {:?}",
                features.shape()
            )));
        }
        if !features.all_finite() {
            return Err(Error::Validation(format!("{modality} features contain non-finite values")));
        }
        Ok(Self { modality, features })
    }

    pub fn num_items(&self) -> usize {
        self.features.rows()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn cast<T: Scalar>(&self) -> ModalityFeatureTable<T> {
        ModalityFeatureTable {
            modality: self.modality,
            features: self.features.cast(),
        }
    }
}

/// How per-modality affinity scores become one edge weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `max_m(ρ^m · s̄^m)`.
    #[default]
    BaseMax,
    /// `max_m(s̄^m)`.
    Max,
    /// `mean_m(s̄^m)`.
    Mean,
    /// Base-max followed by `relu(s − τ)`, `τ` the neighborhood mean.
    Hard,
    /// Ablation baseline: `1 / |N(·)|`, ignoring content.
    Uniform,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "base_max" => Ok(FusionMode::BaseMax),
            "max" => Ok(FusionMode::Max),
            "mean" => Ok(FusionMode::Mean),
            "hard" => Ok(FusionMode::Hard),
            "uniform" => Ok(FusionMode::Uniform),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Trainable refining tensors for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityParams<S> {
    pub modality: Modality,
    /// `D' × D_m`.
    pub weight: Tensor<S>,
    /// `D'`.
    pub bias: Tensor<S>,
    /// Routing seed `u_(0)` per user, `N × D'`.
    pub user_seed: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineParams<S> {
    pub modalities: Vec<ModalityParams<S>>,
    /// Base vector per user, `N × |modalities|`.
    pub user_base: Tensor<S>,
    /// Base vector per item, `M × |modalities|`.
    pub item_base: Tensor<S>,
}

impl<S: Scalar> RefineParams<S> {
    pub fn modality_order(&self) -> Vec<Modality> {
        self.modalities.iter().map(|m| m.modality).collect()
    }

    pub fn proj_dim(&self) -> Option<usize> {
        self.modalities.first().map(|m| m.weight.rows())
    }
}

/// Row-wise `leaky_relu(x W_mᵀ + b_m)`: item features `[M, D_m]`, weight
/// `[D', D_m]`, bias `[D']` give projected items `[M, D']`.
pub fn project_items<S: Scalar>(tape: &mut Tape<S>, features: Var, weight: Var, bias: Var, slope: S) -> Result<Var> {
    let (fw, ww) = (tape.value(features).cols(), tape.value(weight).cols());
    if tape.value(features).rank() != 2 || tape.value(weight).rank() != 2 || fw != ww {
        return Err(Error::Shape(format!(
            "projection weight {:?} does not match features {:?}",
            tape.value(weight).shape(),
            tape.value(features).shape()
        )));
    }
    let wt = tape.transpose(weight)?;
    let lin = tape.matmul(features, wt)?;
    let shifted = tape.add_row(lin, bias)?;
    tape.leaky_relu(shifted, slope)
}

/// Route one user's preference: starting from `seed`, repeatedly weight the
/// neighbors' projected vectors by a softmax of their inner products with
/// the current vector, add the weighted sum, and renormalize.
///
/// `projected` is the `[M, D']` item matrix and `neighbors` the user's
/// training items. With `iterations == 0` the normalized seed is returned.
pub fn route_preference<S: Scalar>(
    tape: &mut Tape<S>,
    user: usize,
    seed: Var,
    projected: Var,
    neighbors: &[usize],
    iterations: usize,
) -> Result<Var> {
    if neighbors.is_empty() {
        return Err(Error::Routing { user });
    }
    let width = tape.value(seed).len();
    let nb = tape.gather_rows(projected, neighbors.iter().copied().collect())?;
    let mut current = tape.reshape(seed, &[width, 1])?;
    if iterations == 0 {
        let flat = tape.reshape(current, &[width])?;
        return tape.l2_normalize(flat);
    }
    for _ in 0..iterations {
        let sims = tape.matmul(nb, current)?;
        let sims = tape.reshape(sims, &[neighbors.len()])?;
        let p = tape.softmax_over_set(sims)?;
        let p_row = tape.reshape(p, &[1, neighbors.len()])?;
        let pulled = tape.matmul(p_row, nb)?;
        let pulled = tape.reshape(pulled, &[width, 1])?;
        let moved = tape.add(current, pulled)?;
        let flat = tape.reshape(moved, &[width])?;
        let unit = tape.l2_normalize(flat)?;
        current = tape.reshape(unit, &[width, 1])?;
    }
    tape.reshape(current, &[width])
}

/// Route every user at once. `seeds` is `[N, D']`, `projected` `[M, D']`.
/// Users without training neighbors end at their normalized seed.
pub fn route_preferences<S: Scalar>(
    tape: &mut Tape<S>,
    seeds: Var,
    projected: Var,
    topo: &TrainTopology,
    iterations: usize,
) -> Result<Var> {
    let mut current = seeds;
    if iterations == 0 {
        return tape.normalize_rows(seeds);
    }
    for _ in 0..iterations {
        let logits = edge_logits(tape, current, projected, topo)?;
        let p = tape.segment_softmax(logits, topo.by_user.clone())?;
        let pulled = tape.aggregate(p, projected, topo.by_user.clone())?;
        let moved = tape.add(current, pulled)?;
        current = tape.normalize_rows(moved)?;
    }
    Ok(current)
}

/// `ūᵀ ī` for every training edge.
fn edge_logits<S: Scalar>(tape: &mut Tape<S>, users: Var, items: Var, topo: &TrainTopology) -> Result<Var> {
    let u = tape.gather_rows(users, topo.edge_users.clone())?;
    let i = tape.gather_rows(items, topo.edge_items.clone())?;
    tape.row_dot(u, i)
}

/// Per-modality affinities of every training edge, as `[E]` vectors.
#[derive(Debug, Clone, Copy)]
pub struct Affinity {
    /// `s̄_{u←i}`: softmax over the user's neighborhood.
    pub user_from_item: Var,
    /// `s̄_{i←u}`: softmax over the item's neighborhood.
    pub item_from_user: Var,
}

/// Bidirectional affinity scores for one modality from routed preferences
/// `[N, D']` and projected items `[M, D']`.
pub fn affinity_scores<S: Scalar>(tape: &mut Tape<S>, prefs: Var, projected: Var, topo: &TrainTopology) -> Result<Affinity> {
    let logits = edge_logits(tape, prefs, projected, topo)?;
    Ok(Affinity {
        user_from_item: tape.segment_softmax(logits, topo.by_user.clone())?,
        item_from_user: tape.segment_softmax(logits, topo.by_item.clone())?,
    })
}

/// Fused weights of every training edge, as `[E]` vectors.
#[derive(Debug, Clone, Copy)]
pub struct EdgeWeights {
    pub user_from_item: Var,
    pub item_from_user: Var,
}

fn stack_columns<S: Scalar>(tape: &mut Tape<S>, columns: &[Var]) -> Result<Var> {
    let cols = columns
        .iter()
        .map(|&c| {
            let n = tape.value(c).len();
            tape.reshape(c, &[n, 1])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_cols(&cols)
}

fn fuse_direction<S: Scalar>(
    tape: &mut Tape<S>,
    scores: &[Var],
    base: Var,
    owner: Arc<[usize]>,
    segments: Arc<Neighborhoods>,
    mode: FusionMode,
) -> Result<Var> {
    let stacked = stack_columns(tape, scores)?;
    match mode {
        FusionMode::Max => tape.row_max(stacked),
        FusionMode::Mean => tape.row_mean(stacked),
        FusionMode::BaseMax | FusionMode::Hard => {
            let rho = tape.gather_rows(base, owner)?;
            let weighted = tape.mul(rho, stacked)?;
            let fused = tape.row_max(weighted)?;
            if mode == FusionMode::Hard {
                let centered = tape.segment_center(fused, segments)?;
                tape.relu(centered)
            } else {
                Ok(fused)
            }
        }
        FusionMode::Uniform => unreachable!("uniform weights do not read scores"),
    }
}

/// Fuse per-modality affinities into one weight per edge and direction.
///
/// `user_base` is `[N, |M|]` and `item_base` `[M, |M|]`, columns in the
/// same order as `affinities`. Unavailable modalities are simply absent.
pub fn fuse_scores<S: Scalar>(
    tape: &mut Tape<S>,
    affinities: &[Affinity],
    user_base: Var,
    item_base: Var,
    topo: &TrainTopology,
    mode: FusionMode,
) -> Result<EdgeWeights> {
    if mode == FusionMode::Uniform {
        return Ok(uniform_weights(tape, topo));
    }
    if affinities.is_empty() {
        return Err(Error::Config("edge fusion needs at least one modality".into()));
    }
    let ui: Vec<Var> = affinities.iter().map(|a| a.user_from_item).collect();
    let iu: Vec<Var> = affinities.iter().map(|a| a.item_from_user).collect();
    Ok(EdgeWeights {
        user_from_item: fuse_direction(tape, &ui, user_base, topo.edge_users.clone(), topo.by_user.clone(), mode)?,
        item_from_user: fuse_direction(tape, &iu, item_base, topo.edge_items.clone(), topo.by_item.clone(), mode)?,
    })
}

/// Constant `1 / |N(u)|` and `1 / |N(i)|` weights: unweighted mean aggregation.
pub fn uniform_weights<S: Scalar>(tape: &mut Tape<S>, topo: &TrainTopology) -> EdgeWeights {
    let ui = topo
        .edge_users
        .iter()
        .map(|&u| S::one() / S::of_usize(topo.user_degree(u)))
        .collect();
    let iu = topo
        .edge_items
        .iter()
        .map(|&i| S::one() / S::of_usize(topo.item_degree(i)))
        .collect();
    EdgeWeights {
        user_from_item: tape.constant(Tensor::vector(ui)),
        item_from_user: tape.constant(Tensor::vector(iu)),
    }
}

/// Plain-value snapshot of fused and per-modality edge weights, for
/// inspection and export. Indexed by training edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeightSet<S> {
    pub edges: Vec<(usize, usize)>,
    pub user_from_item: Vec<S>,
    pub item_from_user: Vec<S>,
    pub modalities: Vec<Modality>,
    /// `[modality][edge]`.
    pub modality_user_from_item: Vec<Vec<S>>,
    pub modality_item_from_user: Vec<Vec<S>>,
}

impl<S: Scalar> EdgeWeightSet<S> {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn from_tape(
        tape: &Tape<S>,
        topo: &TrainTopology,
        fused: EdgeWeights,
        modalities: &[Modality],
        affinities: &[Affinity],
    ) -> Self {
        Self {
            edges: topo.edge_users.iter().copied().zip(topo.edge_items.iter().copied()).collect(),
            user_from_item: tape.value(fused.user_from_item).data().to_vec(),
            item_from_user: tape.value(fused.item_from_user).data().to_vec(),
            modalities: modalities.to_vec(),
            modality_user_from_item: affinities.iter().map(|a| tape.value(a.user_from_item).data().to_vec()).collect(),
            modality_item_from_user: affinities.iter().map(|a| tape.value(a.item_from_user).data().to_vec()).collect(),
        }
    }
}
