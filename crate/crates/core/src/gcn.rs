//! Weighted graph convolution over the refined graph and the prediction layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::TrainTopology;
use crate::refine::{EdgeWeights, FusionMode, Modality, ModalityParams, RefineParams};
use crate::scalar::Scalar;

/// Regularizer applied to the parameter vector θ in the BPR objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    /// `λ‖θ‖₂`.
    #[default]
    Norm,
    /// `λ‖θ‖₂²`.
    SquaredNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// ID embedding width `D`.
    pub embed_dim: usize,
    /// Projected content width `D'`.
    pub proj_dim: usize,
    /// Convolution depth `L`.
    pub layers: usize,
    /// Routing iterations `T`.
    pub routing_iters: usize,
    /// Negative slope of the projection activation.
    pub slope: f64,
    pub learning_rate: f64,
    /// Regularization weight `λ`.
    pub reg_weight: f64,
    pub reg_kind: RegKind,
    /// Ranking cutoff.
    pub k: usize,
    pub fusion: FusionMode,
    /// Predict from ID embeddings only (prediction layer drops content).
    pub id_only: bool,
    /// Modalities used, in concatenation order.
    pub modalities: Vec<Modality>,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub split: [usize; 3],
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            proj_dim: 64,
            layers: 2,
            routing_iters: 3,
            slope: 0.01,
            learning_rate: 0.01,
            reg_weight: 1e-3,
            reg_kind: RegKind::Norm,
            k: 10,
            fusion: FusionMode::BaseMax,
            id_only: false,
            modalities: Modality::ALL.to_vec(),
            batch_size: 1024,
            max_epochs: 500,
            patience: 20,
            split: [8, 1, 1],
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("proj_dim", self.proj_dim),
            ("layers", self.layers),
            ("routing_iters", self.routing_iters),
            ("k", self.k),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::Config(format!("slope must lie in (0, 1), got {}", self.slope)));
        }
        if !(self.reg_weight >= 0.0) || !self.reg_weight.is_finite() {
            return Err(Error::Config(format!("reg_weight must be non-negative, got {}", self.reg_weight)));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return Err(Error::Config("modalities listed twice".into()));
        }
        if self.modalities.is_empty() && self.fusion != FusionMode::Uniform {
            return Err(Error::Config(format!(
                "fusion mode {:?} needs at least one modality",
                self.fusion
            )));
        }
        Ok(())
    }

    /// Width of the assembled user/item representation.
    pub fn representation_width(&self) -> usize {
        if self.id_only {
            self.embed_dim
        } else {
            self.embed_dim + self.modalities.len() * self.proj_dim
        }
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub num_users: usize,
    pub num_items: usize,
    /// Stacked `[users; items]` ID embeddings, `(N + M) × D`.
    pub embeddings: Tensor<S>,
    pub refine: RefineParams<S>,
    pub hyper: Hyperparams,
}

fn xavier<S: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<S> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| S::of(rng.random_range(-limit..limit)))
}

impl<S: Scalar> ModelParams<S> {
    /// Xavier-uniform initialization; base vectors start at one and
    /// projection biases at zero. `feature_widths` pairs each modality in
    /// `hyper.modalities` with its raw width `D_m`.
    pub fn init(
        num_users: usize,
        num_items: usize,
        feature_widths: &[(Modality, usize)],
        hyper: &Hyperparams,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        hyper.validate()?;
        let order: Vec<Modality> = feature_widths.iter().map(|f| f.0).collect();
        if order != hyper.modalities {
            return Err(Error::Config(format!(
                "feature tables {order:?} do not match configured modalities {:?}",
                hyper.modalities
            )));
        }
        let embeddings = xavier(num_users + num_items, hyper.embed_dim, rng);
        let modalities = feature_widths
            .iter()
            .map(|&(modality, width)| ModalityParams {
                modality,
                weight: xavier(hyper.proj_dim, width, rng),
                bias: Tensor::zeros(&[hyper.proj_dim]),
                user_seed: xavier(num_users, hyper.proj_dim, rng),
            })
            .collect();
        let nm = feature_widths.len();
        Ok(Self {
            num_users,
            num_items,
            embeddings,
            refine: RefineParams {
                modalities,
                user_base: Tensor::full(&[num_users, nm], S::one()),
                item_base: Tensor::full(&[num_items, nm], S::one()),
            },
            hyper: hyper.clone(),
        })
    }

    /// Trainable tensors in a fixed order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("embeddings".to_string(), &self.embeddings)];
        for m in &self.refine.modalities {
            out.push((format!("{}.weight", m.modality), &m.weight));
            out.push((format!("{}.bias", m.modality), &m.bias));
            out.push((format!("{}.user_seed", m.modality), &m.user_seed));
        }
        out.push(("user_base".to_string(), &self.refine.user_base));
        out.push(("item_base".to_string(), &self.refine.item_base));
        out
    }

    /// Mutable view in the same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.embeddings];
        for m in &mut self.refine.modalities {
            out.push(&mut m.weight);
            out.push(&mut m.bias);
            out.push(&mut m.user_seed);
        }
        out.push(&mut self.refine.user_base);
        out.push(&mut self.refine.item_base);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            num_users: self.num_users,
            num_items: self.num_items,
            embeddings: self.embeddings.cast(),
            refine: RefineParams {
                modalities: self
                    .refine
                    .modalities
                    .iter()
                    .map(|m| ModalityParams {
                        modality: m.modality,
                        weight: m.weight.cast(),
                        bias: m.bias.cast(),
                        user_seed: m.user_seed.cast(),
                    })
                    .collect(),
                user_base: self.refine.user_base.cast(),
                item_base: self.refine.item_base.cast(),
            },
            hyper: self.hyper.clone(),
        }
    }
}

/// Weighted message passing over training edges, returning layers
/// `e^(0) ..= e^(L)` of the stacked `[users; items]` embedding matrix.
///
/// Each layer is a pure weighted sum of the previous layer's neighbor rows:
/// no self-loop, no transform, no nonlinearity.
pub fn propagate<S: Scalar>(
    tape: &mut Tape<S>,
    topo: &TrainTopology,
    weights: EdgeWeights,
    embeddings: Var,
    layers: usize,
) -> Result<Vec<Var>> {
    let e = topo.num_edges();
    for (name, w) in [("user-side", weights.user_from_item), ("item-side", weights.item_from_user)] {
        let n = tape.value(w).len();
        if n != e {
            return Err(Error::Consistency(format!(
                "{name} weights cover {n} edges but the graph has {e} training edges (first missing: {:?})",
                (n < e).then(|| (topo.edge_users[n], topo.edge_items[n]))
            )));
        }
    }
    let rows = tape.value(embeddings).rows();
    if rows != topo.num_users + topo.num_items {
        return Err(Error::Shape(format!(
            "embedding matrix has {rows} rows, expected {}",
            topo.num_users + topo.num_items
        )));
    }
    let stacked = tape.concat_rows(&[weights.user_from_item, weights.item_from_user])?;
    let mut out = vec![embeddings];
    for _ in 0..layers {
        let prev = *out.last().unwrap();
        out.push(tape.aggregate(stacked, prev, topo.by_node.clone())?);
    }
    Ok(out)
}

/// `e = Σ_l e^(l)`.
pub fn combine_layers<S: Scalar>(tape: &mut Tape<S>, layers: &[Var]) -> Result<Var> {
    tape.add_all(layers)
}

/// Representations fed to the inner-product scorer.
#[derive(Debug, Clone, Copy)]
pub struct Representations {
    /// `[N, W]`.
    pub users: Var,
    /// `[M, W]`.
    pub items: Var,
}

/// Concatenate combined ID embeddings with routed user preferences and
/// projected item content, modality by modality in the same order for both
/// sides. With `id_only` the content blocks are dropped.
pub fn assemble_representation<S: Scalar>(
    tape: &mut Tape<S>,
    combined: Var,
    num_users: usize,
    user_prefs: &[(Modality, Var)],
    item_content: &[(Modality, Var)],
    id_only: bool,
) -> Result<Representations> {
    let total = tape.value(combined).rows();
    let users = tape.slice_rows(combined, 0, num_users)?;
    let items = tape.slice_rows(combined, num_users, total)?;
    if id_only {
        return Ok(Representations { users, items });
    }
    let uo: Vec<Modality> = user_prefs.iter().map(|p| p.0).collect();
    let io: Vec<Modality> = item_content.iter().map(|p| p.0).collect();
    if uo != io {
        return Err(Error::Assembly(format!(
            "user modality order {uo:?} differs from item order {io:?}"
        )));
    }
    let mut uparts = vec![users];
    uparts.extend(user_prefs.iter().map(|p| p.1));
    let mut iparts = vec![items];
    iparts.extend(item_content.iter().map(|p| p.1));
    Ok(Representations {
        users: tape.concat_cols(&uparts)?,
        items: tape.concat_cols(&iparts)?,
    })
}

/// `y = e*_uᵀ e*_i`.
pub fn score<S: Scalar>(user: &[S], item: &[S]) -> Result<S> {
    if user.len() != item.len() {
        return Err(Error::Shape(format!(
            "score: representation lengths {} and {} differ",
            user.len(),
            item.len()
        )));
    }
    Ok(user.iter().zip(item).map(|(&a, &b)| a * b).sum())
}

/// Scores of `(users[k], items[k])` pairs as an `[B]` vector on the tape.
pub fn score_pairs<S: Scalar>(
    tape: &mut Tape<S>,
    reps: Representations,
    users: &[usize],
    items: &[usize],
) -> Result<Var> {
    let u = tape.gather_rows(reps.users, users.iter().copied().collect())?;
    let i = tape.gather_rows(reps.items, items.iter().copied().collect())?;
    tape.row_dot(u, i)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::InteractionGraph;
    use crate::refine::uniform_weights;

    fn unit_weights(tape: &mut Tape<f64>, topo: &TrainTopology) -> EdgeWeights {
        let e = topo.num_edges();
        EdgeWeights {
            user_from_item: tape.constant(Tensor::full(&[e], 1.0)),
            item_from_user: tape.constant(Tensor::full(&[e], 1.0)),
        }
    }

    fn random_embeddings(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn unit_weights_sum_neighbors() {
        let g = InteractionGraph::build(1, 3, &[(0, 0), (0, 2)]).unwrap();
        let topo = TrainTopology::new(&g);
        let e0 = random_embeddings(4, 2, 1);
        let mut tape = Tape::new();
        let ev = tape.param(e0.clone());
        let w = unit_weights(&mut tape, &topo);
        let layers = propagate(&mut tape, &topo, w, ev, 1).unwrap();
        let u = tape.value(layers[1]).row(0);
        assert_relative_eq!(u[0], e0.row(1)[0] + e0.row(3)[0]);
        assert_relative_eq!(u[1], e0.row(1)[1] + e0.row(3)[1]);
    }

    #[test]
    fn zero_weights_annihilate() {
        let g = InteractionGraph::build(2, 2, &[(0, 0), (1, 0), (1, 1)]).unwrap();
        let topo = TrainTopology::new(&g);
        let mut tape = Tape::new();
        let ev = tape.param(random_embeddings(4, 3, 2));
        let z = tape.constant(Tensor::zeros(&[3]));
        let w = EdgeWeights { user_from_item: z, item_from_user: z };
        let layers = propagate(&mut tape, &topo, w, ev, 3).unwrap();
        for l in &layers[1..] {
            assert!(tape.value(*l).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn path_graph_two_hops() {
        // u0 - i0 - u1: e2(u0) = e0(u0) + e0(u1).
        let g = InteractionGraph::build(2, 1, &[(0, 0), (1, 0)]).unwrap();
        let topo = TrainTopology::new(&g);
        let e0 = random_embeddings(3, 2, 3);
        let mut tape = Tape::new();
        let ev = tape.param(e0.clone());
        let w = unit_weights(&mut tape, &topo);
        let layers = propagate(&mut tape, &topo, w, ev, 2).unwrap();
        for c in 0..2 {
            assert_relative_eq!(tape.value(layers[2]).row(0)[c], e0.row(0)[c] + e0.row(1)[c], epsilon = 1e-15);
        }
    }

    #[test]
    fn missing_edge_weight_is_a_consistency_error() {
        let g = InteractionGraph::build(1, 2, &[(0, 0), (0, 1)]).unwrap();
        let topo = TrainTopology::new(&g);
        let mut tape = Tape::new();
        let ev = tape.param(random_embeddings(3, 2, 4));
        let short = tape.constant(Tensor::full(&[1], 1.0));
        let w = EdgeWeights { user_from_item: short, item_from_user: short };
        let err = propagate(&mut tape, &topo, w, ev, 1).unwrap_err();
        assert!(matches!(&err, Error::Consistency(m) if m.contains("(0, 1)")), "{err}");
    }

    #[test]
    fn combine_layers_examples() {
        let mut tape = Tape::new();
        let e0 = tape.param(random_embeddings(3, 2, 5));
        let c = combine_layers(&mut tape, &[e0]).unwrap();
        assert_eq!(tape.value(c), tape.value(e0));

        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let c = combine_layers(&mut tape, &[e0, z]).unwrap();
        assert_eq!(tape.value(c), tape.value(e0));

        let g = InteractionGraph::build(3, 4, &[(0, 0), (0, 3), (1, 1), (2, 0), (2, 2), (1, 3)]).unwrap();
        let topo = TrainTopology::new(&g);
        let ev = tape.param(random_embeddings(7, 3, 6));
        let w = unit_weights(&mut tape, &topo);
        let layers = propagate(&mut tape, &topo, w, ev, 2).unwrap();
        let c = combine_layers(&mut tape, &layers).unwrap();
        for k in 0..21 {
            let brute: f64 = layers.iter().map(|&l| tape.value(l).data()[k]).sum();
            assert_relative_eq!(tape.value(c).data()[k], brute, epsilon = 1e-15);
        }
    }

    #[test]
    fn assembly_widths() {
        let mut tape = Tape::new();
        let combined = tape.param(Tensor::<f64>::zeros(&[5, 64]));
        let up: Vec<(Modality, Var)> = Modality::ALL
            .iter()
            .map(|&m| (m, tape.param(Tensor::zeros(&[2, 64]))))
            .collect();
        let ic: Vec<(Modality, Var)> = Modality::ALL
            .iter()
            .map(|&m| (m, tape.param(Tensor::zeros(&[3, 64]))))
            .collect();
        let r = assemble_representation(&mut tape, combined, 2, &up, &ic, true).unwrap();
        assert_eq!(tape.value(r.users).shape(), &[2, 64]);
        let r = assemble_representation(&mut tape, combined, 2, &up, &ic, false).unwrap();
        assert_eq!(tape.value(r.users).shape(), &[2, 256]);
        assert_eq!(tape.value(r.items).shape(), &[3, 256]);
        let r = assemble_representation(&mut tape, combined, 2, &up[..1], &ic[..1], false).unwrap();
        assert_eq!(tape.value(r.items).shape(), &[3, 128]);

        let swapped = vec![ic[1], ic[0]];
        assert!(matches!(
            assemble_representation(&mut tape, combined, 2, &up[..2], &swapped, false),
            Err(Error::Assembly(_))
        ));
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = [0.6, 0.8];
        assert_relative_eq!(score(&v, &v).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(score(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert!(matches!(score(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_weights_give_neighbor_means() {
        let g = InteractionGraph::build(1, 2, &[(0, 0), (0, 1)]).unwrap();
        let topo = TrainTopology::new(&g);
        let e0 = random_embeddings(3, 2, 7);
        let mut tape = Tape::new();
        let ev = tape.param(e0.clone());
        let w = uniform_weights(&mut tape, &topo);
        let layers = propagate(&mut tape, &topo, w, ev, 1).unwrap();
        assert_relative_eq!(tape.value(layers[1]).row(0)[0], 0.5 * (e0.row(1)[0] + e0.row(2)[0]));
    }

    #[test]
    fn init_shapes_and_order() {
        let hyper = Hyperparams {
            embed_dim: 4,
            proj_dim: 3,
            modalities: vec![Modality::Visual, Modality::Textual],
            ..Hyperparams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ModelParams::<f64>::init(5, 7, &[(Modality::Visual, 6), (Modality::Textual, 2)], &hyper, &mut rng)
            .unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "embeddings",
                "visual.weight",
                "visual.bias",
                "visual.user_seed",
                "textual.weight",
                "textual.bias",
                "textual.user_seed",
                "user_base",
                "item_base"
            ]
        );
        assert_eq!(p.embeddings.shape(), &[12, 4]);
        assert_eq!(p.refine.modalities[0].weight.shape(), &[3, 6]);
        assert_eq!(p.refine.user_base.shape(), &[5, 2]);
        assert!(p.refine.item_base.data().iter().all(|&x| x == 1.0));
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(p.embeddings.data().iter().all(|x| x.abs() <= limit));

        let mismatched = ModelParams::<f64>::init(5, 7, &[(Modality::Visual, 6)], &hyper, &mut rng);
        assert!(matches!(mismatched, Err(Error::Config(_))));
    }

    /// Dense adjacency-product oracle for unit weights.
    fn brute_layers(n: usize, m: usize, edges: &[(usize, usize)], e0: &Tensor<f64>, layers: usize) -> Vec<Vec<f64>> {
        let nodes = n + m;
        let d = e0.cols();
        let mut adj = vec![vec![0.0; nodes]; nodes];
        for &(u, i) in edges {
            adj[u][n + i] = 1.0;
            adj[n + i][u] = 1.0;
        }
        let mut cur = e0.data().to_vec();
        let mut out = vec![cur.clone()];
        for _ in 0..layers {
            let mut next = vec![0.0; nodes * d];
            for a in 0..nodes {
                for b in 0..nodes {
                    for c in 0..d {
                        next[a * d + c] += adj[a][b] * cur[b * d + c];
                    }
                }
            }
            cur = next;
            out.push(cur.clone());
        }
        out
    }

    proptest! {
        #[test]
        fn propagation_is_linear_and_matches_dense_oracle(
            raw in prop::collection::vec((0usize..5, 0usize..6), 1..20),
            alpha in -3.0f64..3.0,
            seed in any::<u64>(),
            layers in 1usize..4,
        ) {
            let g = InteractionGraph::build(5, 6, &raw).unwrap();
            let topo = TrainTopology::new(&g);
            let e0 = random_embeddings(11, 3, seed);
            let mut tape = Tape::new();
            let ev = tape.constant(e0.clone());
            let scaled = tape.constant(e0.map(|x| alpha * x));
            let w = unit_weights(&mut tape, &topo);
            let a = propagate(&mut tape, &topo, w, ev, layers).unwrap();
            let b = propagate(&mut tape, &topo, w, scaled, layers).unwrap();
            let oracle = brute_layers(5, 6, g.edges(), &e0, layers);
            for l in 0..=layers {
                for (k, (&x, &y)) in tape.value(a[l]).data().iter().zip(tape.value(b[l]).data()).enumerate() {
                    prop_assert!((alpha * x - y).abs() <= 1e-10 * (1.0 + y.abs()));
                    prop_assert!((x - oracle[l][k]).abs() <= 1e-10 * (1.0 + x.abs()));
                }
            }
        }

        #[test]
        fn propagation_is_local(
            raw in prop::collection::vec((0usize..5, 0usize..6), 1..20),
            seed in any::<u64>(),
            layers in 1usize..4,
            node in 0usize..11,
        ) {
            let g = InteractionGraph::build(5, 6, &raw).unwrap();
            let topo = TrainTopology::new(&g);
            let e0 = random_embeddings(11, 2, seed);
            // Hop distances from `node` by BFS over the bipartite graph.
            let mut dist = vec![usize::MAX; 11];
            dist[node] = 0;
            let mut frontier = vec![node];
            while let Some(x) = frontier.pop() {
                let nbrs: Vec<usize> = if x < 5 {
                    g.user_items(x).iter().map(|&i| 5 + i).collect()
                } else {
                    g.item_users(x - 5).to_vec()
                };
                for y in nbrs {
                    if dist[y] > dist[x] + 1 {
                        dist[y] = dist[x] + 1;
                        frontier.push(y);
                    }
                }
            }
            let masked = Tensor::from_fn(11, 2, |r, c| if dist[r] <= layers { e0.row(r)[c] } else { 0.0 });
            let mut tape = Tape::new();
            let a = tape.constant(e0);
            let b = tape.constant(masked);
            let w = unit_weights(&mut tape, &topo);
            let la = propagate(&mut tape, &topo, w, a, layers).unwrap();
            let lb = propagate(&mut tape, &topo, w, b, layers).unwrap();
            prop_assert_eq!(tape.value(la[layers]).row(node), tape.value(lb[layers]).row(node));
        }

        #[test]
        fn score_is_symmetric(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
            prop_assert_eq!(score(&a, &b).unwrap(), score(&b, &a).unwrap());
        }
    }
}
