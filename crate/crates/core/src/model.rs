//! End-to-end forward pass: refine the graph, convolve over it, and assemble
//! the representations used for scoring.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gcn::{
    assemble_representation, combine_layers, propagate, score_pairs, ModelParams, RegKind, Representations,
};
use crate::graph::{TrainTopology, TripletBatch};
use crate::refine::{
    affinity_scores, fuse_scores, project_items, route_preferences, uniform_weights, Affinity, EdgeWeightSet,
    EdgeWeights, FusionMode, Modality, ModalityFeatureTable,
};
use crate::scalar::Scalar;

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Leaves in [`ModelParams::named_tensors`] order.
    pub params: Vec<Var>,
    pub reps: Representations,
    pub weights: EdgeWeights,
    pub affinities: Vec<Affinity>,
    /// Routed user preferences, `[N, D']` per modality.
    pub preferences: Vec<(Modality, Var)>,
    /// Projected item content, `[M, D']` per modality.
    pub projected: Vec<(Modality, Var)>,
}

fn check_features<S: Scalar>(params: &ModelParams<S>, features: &[ModalityFeatureTable<S>]) -> Result<()> {
    let want = params.refine.modality_order();
    let have: Vec<Modality> = features.iter().map(|f| f.modality).collect();
    if want != have {
        return Err(Error::Config(format!(
            "model expects modalities {want:?} but features provide {have:?}"
        )));
    }
    for (f, m) in features.iter().zip(&params.refine.modalities) {
        if f.num_items() != params.num_items {
            return Err(Error::Shape(format!(
                "{} features cover {} items, model has {}",
                f.modality,
                f.num_items(),
                params.num_items
            )));
        }
        if f.width() != m.weight.cols() {
            return Err(Error::Shape(format!(
                "{} features have width {}, projection expects {}",
                f.modality,
                f.width(),
                m.weight.cols()
            )));
        }
    }
    Ok(())
}

/// Record the full model on `tape`. Parameters become trainable leaves when
/// `trainable` is set, constants otherwise.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    topo: &TrainTopology,
    features: &[ModalityFeatureTable<S>],
    trainable: bool,
) -> Result<ForwardPass> {
    check_features(params, features)?;
    if topo.num_users != params.num_users || topo.num_items != params.num_items {
        return Err(Error::Shape(format!(
            "graph has {}x{} nodes, model {}x{}",
            topo.num_users, topo.num_items, params.num_users, params.num_items
        )));
    }
    let hyper = &params.hyper;
    let leaves: Vec<Var> = params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let embeddings = leaves[0];
    let nm = params.refine.modalities.len();
    let user_base = leaves[1 + 3 * nm];
    let item_base = leaves[2 + 3 * nm];

    let mut projected = Vec::with_capacity(nm);
    let mut preferences = Vec::with_capacity(nm);
    let mut affinities = Vec::with_capacity(nm);
    for (k, table) in features.iter().enumerate() {
        let (weight, bias, seed) = (leaves[1 + 3 * k], leaves[2 + 3 * k], leaves[3 + 3 * k]);
        let x = tape.constant(table.features.clone());
        let items = project_items(tape, x, weight, bias, S::of(hyper.slope))?;
        let users = route_preferences(tape, seed, items, topo, hyper.routing_iters)?;
        affinities.push(affinity_scores(tape, users, items, topo)?);
        projected.push((table.modality, items));
        preferences.push((table.modality, users));
    }

    let weights = match hyper.fusion {
        FusionMode::Uniform => uniform_weights(tape, topo),
        mode => fuse_scores(tape, &affinities, user_base, item_base, topo, mode)?,
    };
    let layers = propagate(tape, topo, weights, embeddings, hyper.layers)?;
    let combined = combine_layers(tape, &layers)?;
    let reps = assemble_representation(tape, combined, params.num_users, &preferences, &projected, hyper.id_only)?;
    Ok(ForwardPass {
        params: leaves,
        reps,
        weights,
        affinities,
        preferences,
        projected,
    })
}

/// `Σ −ln σ(y_ui − y_uj)` over the batch, as a rank-0 tape value.
pub fn ranking_loss<S: Scalar>(tape: &mut Tape<S>, reps: Representations, batch: &TripletBatch) -> Result<Var> {
    let users: Vec<usize> = batch.rows.iter().map(|t| t.user).collect();
    let pos: Vec<usize> = batch.rows.iter().map(|t| t.pos).collect();
    let neg: Vec<usize> = batch.rows.iter().map(|t| t.neg).collect();
    let yp = score_pairs(tape, reps, &users, &pos)?;
    let yn = score_pairs(tape, reps, &users, &neg)?;
    let margin = tape.sub(yp, yn)?;
    let per = tape.neg_log_sigmoid(margin)?;
    tape.sum(per)
}

/// `λ‖θ‖₂` (or its square) over every parameter leaf.
pub fn regularizer<S: Scalar>(tape: &mut Tape<S>, params: &[Var], weight: f64, kind: RegKind) -> Result<Var> {
    let squares = params
        .iter()
        .map(|&p| tape.sum_squares(p))
        .collect::<Result<Vec<_>>>()?;
    let total = tape.add_all(&squares)?;
    let penalty = match kind {
        RegKind::Norm => tape.sqrt(total)?,
        RegKind::SquaredNorm => total,
    };
    tape.scale(penalty, S::of(weight))
}

/// Full regularized objective for one batch.
pub fn batch_objective<S: Scalar>(
    tape: &mut Tape<S>,
    pass: &ForwardPass,
    batch: &TripletBatch,
    weight: f64,
    kind: RegKind,
) -> Result<Var> {
    let data = ranking_loss(tape, pass.reps, batch)?;
    let reg = regularizer(tape, &pass.params, weight, kind)?;
    tape.add(data, reg)
}

/// Plain-value outputs of an inference pass.
#[derive(Debug, Clone)]
pub struct Inference<S> {
    /// `[N, W]`.
    pub users: Tensor<S>,
    /// `[M, W]`.
    pub items: Tensor<S>,
    pub edge_weights: EdgeWeightSet<S>,
    pub preferences: Vec<(Modality, Tensor<S>)>,
    pub projected: Vec<(Modality, Tensor<S>)>,
}

impl<S: Scalar> Inference<S> {
    pub fn score(&self, user: usize, item: usize) -> S {
        self.users
            .row(user)
            .iter()
            .zip(self.items.row(item))
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Scores of `user` against every item.
    pub fn user_scores(&self, user: usize) -> Vec<S> {
        (0..self.items.rows()).map(|i| self.score(user, i)).collect()
    }
}

/// Run the model without recording gradients.
pub fn infer<S: Scalar>(
    params: &ModelParams<S>,
    topo: &TrainTopology,
    features: &[ModalityFeatureTable<S>],
) -> Result<Inference<S>> {
    let mut tape = Tape::new();
    let pass = forward(&mut tape, params, topo, features, false)?;
    let modalities = params.refine.modality_order();
    let snapshot = |list: &[(Modality, Var)]| list.iter().map(|&(m, v)| (m, tape.value(v).clone())).collect();
    Ok(Inference {
        users: tape.value(pass.reps.users).clone(),
        items: tape.value(pass.reps.items).clone(),
        edge_weights: EdgeWeightSet::from_tape(&tape, topo, pass.weights, &modalities, &pass.affinities),
        preferences: snapshot(&pass.preferences),
        projected: snapshot(&pass.projected),
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gcn::Hyperparams;
    use crate::graph::{InteractionGraph, Triplet};

    fn setup(hyper: &Hyperparams) -> (ModelParams<f64>, TrainTopology, Vec<ModalityFeatureTable<f64>>) {
        let g = InteractionGraph::build(4, 6, &[(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 4), (3, 5), (3, 0)])
            .unwrap();
        let topo = TrainTopology::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let widths = [5, 3];
        let features: Vec<_> = hyper
            .modalities
            .iter()
            .zip(widths)
            .map(|(&m, w)| {
                ModalityFeatureTable::new(m, Tensor::from_fn(6, w, |_, _| rng.random_range(-1.0..1.0))).unwrap()
            })
            .collect();
        let fw: Vec<_> = features.iter().map(|f| (f.modality, f.width())).collect();
        let params = ModelParams::init(4, 6, &fw, hyper, &mut rng).unwrap();
        (params, topo, features)
    }

    fn small() -> Hyperparams {
        Hyperparams {
            embed_dim: 4,
            proj_dim: 3,
            modalities: vec![Modality::Visual, Modality::Textual],
            ..Hyperparams::default()
        }
    }

    #[test]
    fn representation_width_matches_variant() {
        for id_only in [false, true] {
            let hyper = Hyperparams { id_only, ..small() };
            let (p, topo, f) = setup(&hyper);
            let inf = infer(&p, &topo, &f).unwrap();
            assert_eq!(inf.users.cols(), hyper.representation_width());
            assert_eq!(inf.items.shape(), &[6, hyper.representation_width()]);
        }
    }

    #[test]
    fn zero_margin_loss_is_log_two_per_triplet_plus_penalty() {
        let hyper = small();
        let (p, topo, f) = setup(&hyper);
        // Identical positive and negative give a zero margin.
        let batch = TripletBatch {
            rows: (0..4).map(|u| Triplet { user: u, pos: u, neg: u }).collect(),
        };
        let mut tape = Tape::new();
        let pass = forward(&mut tape, &p, &topo, &f, true).unwrap();
        let loss = batch_objective(&mut tape, &pass, &batch, 0.3, RegKind::Norm).unwrap();
        let norm: f64 = p
            .named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert_relative_eq!(tape.value(loss).item(), 4.0 * 2f64.ln() + 0.3 * norm, epsilon = 1e-9);
    }

    #[test]
    fn mismatched_features_are_rejected() {
        let hyper = small();
        let (p, topo, mut f) = setup(&hyper);
        f.reverse();
        let mut tape = Tape::new();
        assert!(matches!(forward(&mut tape, &p, &topo, &f, false), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_variant_ignores_content_weights() {
        let hyper = Hyperparams { fusion: FusionMode::Uniform, ..small() };
        let (p, topo, f) = setup(&hyper);
        let inf = infer(&p, &topo, &f).unwrap();
        assert!(inf.edge_weights.user_from_item.iter().all(|&w| w == 0.5));
    }

    /// Central differences over every parameter of a tiny model.
    #[test]
    fn objective_gradient_matches_finite_differences() {
        let hyper = Hyperparams { routing_iters: 2, ..small() };
        let (mut p, topo, f) = setup(&hyper);
        // Ones-initialized base vectors tie inside the max, where it has no derivative.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for x in p.refine.user_base.data_mut().iter_mut().chain(p.refine.item_base.data_mut()) {
            *x = rng.random_range(0.5..1.5);
        }
        let batch = TripletBatch {
            rows: vec![
                Triplet { user: 0, pos: 1, neg: 3 },
                Triplet { user: 2, pos: 4, neg: 0 },
                Triplet { user: 3, pos: 5, neg: 2 },
            ],
        };
        let objective = |params: &ModelParams<f64>| {
            let mut tape = Tape::new();
            let pass = forward(&mut tape, params, &topo, &f, false).unwrap();
            let l = batch_objective(&mut tape, &pass, &batch, 0.05, RegKind::Norm).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let pass = forward(&mut tape, &p, &topo, &f, true).unwrap();
        let l = batch_objective(&mut tape, &pass, &batch, 0.05, RegKind::Norm).unwrap();
        let grads = tape.backward(l).unwrap();
        let h = 1e-6;
        for (k, &var) in pass.params.iter().enumerate() {
            let analytic = grads.get(var).unwrap().clone();
            for idx in 0..analytic.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[k].data_mut()[idx] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[k].data_mut()[idx] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                assert!(
                    (a - fd).abs() <= 1e-5 * (1.0 + a.abs().max(fd.abs())),
                    "param {k}[{idx}]: analytic {a}, numeric {fd}"
                );
            }
        }
    }
}
