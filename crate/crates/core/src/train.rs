//! BPR objective, Adam, and the epoch loop with validation early stopping.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{neg_log_sigmoid, Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::gcn::{Hyperparams, ModelParams, RegKind};
use crate::graph::{epoch_triplets, InteractionGraph, Partition, TrainTopology};
use crate::model::{batch_objective, forward, infer};
use crate::refine::ModalityFeatureTable;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

/// `Σ −ln σ(pos − neg) + λ‖θ‖₂` evaluated on plain values.
pub fn bpr_loss<S: Scalar>(
    scores_pos: &[S],
    scores_neg: &[S],
    params: &[&Tensor<S>],
    lambda: f64,
    kind: RegKind,
) -> Result<S> {
    if scores_pos.len() != scores_neg.len() {
        return Err(Error::Shape(format!(
            "{} positive scores but {} negative scores",
            scores_pos.len(),
            scores_neg.len()
        )));
    }
    let pairwise: S = scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(&p, &n)| neg_log_sigmoid(p - n))
        .sum();
    let squares: S = params.iter().flat_map(|t| t.data()).map(|&x| x * x).sum();
    let penalty = match kind {
        RegKind::Norm => squares.sqrt(),
        RegKind::SquaredNorm => squares,
    };
    Ok(pairwise + S::of(lambda) * penalty)
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    pub first: Vec<Tensor<S>>,
    pub second: Vec<Tensor<S>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &[&Tensor<S>], learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<S>> = params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            learning_rate,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_model(params: &ModelParams<S>) -> Self {
        let tensors: Vec<&Tensor<S>> = params.named_tensors().into_iter().map(|(_, t)| t).collect();
        let h = &params.hyper;
        Self::new(&tensors, h.learning_rate, h.adam_beta1, h.adam_beta2, h.adam_eps)
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<S: Scalar>(state: &mut OptimizerState<S>, grads: &[Tensor<S>], params: &mut [&mut Tensor<S>]) -> Result<()> {
    if grads.len() != params.len() || grads.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters ({} moment slots)",
            grads.len(),
            params.len(),
            state.first.len()
        )));
    }
    for (k, (g, p)) in grads.iter().zip(params.iter()).enumerate() {
        if g.shape() != p.shape() || g.shape() != state.first[k].shape() {
            return Err(Error::Shape(format!(
                "gradient {k} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient {k} entry {pos} is {} at step {}",
                g.data()[pos],
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(state.beta1), S::of(state.beta2));
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let (lr, eps) = (S::of(state.learning_rate), S::of(state.eps));
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (S::one() - b1) * g[j];
            v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean regularized objective over the epoch's batches.
    pub loss: f64,
    pub val_recall: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn stopping_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }

    /// One JSON object per epoch, newline-terminated.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes") + "\n")
            .collect()
    }

    /// Copy with wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.epochs {
            e.wall_seconds = 0.0;
        }
        out
    }
}

/// Train from a seeded initialization.
///
/// Each epoch visits every training edge once in shuffled batches. After
/// each epoch the validation recall is computed; the best-scoring
/// parameters are returned once `patience` epochs pass without improvement
/// or `max_epochs` is reached. Without validation users every epoch counts
/// as an improvement, so the final parameters are returned.
pub fn fit<S: Scalar>(
    graph: &InteractionGraph,
    features: &[ModalityFeatureTable<S>],
    hyper: &Hyperparams,
    seed: u64,
) -> Result<(ModelParams<S>, TrainReport)> {
    let widths: Vec<_> = features.iter().map(|f| (f.modality, f.width())).collect();
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let params = ModelParams::init(graph.num_users(), graph.num_items(), &widths, hyper, &mut rng)?;
    fit_from(graph, features, params, seed)
}

/// Train starting from `params`, using `params.hyper`.
pub fn fit_from<S: Scalar>(
    graph: &InteractionGraph,
    features: &[ModalityFeatureTable<S>],
    mut params: ModelParams<S>,
    seed: u64,
) -> Result<(ModelParams<S>, TrainReport)> {
    let hyper = params.hyper.clone();
    hyper.validate()?;
    let topo = TrainTopology::new(graph);
    let mut state = OptimizerState::for_model(&params);
    let mut report = TrainReport::default();
    let mut best = params.clone();
    let mut best_recall = f64::NEG_INFINITY;
    let mut since_best = 0;

    for epoch in 1..=hyper.max_epochs {
        let started = Instant::now();
        let mut rng = stream_rng(seed, Stream::Triplets, epoch as u64);
        let triplets = epoch_triplets(graph, &mut rng)?;
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, batch) in triplets.chunks(hyper.batch_size).enumerate() {
            let mut tape = Tape::new();
            let pass = forward(&mut tape, &params, &topo, features, true)?;
            let loss = batch_objective(&mut tape, &pass, &batch, hyper.reg_weight, hyper.reg_kind)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {value} at epoch {epoch}, batch {b} (seed {seed}, triplet stream counter {epoch})"
                )));
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor<S>> = pass
                .params
                .iter()
                .map(|&v| grads.take(v).expect("trainable leaf has a gradient"))
                .collect();
            adam_step(&mut state, &grads, &mut params.tensors_mut())?;
            total += value;
            batches += 1;
        }

        let inference = infer(&params, &topo, features)?;
        let val = evaluate(&inference, graph, Partition::Validation, hyper.k)?;
        let improved = val.users_evaluated == 0 || val.recall > best_recall;
        report.epochs.push(EpochRecord {
            epoch,
            loss: total / batches.max(1) as f64,
            val_recall: val.recall,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if improved {
            best_recall = val.recall;
            best = params.clone();
            report.best_epoch = epoch;
            report.best_val_recall = val.recall;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if report.epochs.is_empty() {
        best = params;
    }
    Ok((best, report))
}
