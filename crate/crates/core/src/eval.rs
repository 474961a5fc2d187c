//! Top-K ranking metrics and AUC.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{InteractionGraph, Partition};
use crate::model::Inference;
use crate::scalar::Scalar;

/// Top-`k` candidates by descending score, ties broken by ascending item
/// index. `candidates` lists the item indices eligible for ranking.
pub fn rank_candidates<S: Scalar>(scores: &[S], candidates: &[usize], k: usize) -> Result<Vec<usize>> {
    if let Some(&i) = candidates.iter().find(|&&i| !scores[i].is_finite()) {
        return Err(Error::Numeric(format!("score of item {i} is {}", scores[i])));
    }
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Per-user top-`k` metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Metrics of one ranked list against a held-out set, or `None` when the
/// held-out set is empty.
pub fn metrics_at_k(ranked: &[usize], held_out: &[usize], k: usize) -> Option<UserMetrics> {
    if held_out.is_empty() || k == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (r, item) in ranked.iter().take(k).enumerate() {
        if held_out.contains(item) {
            hits += 1;
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(held_out.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Some(UserMetrics {
        precision: hits as f64 / k as f64,
        recall: hits as f64 / held_out.len() as f64,
        ndcg: dcg / idcg,
    })
}

/// Averaged metrics over every user with a non-empty held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub users_evaluated: usize,
    pub users_skipped: usize,
}

/// Items user `u` may be ranked against when evaluating `split`: everything
/// except items consumed in any other partition.
pub fn candidate_items(graph: &InteractionGraph, user: usize, split: Partition) -> Vec<usize> {
    let mut blocked = vec![false; graph.num_items()];
    for &i in graph.user_items(user) {
        if graph.label(user, i) != Some(split) {
            blocked[i] = true;
        }
    }
    (0..graph.num_items()).filter(|&i| !blocked[i]).collect()
}

/// Rank every user's candidates and average the metrics over users with
/// held-out items in `split`.
pub fn evaluate<S: Scalar>(
    inference: &Inference<S>,
    graph: &InteractionGraph,
    split: Partition,
    k: usize,
) -> Result<RankingResult> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if split == Partition::Train {
        return Err(Error::Config("evaluation split must be validation or test".into()));
    }
    let per_user = (0..graph.num_users())
        .into_par_iter()
        .map(|u| {
            let held = graph.items_in(u, split);
            if held.is_empty() {
                return Ok(None);
            }
            let scores = inference.user_scores(u);
            let ranked = rank_candidates(&scores, &candidate_items(graph, u, split), k)?;
            Ok(metrics_at_k(&ranked, &held, k))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = (0.0, 0.0, 0.0);
    let mut evaluated = 0;
    for m in per_user.iter().flatten() {
        sums.0 += m.precision;
        sums.1 += m.recall;
        sums.2 += m.ndcg;
        evaluated += 1;
    }
    let denom = evaluated.max(1) as f64;
    Ok(RankingResult {
        k,
        precision: sums.0 / denom,
        recall: sums.1 / denom,
        ndcg: sums.2 / denom,
        users_evaluated: evaluated,
        users_skipped: graph.num_users() - evaluated,
    })
}

/// Area under the ROC curve of `scores` separating `labels == true` from
/// `false`, via the rank-sum statistic with tied scores sharing their
/// average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!("{pos} positives and {neg} negatives")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in AUC input".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        // Ranks are 1-based; a tie group spans ranks start+1 ..= end+1.
        let avg = (start + end) as f64 / 2.0 + 1.0;
        rank_sum += order[start..=end].iter().filter(|&&i| labels[i]).count() as f64 * avg;
        start = end + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}
