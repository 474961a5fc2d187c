//! File-level workflows behind the command-line tool: synthesize, train,
//! evaluate, inspect edge weights, export embeddings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::eval::{evaluate, RankingResult};
use crate::gcn::{Hyperparams, ModelParams};
use crate::graph::{InteractionGraph, Partition, TrainTopology};
use crate::io::{
    load_dataset, read_labels, resolve_labels, write_string, Checkpoint, Dataset, IdMap, ID_MAP_FILE,
};
use crate::model::{infer, Inference};
use crate::rng::{stream_rng, Stream};
use crate::synthgen::{edge_weight_auc, generate, SynthSpec};
use crate::train::{fit, TrainReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "train_report.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const EDGES_FILE: &str = "edges.tsv";
pub const USER_EMBEDDINGS_FILE: &str = "user_embeddings.tsv";
pub const ITEM_EMBEDDINGS_FILE: &str = "item_embeddings.tsv";

/// Generate a dataset and write its files into `out`.
pub fn run_synth(spec: &SynthSpec, out: &Path) -> Result<(Vec<PathBuf>, crate::synthgen::SynthDataset)> {
    let data = generate(spec)?;
    let paths = data.write(out)?;
    Ok((paths, data))
}

/// Apply the seeded per-user split.
pub fn split_graph(graph: &InteractionGraph, ratios: [usize; 3], seed: u64) -> Result<InteractionGraph> {
    graph.split_per_user(ratios, &mut stream_rng(seed, Stream::Split, 0))
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
    pub paths: Vec<PathBuf>,
}

/// Load `data`, split it, train, and write the id map, best checkpoint, and
/// JSON-lines report into `out`.
pub fn run_train(data: &Path, hyper: &Hyperparams, seed: u64, out: &Path) -> Result<TrainOutputs> {
    hyper.validate()?;
    let dataset = load_dataset(data, &hyper.modalities)?;
    let graph = split_graph(&dataset.graph, hyper.split, seed)?;
    let (params, report) = fit(&graph, &dataset.features, hyper, seed)?;
    let checkpoint = Checkpoint::from_params(&params, &dataset.ids, seed);
    let paths = vec![out.join(ID_MAP_FILE), out.join(CHECKPOINT_FILE), out.join(REPORT_FILE)];
    write_string(&paths[0], &serde_json::to_string(&dataset.ids).expect("id map serializes"))?;
    checkpoint.save(&paths[1])?;
    write_string(&paths[2], &report.to_json_lines())?;
    Ok(TrainOutputs {
        checkpoint,
        report,
        paths,
    })
}

/// A checkpoint re-attached to its dataset and split.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub checkpoint: Checkpoint,
    pub dataset: Dataset,
    pub graph: InteractionGraph,
    pub params: ModelParams<f64>,
}

impl LoadedModel {
    pub fn load(checkpoint: &Path, data: &Path) -> Result<Self> {
        let checkpoint = Checkpoint::load(checkpoint)?;
        let dataset = load_dataset(data, &checkpoint.modalities)?;
        checkpoint.check_dataset(&dataset.ids)?;
        let params = checkpoint.to_params()?;
        let graph = split_graph(&dataset.graph, checkpoint.hyper.split, checkpoint.split_seed)?;
        Ok(Self {
            checkpoint,
            dataset,
            graph,
            params,
        })
    }

    pub fn infer(&self) -> Result<Inference<f64>> {
        infer(&self.params, &TrainTopology::new(&self.graph), &self.dataset.features)
    }

    pub fn ids(&self) -> &IdMap {
        &self.dataset.ids
    }
}

/// Metrics of a checkpoint on one held-out split.
pub fn run_eval(model: &LoadedModel, split: Partition, k: usize) -> Result<RankingResult> {
    evaluate(&model.infer()?, &model.graph, split, k)
}

/// Canonical metrics document: pretty JSON with a trailing newline.
pub fn metrics_json(result: &RankingResult) -> String {
    serde_json::to_string_pretty(result).expect("metrics serialize") + "\n"
}

/// Per-edge weight table, plus the edge-weight AUC when labels are given.
pub fn run_inspect(model: &LoadedModel, labels: Option<&Path>) -> Result<(String, Option<f64>)> {
    let inference = model.infer()?;
    let w = &inference.edge_weights;
    let mut out = String::from("user\titem\ts_user_from_item\ts_item_from_user");
    for m in &w.modalities {
        write!(out, "\t{m}_user_from_item\t{m}_item_from_user").unwrap();
    }
    out.push('\n');
    let ids = model.ids();
    for (k, &(u, i)) in w.edges.iter().enumerate() {
        write!(out, "{}\t{}\t{}\t{}", ids.users[u], ids.items[i], w.user_from_item[k], w.item_from_user[k]).unwrap();
        for m in 0..w.modalities.len() {
            write!(out, "\t{}\t{}", w.modality_user_from_item[m][k], w.modality_item_from_user[m][k]).unwrap();
        }
        out.push('\n');
    }
    let auc = match labels {
        Some(path) => {
            let rows = read_labels(path)?;
            let resolved = resolve_labels(&model.dataset.graph, ids, &rows)?;
            let auc = edge_weight_auc(w, &resolved)?;
            writeln!(out, "# edge_weight_auc\t{auc}").unwrap();
            Some(auc)
        }
        None => None,
    };
    Ok((out, auc))
}

/// Write the assembled user and item representations, one row per raw id.
pub fn run_export(model: &LoadedModel, out: &Path) -> Result<Vec<PathBuf>> {
    let inference = model.infer()?;
    let ids = model.ids();
    let mut paths = Vec::new();
    for (file, matrix, names) in [
        (USER_EMBEDDINGS_FILE, &inference.users, &ids.users),
        (ITEM_EMBEDDINGS_FILE, &inference.items, &ids.items),
    ] {
        let mut text = String::new();
        for (r, name) in names.iter().enumerate() {
            text.push_str(name);
            for x in matrix.row(r) {
                write!(text, "\t{x}").unwrap();
            }
            text.push('\n');
        }
        let path = out.join(file);
        write_string(&path, &text)?;
        paths.push(path);
    }
    Ok(paths)
}
