//! File formats: interaction TSV, feature matrices, edge labels, id maps,
//! checkpoints, and run configs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gcn::{Hyperparams, ModelParams};
use crate::graph::InteractionGraph;
use crate::refine::{Modality, ModalityFeatureTable, ModalityParams, RefineParams};

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const ID_MAP_FILE: &str = "id_map.json";

pub fn features_file(modality: Modality) -> String {
    format!("features_{modality}.txt")
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Raw `(user_id, item_id)` pairs from an interaction TSV.
pub fn read_interactions(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_to_string(path)?;
    data_lines(&text)
        .map(|(n, line)| {
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(u), Some(i), None) if !u.is_empty() && !i.is_empty() => Ok((u.to_string(), i.to_string())),
                _ => Err(Error::parse(path, format!("line {n}: expected `user<TAB>item`, got `{line}`"))),
            }
        })
        .collect()
}

pub fn write_interactions(path: &Path, edges: &[(usize, usize)]) -> Result<()> {
    let mut out = String::new();
    for (u, i) in edges {
        writeln!(out, "{u}\t{i}").unwrap();
    }
    write_string(path, &out)
}

/// Dense index ↔ raw id mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl IdMap {
    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("id map serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.users.iter().position(|u| u == raw)
    }

    pub fn item_index(&self, raw: &str) -> Option<usize> {
        self.items.iter().position(|i| i == raw)
    }
}

/// Sorted distinct ids, numerically when every id is an integer.
fn sorted_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut v: Vec<String> = ids.map(str::to_string).collect();
    v.sort();
    v.dedup();
    if v.iter().all(|s| s.parse::<u64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<u64>().unwrap());
        v.dedup_by(|a, b| a.parse::<u64>().unwrap() == b.parse::<u64>().unwrap());
    }
    v
}

/// Build the graph from raw pairs. Users are remapped densely. With
/// `num_items = Some(M)`, item ids must be integers in `[0, M)` and map to
/// themselves so feature rows stay aligned; otherwise items are remapped
/// like users.
pub fn build_graph(raw: &[(String, String)], num_items: Option<usize>) -> Result<(InteractionGraph, IdMap)> {
    let users = sorted_ids(raw.iter().map(|r| r.0.as_str()));
    let user_ix: BTreeMap<&str, usize> = users.iter().enumerate().map(|(k, u)| (u.as_str(), k)).collect();
    let (items, edges) = match num_items {
        Some(m) => {
            let mut edges = Vec::with_capacity(raw.len());
            for (row, (u, i)) in raw.iter().enumerate() {
                let ix = i
                    .parse::<usize>()
                    .ok()
                    .filter(|&x| x < m)
                    .ok_or_else(|| Error::Validation(format!("edge row {row}: item `{i}` is not an index below {m}")))?;
                edges.push((user_ix[u.as_str()], ix));
            }
            ((0..m).map(|i| i.to_string()).collect(), edges)
        }
        None => {
            let items = sorted_ids(raw.iter().map(|r| r.1.as_str()));
            let item_ix: BTreeMap<&str, usize> = items.iter().enumerate().map(|(k, i)| (i.as_str(), k)).collect();
            let edges = raw.iter().map(|(u, i)| (user_ix[u.as_str()], item_ix[i.as_str()])).collect();
            (items, edges)
        }
    };
    let graph = InteractionGraph::build(users.len(), items.len(), &edges)?;
    Ok((graph, IdMap { users, items }))
}

pub fn read_features(path: &Path) -> Result<Tensor<f64>> {
    let text = read_to_string(path)?;
    let mut lines = data_lines(&text);
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, "empty feature file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, format!("header `{header}` is not `M D`")))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::parse(path, format!("header `{header}` is not `M D`")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (n, line) in lines {
        let before = data.len();
        for tok in line.split_whitespace() {
            let x: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path, format!("line {n}: `{tok}` is not a number")))?;
            data.push(x);
        }
        if data.len() - before != cols {
            return Err(Error::parse(path, format!("line {n}: expected {cols} values, got {}", data.len() - before)));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::parse(path, format!("header declares {rows} rows, found {seen}")));
    }
    Tensor::matrix(rows, cols, data)
}

pub fn write_features(path: &Path, features: &Tensor<f64>) -> Result<()> {
    let mut out = format!("{} {}\n", features.rows(), features.cols());
    for r in 0..features.rows() {
        let row: Vec<String> = features.row(r).iter().map(|x| x.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    write_string(path, &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeLabel {
    TruePositive,
    FalsePositive,
}

impl EdgeLabel {
    pub fn name(self) -> &'static str {
        match self {
            EdgeLabel::TruePositive => "true_positive",
            EdgeLabel::FalsePositive => "false_positive",
        }
    }
}

pub fn write_labels(path: &Path, labels: &[((usize, usize), EdgeLabel)]) -> Result<()> {
    let mut out = String::new();
    for ((u, i), l) in labels {
        writeln!(out, "{u}\t{i}\t{}", l.name()).unwrap();
    }
    write_string(path, &out)
}

/// Raw `(user_id, item_id, label)` rows.
pub fn read_labels(path: &Path) -> Result<Vec<(String, String, EdgeLabel)>> {
    let text = read_to_string(path)?;
    data_lines(&text)
        .map(|(n, line)| {
            let parts: Vec<&str> = line.split('\t').collect();
            let label = match parts.get(2) {
                Some(&"true_positive") => EdgeLabel::TruePositive,
                Some(&"false_positive") => EdgeLabel::FalsePositive,
                _ => return Err(Error::parse(path, format!("line {n}: expected `user<TAB>item<TAB>label`"))),
            };
            if parts.len() != 3 {
                return Err(Error::parse(path, format!("line {n}: expected three fields")));
            }
            Ok((parts[0].to_string(), parts[1].to_string(), label))
        })
        .collect()
}

/// Interactions, id map, and feature tables loaded from one directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: InteractionGraph,
    pub ids: IdMap,
    pub features: Vec<ModalityFeatureTable<f64>>,
}

/// Load `interactions.tsv` and `features_<modality>.txt` for each requested
/// modality from `dir`.
pub fn load_dataset(dir: &Path, modalities: &[Modality]) -> Result<Dataset> {
    let raw = read_interactions(&dir.join(INTERACTIONS_FILE))?;
    let mut features = Vec::with_capacity(modalities.len());
    for &m in modalities {
        let path = dir.join(features_file(m));
        if !path.exists() {
            return Err(Error::Config(format!("modality {m} requested but {} is missing", path.display())));
        }
        features.push(ModalityFeatureTable::new(m, read_features(&path)?)?);
    }
    let num_items = match features.first() {
        Some(f) => {
            if let Some(bad) = features.iter().find(|g| g.num_items() != f.num_items()) {
                return Err(Error::Validation(format!(
                    "{} features cover {} items but {} features cover {}",
                    bad.modality,
                    bad.num_items(),
                    f.modality,
                    f.num_items()
                )));
            }
            Some(f.num_items())
        }
        None => None,
    };
    let (graph, ids) = build_graph(&raw, num_items)?;
    Ok(Dataset { graph, ids, features })
}

/// Resolve raw-id labels to dense edges of `graph`.
pub fn resolve_labels(
    graph: &InteractionGraph,
    ids: &IdMap,
    rows: &[(String, String, EdgeLabel)],
) -> Result<Vec<((usize, usize), EdgeLabel)>> {
    rows.iter()
        .map(|(u, i, l)| {
            let edge = ids
                .user_index(u)
                .zip(ids.item_index(i))
                .filter(|&(u, i)| graph.has_edge(u, i))
                .ok_or_else(|| Error::Validation(format!("label references unknown edge ({u}, {i})")))?;
            Ok((edge, *l))
        })
        .collect()
}

pub const CHECKPOINT_FORMAT: &str = "grcn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub hyper: Hyperparams,
    pub num_users: usize,
    pub num_items: usize,
    pub modalities: Vec<Modality>,
    pub id_digest: String,
    pub split_seed: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams<f64>, ids: &IdMap, split_seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hyper: params.hyper.clone(),
            num_users: params.num_users,
            num_items: params.num_items,
            modalities: params.refine.modality_order(),
            id_digest: ids.digest(),
            split_seed,
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_params(&self) -> Result<ModelParams<f64>> {
        let mut by_name: BTreeMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut take = |name: String| -> Result<Tensor<f64>> {
            let t = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor `{name}`")))?;
            Tensor::new(t.shape.clone(), t.values.clone())
        };
        let embeddings = take("embeddings".into())?;
        let mut modalities = Vec::with_capacity(self.modalities.len());
        for &m in &self.modalities {
            modalities.push(ModalityParams {
                modality: m,
                weight: take(format!("{m}.weight"))?,
                bias: take(format!("{m}.bias"))?,
                user_seed: take(format!("{m}.user_seed"))?,
            });
        }
        let user_base = take("user_base".into())?;
        let item_base = take("item_base".into())?;
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Validation(format!("checkpoint has unexpected tensor `{extra}`")));
        }
        Ok(ModelParams {
            num_users: self.num_users,
            num_items: self.num_items,
            embeddings,
            refine: RefineParams {
                modalities,
                user_base,
                item_base,
            },
            hyper: self.hyper.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        write_string(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                path,
                format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            ));
        }
        Ok(ck)
    }

    /// Error unless this checkpoint was trained on a dataset with `ids`.
    pub fn check_dataset(&self, ids: &IdMap) -> Result<()> {
        if ids.users.len() != self.num_users || ids.items.len() != self.num_items {
            return Err(Error::Validation(format!(
                "checkpoint covers {} users and {} items, dataset has {} and {}",
                self.num_users,
                self.num_items,
                ids.users.len(),
                ids.items.len()
            )));
        }
        if ids.digest() != self.id_digest {
            return Err(Error::Validation("dataset id mapping differs from the checkpoint's".into()));
        }
        Ok(())
    }
}

/// Settings shared by CLI commands, read from JSON or TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub hyper: Hyperparams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = load_config_file(path)?;
        cfg.hyper.validate()?;
        Ok(cfg)
    }
}

/// Parse a config file by extension: `.toml` as TOML, anything else as JSON.
pub fn load_config_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn interactions_round_trip_with_string_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsv");
        write_string(&path, "bob\tz\n# comment\nalice\ty\n\nbob\ty\n").unwrap();
        let raw = read_interactions(&path).unwrap();
        let (g, ids) = build_graph(&raw, None).unwrap();
        assert_eq!(ids.users, ["alice", "bob"]);
        assert_eq!(ids.items, ["y", "z"]);
        assert_eq!(g.edges(), &[(0, 0), (1, 0), (1, 1)]);
    }

    #[test]
    fn numeric_ids_sort_numerically() {
        let raw: Vec<(String, String)> = [("10", "0"), ("9", "1"), ("100", "0")]
            .iter()
            .map(|(u, i)| (u.to_string(), i.to_string()))
            .collect();
        let (_, ids) = build_graph(&raw, Some(3)).unwrap();
        assert_eq!(ids.users, ["9", "10", "100"]);
        assert_eq!(ids.items, ["0", "1", "2"]);
        let bad = vec![("1".to_string(), "3".to_string())];
        assert!(matches!(build_graph(&bad, Some(3)), Err(Error::Validation(m)) if m.contains("row 0")));
    }

    #[test]
    fn malformed_interaction_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsv");
        write_string(&path, "1\t2\n1 2\n").unwrap();
        let err = read_interactions(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn features_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        let t = Tensor::from_fn(3, 2, |r, c| (r as f64 + 0.1) / (c as f64 + 3.0) * 1e-7 + std::f64::consts::PI);
        write_features(&path, &t).unwrap();
        assert_eq!(read_features(&path).unwrap(), t);
        write_string(&path, "2 2\n1 2\n3\n").unwrap();
        assert!(matches!(read_features(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let hyper = Hyperparams {
            embed_dim: 3,
            proj_dim: 2,
            modalities: vec![Modality::Acoustic],
            ..Hyperparams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::<f64>::init(4, 5, &[(Modality::Acoustic, 6)], &hyper, &mut rng).unwrap();
        let ids = IdMap {
            users: (0..4).map(|x| x.to_string()).collect(),
            items: (0..5).map(|x| x.to_string()).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::from_params(&params, &ids, 77).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.split_seed, 77);
        assert_eq!(loaded.to_params().unwrap(), params);
        loaded.check_dataset(&ids).unwrap();
        let other = IdMap { users: vec!["a".into(), "b".into(), "c".into(), "d".into()], ..ids };
        assert!(matches!(loaded.check_dataset(&other), Err(Error::Validation(_))));
    }

    #[test]
    fn run_config_json_and_toml() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("c.json");
        write_string(&json, r#"{"seed": 4, "hyper": {"layers": 3, "fusion": "mean", "modalities": ["visual"]}}"#).unwrap();
        let cfg = RunConfig::load(&json).unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.hyper.layers, 3);
        assert_eq!(cfg.hyper.embed_dim, 64);

        let toml_path = dir.path().join("c.toml");
        write_string(&toml_path, "seed = 4\n[hyper]\nlayers = 3\nfusion = \"mean\"\nmodalities = [\"visual\"]\n").unwrap();
        assert_eq!(RunConfig::load(&toml_path).unwrap(), cfg);

        write_string(&json, r#"{"hyper": {"layerz": 3}}"#).unwrap();
        assert!(matches!(RunConfig::load(&json), Err(Error::Config(_))));
        write_string(&json, r#"{"hyper": {"layers": 0}}"#).unwrap();
        assert!(matches!(RunConfig::load(&json), Err(Error::Config(_))));
    }
}
