//! TUDataset text collections and cross-validation split plans.
//!
//! A collection `<name>` lives in a directory holding `<name>_A.txt`
//! (1-based `row, col` node pairs), `<name>_graph_indicator.txt` (graph id
//! per node), `<name>_graph_labels.txt` (label per graph) and optionally
//! `<name>_node_labels.txt` / `<name>_node_attributes.txt`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed;

pub const DEFAULT_MAX_DEGREE: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    NodeLabelsOnehot,
    NodeAttributes,
    DegreeOnehot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub n_graphs: usize,
    pub n_classes: usize,
    pub feature_mode: FeatureMode,
    /// Degree cap used for [`FeatureMode::DegreeOnehot`]; 0 otherwise.
    pub max_degree: usize,
    pub feature_dim: usize,
    /// Raw label value of each contiguous class index.
    pub class_labels: Vec<i64>,
    pub class_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    /// `None` picks node labels, then node attributes, then degrees,
    /// depending on which files exist.
    pub feature_mode: Option<FeatureMode>,
    pub max_degree: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            feature_mode: None,
            max_degree: DEFAULT_MAX_DEGREE,
        }
    }
}

/// File-level contents of a collection, kept close to the text so that a
/// read/write cycle reproduces canonical files exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TuFiles {
    /// 1-based node pairs in file order.
    pub edges: Vec<(usize, usize)>,
    /// 1-based graph id per node.
    pub graph_indicator: Vec<usize>,
    pub graph_labels: Vec<i64>,
    pub node_labels: Option<Vec<i64>>,
    pub node_attributes: Option<Vec<Vec<f64>>>,
}

fn file_path(root: &Path, name: &str, suffix: &str) -> PathBuf {
    root.join(format!("{name}_{suffix}.txt"))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_fields<T: std::str::FromStr>(path: &Path, line: usize, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|f| {
            let f = f.trim();
            f.parse::<T>()
                .map_err(|_| parse_err(path, line, format!("cannot parse {f:?}")))
        })
        .collect()
}

fn parse_single<T: std::str::FromStr>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            let mut v = parse_fields::<T>(path, line, &text)?;
            if v.len() != 1 {
                return Err(parse_err(path, line, "expected a single value"));
            }
            Ok(v.remove(0))
        })
        .collect()
}

fn read_optional<T>(path: &Path, f: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        f(path).map(Some)
    } else {
        Ok(None)
    }
}

impl TuFiles {
    pub fn read(root: &Path, name: &str) -> Result<Self> {
        let a_path = file_path(root, name, "A");
        let ind_path = file_path(root, name, "graph_indicator");
        let lab_path = file_path(root, name, "graph_labels");
        for p in [&a_path, &ind_path, &lab_path] {
            if !p.is_file() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        let edges = read_lines(&a_path)?
            .into_iter()
            .map(|(line, text)| {
                let v = parse_fields::<usize>(&a_path, line, &text)?;
                match v[..] {
                    [r, c] if r >= 1 && c >= 1 => Ok((r, c)),
                    [_, _] => Err(parse_err(&a_path, line, "node ids are 1-based")),
                    _ => Err(parse_err(&a_path, line, "expected `row, col`")),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let graph_indicator = parse_single::<usize>(&ind_path)?;
        let graph_labels = parse_single::<i64>(&lab_path)?;
        let node_labels = read_optional(&file_path(root, name, "node_labels"), |p| {
            // Some collections carry several label columns; the first one is used.
            read_lines(p)?
                .into_iter()
                .map(|(line, text)| Ok(parse_fields::<i64>(p, line, &text)?[0]))
                .collect()
        })?;
        let node_attributes = read_optional(&file_path(root, name, "node_attributes"), |p| {
            read_lines(p)?
                .into_iter()
                .map(|(line, text)| parse_fields::<f64>(p, line, &text))
                .collect()
        })?;
        Ok(Self {
            edges,
            graph_indicator,
            graph_labels,
            node_labels,
            node_attributes,
        })
    }

    pub fn write(&self, root: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut a = String::new();
        for (r, c) in &self.edges {
            writeln!(a, "{r}, {c}").unwrap();
        }
        write_file(&file_path(root, name, "A"), &a)?;
        write_file(&file_path(root, name, "graph_indicator"), &join_lines(&self.graph_indicator))?;
        write_file(&file_path(root, name, "graph_labels"), &join_lines(&self.graph_labels))?;
        if let Some(labels) = &self.node_labels {
            write_file(&file_path(root, name, "node_labels"), &join_lines(labels))?;
        }
        if let Some(attrs) = &self.node_attributes {
            let mut s = String::new();
            for row in attrs {
                let fields: Vec<String> = row.iter().map(f64::to_string).collect();
                writeln!(s, "{}", fields.join(", ")).unwrap();
            }
            write_file(&file_path(root, name, "node_attributes"), &s)?;
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.graph_indicator.len()
    }

    pub fn n_graphs(&self) -> usize {
        self.graph_labels.len()
    }

    /// Files for `graphs` in canonical form: both directions of every edge,
    /// sorted by `(row, col)`. Feature columns are not written; pass node
    /// labels explicitly if the collection should carry them.
    pub fn from_graphs(graphs: &[Graph], graph_labels: &[i64], node_labels: Option<Vec<i64>>) -> Result<Self> {
        if graphs.len() != graph_labels.len() {
            return Err(Error::DimensionMismatch {
                context: "graph labels".into(),
                expected: graphs.len(),
                found: graph_labels.len(),
            });
        }
        let mut edges = Vec::new();
        let mut graph_indicator = Vec::new();
        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            let mut directed: Vec<(usize, usize)> = g
                .edges()
                .iter()
                .flat_map(|&(u, v)| [(u, v), (v, u)])
                .map(|(u, v)| (u + offset + 1, v + offset + 1))
                .collect();
            directed.sort_unstable();
            edges.extend(directed);
            graph_indicator.extend(std::iter::repeat_n(gi + 1, g.n_nodes()));
            offset += g.n_nodes();
        }
        if let Some(nl) = &node_labels {
            if nl.len() != offset {
                return Err(Error::DimensionMismatch {
                    context: "node labels".into(),
                    expected: offset,
                    found: nl.len(),
                });
            }
        }
        Ok(Self {
            edges,
            graph_indicator,
            graph_labels: graph_labels.to_vec(),
            node_labels,
            node_attributes: None,
        })
    }

    /// Builds graphs and the manifest. Class labels are remapped to
    /// `0..c` in ascending order of their raw values.
    pub fn to_graphs(&self, name: &str, opts: &LoadOptions) -> Result<(DatasetManifest, Vec<Graph>)> {
        let n_nodes = self.n_nodes();
        let n_graphs = self.n_graphs();
        if n_graphs == 0 {
            return Err(Error::EmptyInput(format!("{name}: no graphs")));
        }
        if let Some(&bad) = self.graph_indicator.iter().find(|&&g| g == 0 || g > n_graphs) {
            return Err(Error::Integrity(format!(
                "{name}: graph indicator {bad} outside [1, {n_graphs}]"
            )));
        }
        for (what, len) in [
            ("node labels", self.node_labels.as_ref().map(Vec::len)),
            ("node attributes", self.node_attributes.as_ref().map(Vec::len)),
        ] {
            if let Some(len) = len {
                if len != n_nodes {
                    return Err(Error::Integrity(format!(
                        "{name}: {len} {what} for {n_nodes} nodes"
                    )));
                }
            }
        }

        // Node -> (graph, local index).
        let mut local = vec![0usize; n_nodes];
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_graphs];
        for (node, &g) in self.graph_indicator.iter().enumerate() {
            local[node] = members[g - 1].len();
            members[g - 1].push(node);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::Integrity(format!("{name}: graph {} has no nodes", empty + 1)));
        }

        let mut edge_sets: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); n_graphs];
        let mut self_loops = 0usize;
        for &(r, c) in &self.edges {
            if r > n_nodes || c > n_nodes {
                return Err(Error::Integrity(format!(
                    "{name}: edge ({r}, {c}) references a node beyond {n_nodes}"
                )));
            }
            let (r, c) = (r - 1, c - 1);
            let g = self.graph_indicator[r];
            if self.graph_indicator[c] != g {
                return Err(Error::Integrity(format!(
                    "{name}: edge ({}, {}) joins graphs {g} and {}",
                    r + 1,
                    c + 1,
                    self.graph_indicator[c]
                )));
            }
            if r == c {
                self_loops += 1;
                continue;
            }
            let (u, v) = (local[r], local[c]);
            edge_sets[g - 1].insert((u.min(v), u.max(v)));
        }
        if self_loops > 0 {
            log::warn!("{name}: dropped {self_loops} self-loop entries");
        }

        let mode = match opts.feature_mode {
            Some(m) => m,
            None if self.node_labels.is_some() => FeatureMode::NodeLabelsOnehot,
            None if self.node_attributes.is_some() => FeatureMode::NodeAttributes,
            None => FeatureMode::DegreeOnehot,
        };
        let degrees = node_degrees(&edge_sets, &members);
        let (features, max_degree) = match mode {
            FeatureMode::NodeLabelsOnehot => {
                let labels = self
                    .node_labels
                    .as_ref()
                    .ok_or_else(|| Error::MissingFile(PathBuf::from(format!("{name}_node_labels.txt"))))?;
                let distinct: BTreeSet<i64> = labels.iter().copied().collect();
                let index: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
                let mut x = Array2::zeros((n_nodes, distinct.len()));
                for (node, l) in labels.iter().enumerate() {
                    x[[node, index[l]]] = 1.0;
                }
                (x, 0)
            }
            FeatureMode::NodeAttributes => {
                let attrs = self
                    .node_attributes
                    .as_ref()
                    .ok_or_else(|| Error::MissingFile(PathBuf::from(format!("{name}_node_attributes.txt"))))?;
                let width = attrs[0].len();
                if attrs.iter().any(|r| r.len() != width) {
                    return Err(Error::Integrity(format!("{name}: ragged node attributes")));
                }
                let flat: Vec<f64> = attrs.iter().flatten().copied().collect();
                (Array2::from_shape_vec((n_nodes, width), flat).map_err(|e| Error::shape(e.to_string()))?, 0)
            }
            FeatureMode::DegreeOnehot => {
                let cap = degrees.iter().copied().max().unwrap_or(0).min(opts.max_degree);
                let mut x = Array2::zeros((n_nodes, cap + 1));
                for (node, &d) in degrees.iter().enumerate() {
                    x[[node, d.min(cap)]] = 1.0;
                }
                (x, cap)
            }
        };

        let distinct: BTreeSet<i64> = self.graph_labels.iter().copied().collect();
        let class_labels: Vec<i64> = distinct.into_iter().collect();
        let mut class_counts = vec![0usize; class_labels.len()];
        let mut graphs = Vec::with_capacity(n_graphs);
        for (gi, nodes) in members.iter().enumerate() {
            let class = class_labels.binary_search(&self.graph_labels[gi]).unwrap();
            class_counts[class] += 1;
            let x = features.select(ndarray::Axis(0), nodes);
            graphs.push(Graph::new(x, edge_sets[gi].iter().copied(), Some(class), gi)?);
        }
        let manifest = DatasetManifest {
            name: name.to_string(),
            n_graphs,
            n_classes: class_labels.len(),
            feature_mode: mode,
            max_degree,
            feature_dim: features.ncols(),
            class_labels,
            class_counts,
        };
        if manifest.n_classes < 2 {
            return Err(Error::Integrity(format!("{name}: fewer than two classes")));
        }
        Ok((manifest, graphs))
    }
}

fn node_degrees(edge_sets: &[BTreeSet<(usize, usize)>], members: &[Vec<usize>]) -> Vec<usize> {
    let n: usize = members.iter().map(Vec::len).sum();
    let mut deg = vec![0usize; n];
    for (edges, nodes) in edge_sets.iter().zip(members) {
        for &(u, v) in edges {
            deg[nodes[u]] += 1;
            deg[nodes[v]] += 1;
        }
    }
    deg
}

fn join_lines<T: std::fmt::Display>(values: &[T]) -> String {
    let mut s = String::new();
    for v in values {
        writeln!(s, "{v}").unwrap();
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Reads `<root>/<name>_*.txt` with automatic feature selection.
pub fn load_tudataset(root: &Path, name: &str) -> Result<(DatasetManifest, Vec<Graph>)> {
    load_tudataset_with(root, name, &LoadOptions::default())
}

pub fn load_tudataset_with(root: &Path, name: &str, opts: &LoadOptions) -> Result<(DatasetManifest, Vec<Graph>)> {
    TuFiles::read(root, name)?.to_graphs(name, opts)
}

/// One cross-validation fold: test fold `fold_id`, validation fold
/// `fold_id + 1` (mod `fold_count`, only when `fold_count ≥ 3`), the rest
/// is training. `labeled_mask` marks the labeled part of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fold_id: usize,
    pub fold_count: usize,
    pub fold_assignments: Vec<usize>,
    pub labeled_mask: Vec<bool>,
    pub label_ratio: f64,
    pub seed: u64,
}

const FOLD_STREAM: u64 = 1;
const LABEL_STREAM: u64 = 2;

impl SplitPlan {
    pub fn n_graphs(&self) -> usize {
        self.fold_assignments.len()
    }

    pub fn validation_fold(&self) -> Option<usize> {
        (self.fold_count >= 3).then(|| (self.fold_id + 1) % self.fold_count)
    }

    fn indices_where(&self, f: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.n_graphs()).filter(|&i| f(i)).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_where(|i| self.fold_assignments[i] == self.fold_id)
    }

    pub fn validation_indices(&self) -> Vec<usize> {
        match self.validation_fold() {
            Some(v) => self.indices_where(|i| self.fold_assignments[i] == v),
            None => Vec::new(),
        }
    }

    pub fn is_train(&self, i: usize) -> bool {
        let f = self.fold_assignments[i];
        f != self.fold_id && Some(f) != self.validation_fold()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_where(|i| self.is_train(i))
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.indices_where(|i| self.labeled_mask[i])
    }

    pub fn unlabeled_train_indices(&self) -> Vec<usize> {
        self.indices_where(|i| self.is_train(i) && !self.labeled_mask[i])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_graphs();
        if self.labeled_mask.len() != n {
            return Err(Error::Integrity("labeled_mask length differs from fold_assignments".into()));
        }
        if self.fold_count < 2 || self.fold_id >= self.fold_count {
            return Err(Error::Integrity(format!(
                "fold {} of {} is not a valid fold",
                self.fold_id, self.fold_count
            )));
        }
        let mut sizes = vec![0usize; self.fold_count];
        for &f in &self.fold_assignments {
            if f >= self.fold_count {
                return Err(Error::Integrity(format!("fold index {f} >= {}", self.fold_count)));
            }
            sizes[f] += 1;
        }
        if sizes.contains(&0) {
            return Err(Error::Integrity("empty fold".into()));
        }
        if (0..n).any(|i| self.labeled_mask[i] && !self.is_train(i)) {
            return Err(Error::Integrity("labeled graph outside the training partition".into()));
        }
        Ok(())
    }
}

/// Shuffles all graphs by `seed` into `fold_count` contiguous parts whose
/// sizes differ by at most one, then draws a class-stratified labeled
/// subset of size `round(label_ratio × |train|)` from the training part.
///
/// The fold partition depends on `seed` only, so every `fold_id` of one
/// seed sees the same partition.
pub fn make_split_plan(
    manifest: &DatasetManifest,
    labels: &[usize],
    fold_id: usize,
    fold_count: usize,
    label_ratio: f64,
    seed: u64,
) -> Result<SplitPlan> {
    let n = manifest.n_graphs;
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            context: "split labels".into(),
            expected: n,
            found: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= manifest.n_classes) {
        return Err(Error::Integrity(format!("label {bad} >= {}", manifest.n_classes)));
    }
    if fold_count < 2 {
        return Err(Error::Config("fold_count must be at least 2".into()));
    }
    if fold_count > n {
        return Err(Error::Config(format!("fold_count {fold_count} exceeds {n} graphs")));
    }
    if fold_id >= fold_count {
        return Err(Error::Config(format!("fold_id {fold_id} not in [0, {fold_count})")));
    }
    if !(label_ratio > 0.0 && label_ratio <= 1.0) {
        return Err(Error::Config(format!("label_ratio {label_ratio} not in (0, 1]")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, &[FOLD_STREAM])));
    let mut fold_assignments = vec![0usize; n];
    for (pos, &g) in order.iter().enumerate() {
        fold_assignments[g] = pos * fold_count / n;
    }

    let mut plan = SplitPlan {
        fold_id,
        fold_count,
        fold_assignments,
        labeled_mask: vec![false; n],
        label_ratio,
        seed,
    };

    let train = plan.train_indices();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.n_classes];
    for &i in &train {
        by_class[labels[i]].push(i);
    }
    let target = ((label_ratio * train.len() as f64).round() as usize).clamp(1, train.len());
    let quotas = apportion(target, &by_class.iter().map(Vec::len).collect::<Vec<_>>());
    let mut rng = seed::rng(seed::derive(seed, &[LABEL_STREAM, fold_id as u64]));
    for (members, quota) in by_class.iter_mut().zip(quotas) {
        members.shuffle(&mut rng);
        for &i in &members[..quota] {
            plan.labeled_mask[i] = true;
        }
    }
    Ok(plan)
}

/// Largest-remainder apportionment of `total` seats over `sizes`; ties in
/// the remainder go to the lower index.
fn apportion(total: usize, sizes: &[usize]) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| total * s / sum).collect();
    let mut rest: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| (total * s % sum, i))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - quotas.iter().sum::<usize>();
    for (_, i) in rest {
        if left == 0 {
            break;
        }
        if quotas[i] < sizes[i] {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize, c: usize) -> DatasetManifest {
        DatasetManifest {
            name: "toy".into(),
            n_graphs: n,
            n_classes: c,
            feature_mode: FeatureMode::DegreeOnehot,
            max_degree: 0,
            feature_dim: 1,
            class_labels: (0..c as i64).collect(),
            class_counts: vec![0; c],
        }
    }

    #[test]
    fn apportion_cases() {
        assert_eq!(apportion(3, &[5, 5]), vec![2, 1]);
        assert_eq!(apportion(10, &[7, 3]), vec![7, 3]);
        assert_eq!(apportion(4, &[1, 1, 8]), vec![1, 0, 3]);
        assert_eq!(apportion(0, &[4, 4]), vec![0, 0]);
    }

    #[test]
    fn ten_graphs_ten_folds() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let p = make_split_plan(&manifest(10, 2), &labels, 3, 10, 0.5, 1).unwrap();
        let mut sizes = [0; 10];
        for &f in &p.fold_assignments {
            sizes[f] += 1;
        }
        assert_eq!(sizes, [1; 10]);
        assert_eq!(p.test_indices().len(), 1);
        assert_eq!(p.validation_indices().len(), 1);
        assert_eq!(p.train_indices().len(), 8);
        assert_eq!(p.labeled_indices().len(), 4);
    }

    #[test]
    fn full_ratio_labels_all_training() {
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i % 3 == 0)).collect();
        let p = make_split_plan(&manifest(40, 2), &labels, 0, 10, 1.0, 5).unwrap();
        for i in 0..40 {
            assert_eq!(p.labeled_mask[i], p.is_train(i));
        }
    }

    #[test]
    fn deterministic_and_json_round_trip() {
        let labels: Vec<usize> = (0..188).map(|i| usize::from(i % 3 != 0)).collect();
        let m = manifest(188, 2);
        let a = make_split_plan(&m, &labels, 4, 10, 0.3, 7).unwrap();
        let b = make_split_plan(&m, &labels, 4, 10, 0.3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(SplitPlan::from_json(&a.to_json().unwrap()).unwrap(), a);
        let c = make_split_plan(&m, &labels, 4, 10, 0.3, 8).unwrap();
        assert_ne!(a.fold_assignments, c.fold_assignments);
        // Same partition for every fold of one seed.
        let d = make_split_plan(&m, &labels, 5, 10, 0.3, 7).unwrap();
        assert_eq!(a.fold_assignments, d.fold_assignments);
    }

    #[test]
    fn split_errors() {
        let labels = vec![0, 1, 0];
        let m = manifest(3, 2);
        assert!(make_split_plan(&m, &labels, 0, 4, 0.5, 0).is_err());
        assert!(make_split_plan(&m, &labels, 3, 3, 0.5, 0).is_err());
        assert!(make_split_plan(&m, &labels, 0, 3, 0.0, 0).is_err());
        assert!(make_split_plan(&m, &labels, 0, 3, 1.5, 0).is_err());
        assert!(make_split_plan(&m, &labels, 0, 1, 0.5, 0).is_err());
    }

    #[test]
    fn two_folds_have_no_validation() {
        let labels = vec![0, 1, 0, 1];
        let p = make_split_plan(&manifest(4, 2), &labels, 1, 2, 1.0, 0).unwrap();
        assert!(p.validation_indices().is_empty());
        assert_eq!(p.train_indices().len(), 2);
    }

    fn fixture() -> TuFiles {
        TuFiles {
            edges: vec![(1, 2), (2, 1), (2, 3), (3, 2), (4, 5), (5, 4)],
            graph_indicator: vec![1, 1, 1, 2, 2],
            graph_labels: vec![-1, 1],
            node_labels: Some(vec![0, 2, 0, 1, 1]),
            node_attributes: None,
        }
    }

    #[test]
    fn to_graphs_features_and_labels() {
        let (m, gs) = fixture().to_graphs("toy", &LoadOptions::default()).unwrap();
        assert_eq!((m.n_graphs, m.n_classes, m.feature_dim), (2, 2, 3));
        assert_eq!(m.class_labels, vec![-1, 1]);
        assert_eq!(gs[0].label(), Some(0));
        assert_eq!(gs[1].label(), Some(1));
        assert_eq!(gs[0].edges(), &[(0, 1), (1, 2)]);
        assert_eq!(gs[1].features().row(0).to_vec(), vec![0.0, 1.0, 0.0]);

        let opts = LoadOptions {
            feature_mode: Some(FeatureMode::DegreeOnehot),
            max_degree: 1,
        };
        let (m, gs) = fixture().to_graphs("toy", &opts).unwrap();
        assert_eq!(m.max_degree, 1);
        // Middle node has degree 2, capped to 1.
        assert_eq!(gs[0].features().row(1).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn integrity_errors() {
        let mut f = fixture();
        f.edges.push((9, 1));
        assert!(matches!(f.to_graphs("toy", &LoadOptions::default()), Err(Error::Integrity(_))));
        let mut f = fixture();
        f.edges.push((3, 4));
        assert!(matches!(f.to_graphs("toy", &LoadOptions::default()), Err(Error::Integrity(_))));
        let mut f = fixture();
        f.graph_labels = vec![1, 1];
        assert!(f.to_graphs("toy", &LoadOptions::default()).is_err());
    }

    #[test]
    fn missing_file_is_named() {
        let dir = std::env::temp_dir().join("sscdl-missing-file-test");
        let _ = fs::create_dir_all(&dir);
        match load_tudataset(&dir, "NOPE") {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("NOPE_A.txt")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
