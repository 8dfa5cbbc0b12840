//! Graphs, datasets, the TU benchmark file format, synthetic ID/OOD generators,
//! split protocols and mini-batch assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::sparse::SparseAdjacency;

/// Undirected simple graph with dense node features.
///
/// Edges are stored once per undirected pair as `(i, j)` with `i < j`, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix,
    label: Option<i64>,
}

/// Counts of edge entries removed while normalizing a raw edge list.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EdgeCleanup {
    pub self_loops: usize,
    pub duplicates: usize,
}

impl Graph {
    /// Builds a graph from a raw edge list, dropping self-loops and duplicate entries.
    ///
    /// An edge may be given in one or both orientations. If `features` has zero
    /// columns a constant column of ones is synthesized.
    pub fn new(
        node_count: usize,
        edges: &[(usize, usize)],
        features: Matrix,
        label: Option<i64>,
    ) -> Result<Graph> {
        Self::with_cleanup(node_count, edges, features, label).map(|(g, _)| g)
    }

    pub fn with_cleanup(
        node_count: usize,
        edges: &[(usize, usize)],
        features: Matrix,
        label: Option<i64>,
    ) -> Result<(Graph, EdgeCleanup)> {
        let features = if features.cols() == 0 {
            if features.rows() != node_count {
                return Err(Error::argument(format!(
                    "feature matrix has {} rows for {node_count} nodes",
                    features.rows()
                )));
            }
            Matrix::filled(node_count, 1, 1.0)
        } else {
            features
        };
        if features.rows() != node_count {
            return Err(Error::argument(format!(
                "feature matrix has {} rows for {node_count} nodes",
                features.rows()
            )));
        }
        let mut cleanup = EdgeCleanup::default();
        let mut seen_oriented = BTreeSet::new();
        let mut canonical = BTreeSet::new();
        for &(i, j) in edges {
            if i >= node_count || j >= node_count {
                return Err(Error::argument(format!(
                    "edge ({i}, {j}) out of range for {node_count} nodes"
                )));
            }
            if i == j {
                cleanup.self_loops += 1;
                continue;
            }
            if !seen_oriented.insert((i, j)) {
                cleanup.duplicates += 1;
                continue;
            }
            canonical.insert((i.min(j), i.max(j)));
        }
        Ok((
            Graph {
                node_count,
                edges: canonical.into_iter().collect(),
                features,
                label,
            },
            cleanup,
        ))
    }

    /// Graph with a constant-one feature column.
    pub fn unattributed(node_count: usize, edges: &[(usize, usize)], label: Option<i64>) -> Result<Graph> {
        Graph::new(node_count, edges, Matrix::filled(node_count, 1, 1.0), label)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label(&self) -> Option<i64> {
        self.label
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn adjacency(&self) -> SparseAdjacency {
        SparseAdjacency::from_undirected(self.node_count, &self.edges)
    }

    /// Relabels nodes so that old node `perm[k]` becomes new node `k`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.node_count {
            return Err(Error::argument("permutation length does not match node count"));
        }
        let mut inverse = vec![usize::MAX; self.node_count];
        for (new, &old) in perm.iter().enumerate() {
            if old >= self.node_count || inverse[old] != usize::MAX {
                return Err(Error::argument("not a permutation"));
            }
            inverse[old] = new;
        }
        let edges: Vec<_> = self.edges.iter().map(|&(i, j)| (inverse[i], inverse[j])).collect();
        Graph::new(self.node_count, &edges, self.features.permute_rows(perm), self.label)
    }

    /// Zero-pads the feature matrix on the right up to `width` columns.
    pub fn pad_features(&mut self, width: usize) {
        if width <= self.features.cols() {
            return;
        }
        let pad = Matrix::zeros(self.node_count, width - self.features.cols());
        self.features = Matrix::hcat(&[&self.features, &pad]).expect("row counts match");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    name: String,
    graphs: Vec<Graph>,
    feature_dim: usize,
}

impl GraphDataset {
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>) -> Result<GraphDataset> {
        let feature_dim = graphs.first().map_or(1, Graph::feature_dim);
        if let Some((i, g)) = graphs.iter().enumerate().find(|(_, g)| g.feature_dim() != feature_dim) {
            return Err(Error::argument(format!(
                "graph {i} has feature width {}, expected {feature_dim}",
                g.feature_dim()
            )));
        }
        Ok(GraphDataset {
            name: name.into(),
            graphs,
            feature_dim,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> GraphDataset {
        GraphDataset {
            name: name.into(),
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
            feature_dim: self.feature_dim,
        }
    }

    fn pad_features(&mut self, width: usize) {
        if width > self.feature_dim {
            for g in &mut self.graphs {
                g.pad_features(width);
            }
            self.feature_dim = width;
        }
    }
}

/// Zero-pads the narrower dataset's features so both share one width.
pub fn align_feature_widths(a: &mut GraphDataset, b: &mut GraphDataset) {
    let width = a.feature_dim.max(b.feature_dim);
    a.pad_features(width);
    b.pad_features(width);
}

// ---------------------------------------------------------------------------
// TU format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Attributes,
    NodeLabels,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseSummary {
    pub graphs: usize,
    pub nodes: usize,
    pub edges: usize,
    pub self_loops_dropped: usize,
    pub duplicate_edges_dropped: usize,
    pub feature_source: FeatureSource,
    pub has_graph_labels: bool,
}

fn tu_path(root: &Path, name: &str, suffix: &str) -> PathBuf {
    root.join(format!("{name}_{suffix}.txt"))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn read_optional_lines(path: &Path) -> Result<Option<Vec<(usize, String)>>> {
    if path.exists() {
        read_lines(path).map(Some)
    } else {
        Ok(None)
    }
}

fn parse_int(path: &Path, line: usize, tok: &str) -> Result<i64> {
    tok.trim()
        .parse::<i64>()
        .map_err(|_| Error::parse(path, Some(line), format!("expected an integer, found {tok:?}")))
}

fn parse_real(path: &Path, line: usize, tok: &str) -> Result<f64> {
    tok.trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(path, Some(line), format!("expected a real number, found {tok:?}")))
}

/// Reads a dataset in the TU benchmark layout from `root_dir`.
///
/// Files may sit directly in `root_dir` or in a `root_dir/<name>/` subdirectory,
/// which is how the benchmark archives unpack.
pub fn parse_tu_dataset(root_dir: &Path, name: &str) -> Result<GraphDataset> {
    parse_tu_dataset_with_summary(root_dir, name).map(|(ds, _)| ds)
}

pub fn parse_tu_dataset_with_summary(root_dir: &Path, name: &str) -> Result<(GraphDataset, ParseSummary)> {
    let nested = root_dir.join(name);
    let root_dir = if tu_path(&nested, name, "A").exists() { nested.as_path() } else { root_dir };
    let a_path = tu_path(root_dir, name, "A");
    let ind_path = tu_path(root_dir, name, "graph_indicator");
    for p in [&a_path, &ind_path] {
        if !p.exists() {
            return Err(Error::parse(p, None, "mandatory file is missing"));
        }
    }

    let indicator_lines = read_lines(&ind_path)?;
    let mut node_graph = Vec::with_capacity(indicator_lines.len());
    for (line, text) in &indicator_lines {
        let gid = parse_int(&ind_path, *line, text)?;
        if gid < 1 {
            return Err(Error::parse(&ind_path, Some(*line), format!("graph id {gid} is not 1-based")));
        }
        node_graph.push((gid - 1) as usize);
    }
    let total_nodes = node_graph.len();
    let graph_count = node_graph.iter().max().map_or(0, |m| m + 1);

    // Local index of each node inside its graph, in order of appearance.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); graph_count];
    let mut local = vec![0usize; total_nodes];
    for (node, &g) in node_graph.iter().enumerate() {
        local[node] = members[g].len();
        members[g].push(node);
    }
    if let Some(g) = members.iter().position(Vec::is_empty) {
        return Err(Error::parse(&ind_path, None, format!("graph id {} has no nodes", g + 1)));
    }

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph_count];
    for (line, text) in read_lines(&a_path)? {
        let mut parts = text.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(&a_path, Some(line), format!("expected \"i, j\", found {text:?}")));
        };
        let (a, b) = (parse_int(&a_path, line, a)?, parse_int(&a_path, line, b)?);
        let in_range = |v: i64| v >= 1 && (v as usize) <= total_nodes;
        if !in_range(a) || !in_range(b) {
            return Err(Error::parse(
                &a_path,
                Some(line),
                format!("edge ({a}, {b}) references a node outside 1..={total_nodes}"),
            ));
        }
        let (a, b) = ((a - 1) as usize, (b - 1) as usize);
        if node_graph[a] != node_graph[b] {
            return Err(Error::parse(&a_path, Some(line), format!("edge ({}, {}) crosses graphs", a + 1, b + 1)));
        }
        edges[node_graph[a]].push((local[a], local[b]));
    }

    let attr_path = tu_path(root_dir, name, "node_attributes");
    let label_path = tu_path(root_dir, name, "node_labels");
    let (node_features, feature_source) = if let Some(lines) = read_optional_lines(&attr_path)? {
        let mut rows = Vec::with_capacity(lines.len());
        for (line, text) in &lines {
            let row = text
                .split(',')
                .map(|t| parse_real(&attr_path, *line, t))
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first().map(Vec::len) {
                if row.len() != first {
                    return Err(Error::parse(
                        &attr_path,
                        Some(*line),
                        format!("ragged attribute row: {} values, expected {first}", row.len()),
                    ));
                }
            }
            rows.push(row);
        }
        check_count(&attr_path, rows.len(), total_nodes)?;
        (Matrix::from_rows(&rows)?, FeatureSource::Attributes)
    } else if let Some(lines) = read_optional_lines(&label_path)? {
        let labels = lines
            .iter()
            .map(|(line, text)| {
                let first = text.split(',').next().unwrap_or(text);
                parse_int(&label_path, *line, first)
            })
            .collect::<Result<Vec<_>>>()?;
        check_count(&label_path, labels.len(), total_nodes)?;
        (one_hot(&labels), FeatureSource::NodeLabels)
    } else {
        (Matrix::filled(total_nodes, 1, 1.0), FeatureSource::Constant)
    };

    let glabel_path = tu_path(root_dir, name, "graph_labels");
    let graph_labels = match read_optional_lines(&glabel_path)? {
        Some(lines) => {
            let labels = lines
                .iter()
                .map(|(line, text)| parse_int(&glabel_path, *line, text))
                .collect::<Result<Vec<_>>>()?;
            check_count(&glabel_path, labels.len(), graph_count)?;
            Some(labels)
        }
        None => None,
    };

    let mut summary = ParseSummary {
        graphs: graph_count,
        nodes: total_nodes,
        edges: 0,
        self_loops_dropped: 0,
        duplicate_edges_dropped: 0,
        feature_source,
        has_graph_labels: graph_labels.is_some(),
    };
    let mut graphs = Vec::with_capacity(graph_count);
    for (g, nodes) in members.iter().enumerate() {
        let features = node_features.select_rows(nodes);
        let label = graph_labels.as_ref().map(|l| l[g]);
        let (graph, cleanup) = Graph::with_cleanup(nodes.len(), &edges[g], features, label)?;
        summary.edges += graph.edges().len();
        summary.self_loops_dropped += cleanup.self_loops;
        summary.duplicate_edges_dropped += cleanup.duplicates;
        graphs.push(graph);
    }
    if summary.self_loops_dropped + summary.duplicate_edges_dropped > 0 {
        log::info!(
            "{name}: dropped {} self-loops and {} duplicate edges",
            summary.self_loops_dropped,
            summary.duplicate_edges_dropped
        );
    }
    Ok((GraphDataset::new(name, graphs)?, summary))
}

fn check_count(path: &Path, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::parse(path, None, format!("{got} entries, expected {expected}")));
    }
    Ok(())
}

/// One-hot encoding of integer labels, offset by the smallest label.
fn one_hot(labels: &[i64]) -> Matrix {
    let min = labels.iter().copied().min().unwrap_or(0);
    let max = labels.iter().copied().max().unwrap_or(0);
    let width = (max - min + 1) as usize;
    let mut m = Matrix::zeros(labels.len(), width);
    for (i, &l) in labels.iter().enumerate() {
        m.set(i, (l - min) as usize, 1.0);
    }
    m
}

/// Writes `ds` in the TU layout. Features are always written as node attributes.
pub fn write_tu_dataset(ds: &GraphDataset, root_dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(root_dir).map_err(|e| Error::io(root_dir, e))?;
    let mut a = String::new();
    let mut ind = String::new();
    let mut attrs = String::new();
    let mut offset = 0usize;
    for (g, graph) in ds.graphs().iter().enumerate() {
        let adj = graph.adjacency();
        for i in 0..graph.node_count() {
            for &j in adj.neighbors(i) {
                let _ = writeln!(a, "{}, {}", offset + i + 1, offset + j + 1);
            }
            let _ = writeln!(ind, "{}", g + 1);
            let row: Vec<String> = graph.features().row(i).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(attrs, "{}", row.join(", "));
        }
        offset += graph.node_count();
    }
    let write = |suffix: &str, body: &str| -> Result<()> {
        let p = tu_path(root_dir, name, suffix);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("A", &a)?;
    write("graph_indicator", &ind)?;
    write("node_attributes", &attrs)?;
    if ds.graphs().iter().all(|g| g.label().is_some()) && !ds.is_empty() {
        let labels: String = ds.graphs().iter().map(|g| format!("{}\n", g.label().unwrap())).collect();
        write("graph_labels", &labels)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic pair
// ---------------------------------------------------------------------------

const SYNTH_MIN_NODES: usize = 20;
const SYNTH_MAX_NODES: usize = 40;
const ER_EDGE_PROB: f64 = 0.15;
const BA_EDGES_PER_NODE: usize = 2;

/// Erdős–Rényi ID graphs and preferential-attachment OOD graphs with constant features.
pub fn generate_synthetic_pair(n_graphs: usize, seed: u64) -> Result<(GraphDataset, GraphDataset)> {
    if n_graphs < 2 {
        return Err(Error::argument(format!("need at least 2 graphs per set, got {n_graphs}")));
    }
    let id: Vec<Graph> = (0..n_graphs)
        .into_par_iter()
        .map(|i| erdos_renyi(&mut rng::stream(seed, rng::SYNTH_ID + i as u64)))
        .collect();
    let ood: Vec<Graph> = (0..n_graphs)
        .into_par_iter()
        .map(|i| preferential_attachment(&mut rng::stream(seed, rng::SYNTH_OOD + i as u64)))
        .collect();
    Ok((GraphDataset::new("synthetic-er", id)?, GraphDataset::new("synthetic-ba", ood)?))
}

fn erdos_renyi(rng: &mut impl Rng) -> Graph {
    let n = rng.gen_range(SYNTH_MIN_NODES..=SYNTH_MAX_NODES);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(ER_EDGE_PROB) {
                edges.push((i, j));
            }
        }
    }
    Graph::unattributed(n, &edges, None).expect("generated edges are in range")
}

fn preferential_attachment(rng: &mut impl Rng) -> Graph {
    let n = rng.gen_range(SYNTH_MIN_NODES..=SYNTH_MAX_NODES);
    let m = BA_EDGES_PER_NODE;
    // Seed with a complete graph on m + 1 nodes; `stubs` lists each endpoint once per incident edge.
    let mut edges = Vec::new();
    let mut stubs = Vec::new();
    for i in 0..=m {
        for j in i + 1..=m {
            edges.push((i, j));
            stubs.extend([i, j]);
        }
    }
    for new in m + 1..n {
        let mut targets = BTreeSet::new();
        while targets.len() < m {
            targets.insert(stubs[rng.gen_range(0..stubs.len())]);
        }
        for t in targets {
            edges.push((t, new));
            stubs.extend([t, new]);
        }
    }
    Graph::unattributed(n, &edges, None).expect("generated edges are in range")
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    OodPair,
    Anomaly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl SplitSpec {
    fn validate(&self, expected: SplitMode) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::argument(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if self.mode != expected {
            return Err(Error::argument(format!("split mode {:?} used with the {expected:?} protocol", self.mode)));
        }
        Ok(())
    }

    fn train_count(&self, n: usize) -> usize {
        ((self.train_fraction * n as f64).round() as usize).clamp(1, n)
    }
}

/// Where a test graph came from: the ID/normal pool or the OOD/anomaly pool, with its source index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestOrigin {
    pub outlier: bool,
    pub source_index: usize,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: GraphDataset,
    pub test: GraphDataset,
    /// 0 = ID / normal, 1 = OOD / anomaly.
    pub test_labels: Vec<u8>,
    pub test_origin: Vec<TestOrigin>,
}

fn shuffled(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, stream));
    idx
}

fn assemble_test(
    name: &str,
    inliers: &GraphDataset,
    inlier_idx: &[usize],
    outliers: &GraphDataset,
    outlier_idx: &[usize],
    seed: u64,
) -> Result<(GraphDataset, Vec<u8>, Vec<TestOrigin>)> {
    let mut entries: Vec<TestOrigin> = inlier_idx
        .iter()
        .map(|&i| TestOrigin {
            outlier: false,
            source_index: i,
        })
        .chain(outlier_idx.iter().map(|&i| TestOrigin {
            outlier: true,
            source_index: i,
        }))
        .collect();
    entries.shuffle(&mut rng::stream(seed, rng::SPLIT_TEST_ORDER));
    let graphs = entries
        .iter()
        .map(|o| {
            let src = if o.outlier { outliers } else { inliers };
            src.graphs[o.source_index].clone()
        })
        .collect();
    let labels = entries.iter().map(|o| u8::from(o.outlier)).collect();
    Ok((GraphDataset::new(name, graphs)?, labels, entries))
}

/// ID/OOD protocol: train on a seeded fraction of the ID set, test on the rest plus as many OOD graphs.
pub fn split_ood(id_ds: &GraphDataset, ood_ds: &GraphDataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate(SplitMode::OodPair)?;
    if id_ds.is_empty() {
        return Err(Error::argument("ID dataset is empty"));
    }
    if id_ds.feature_dim() != ood_ds.feature_dim() && !ood_ds.is_empty() {
        return Err(Error::argument(format!(
            "ID feature width {} differs from OOD width {}",
            id_ds.feature_dim(),
            ood_ds.feature_dim()
        )));
    }
    let order = shuffled(id_ds.len(), spec.seed, rng::SPLIT_MAIN);
    let n_train = spec.train_count(id_ds.len());
    let n_test = id_ds.len() - n_train;
    if ood_ds.len() < n_test.max(1) {
        return Err(Error::argument(format!(
            "need at least {} OOD graphs, have {}",
            n_test.max(1),
            ood_ds.len()
        )));
    }
    let ood_pick: Vec<usize> = shuffled(ood_ds.len(), spec.seed, rng::SPLIT_OOD)[..n_test].to_vec();
    let train = id_ds.subset(format!("{}-train", id_ds.name()), &order[..n_train]);
    let (test, test_labels, test_origin) = assemble_test(
        &format!("{}-vs-{}-test", id_ds.name(), ood_ds.name()),
        id_ds,
        &order[n_train..],
        ood_ds,
        &ood_pick,
        spec.seed,
    )?;
    Ok(Split {
        train,
        test,
        test_labels,
        test_origin,
    })
}

/// Anomaly protocol: the minority class is anomalous; train on normal graphs only.
///
/// On an exact size tie the class with the larger label id is the anomalous one.
pub fn split_anomaly(ds: &GraphDataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate(SplitMode::Anomaly)?;
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for (i, g) in ds.graphs().iter().enumerate() {
        let label = g
            .label()
            .ok_or_else(|| Error::argument(format!("graph {i} of {} has no label", ds.name())))?;
        *counts.entry(label).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::argument(format!("{} has fewer than two graph classes", ds.name())));
    }
    let (&anomalous, _) = counts
        .iter()
        .min_by(|(la, ca), (lb, cb)| ca.cmp(cb).then(lb.cmp(la)))
        .expect("at least two classes");
    let normal: Vec<usize> = (0..ds.len()).filter(|&i| ds.graphs[i].label != Some(anomalous)).collect();
    let anomalies: Vec<usize> = (0..ds.len()).filter(|&i| ds.graphs[i].label == Some(anomalous)).collect();
    let order: Vec<usize> = shuffled(normal.len(), spec.seed, rng::SPLIT_MAIN)
        .into_iter()
        .map(|k| normal[k])
        .collect();
    let n_train = spec.train_count(normal.len());
    let train = ds.subset(format!("{}-train", ds.name()), &order[..n_train]);
    let (test, test_labels, test_origin) = assemble_test(
        &format!("{}-anomaly-test", ds.name()),
        ds,
        &order[n_train..],
        ds,
        &anomalies,
        spec.seed,
    )?;
    Ok(Split {
        train,
        test,
        test_labels,
        test_origin,
    })
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Disjoint union of several graphs.
#[derive(Debug, Clone)]
pub struct BatchedGraph {
    pub adjacency: Arc<SparseAdjacency>,
    pub features: Matrix,
    /// Graph slot of every node; nondecreasing.
    pub segment_ids: Vec<usize>,
    /// `offsets[g]..offsets[g + 1]` are the nodes of slot `g`.
    pub offsets: Vec<usize>,
    labels: Vec<Option<i64>>,
}

impl BatchedGraph {
    pub fn graph_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn nodes_of(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    /// Recovers the batched graphs.
    pub fn split(&self) -> Vec<Graph> {
        (0..self.graph_count())
            .map(|g| {
                let range = self.nodes_of(g);
                let lo = range.start;
                let mut edges = Vec::new();
                for i in range.clone() {
                    for &j in self.adjacency.neighbors(i) {
                        if i < j {
                            edges.push((i - lo, j - lo));
                        }
                    }
                }
                Graph::new(range.len(), &edges, self.features.slice_rows(lo, range.len()), self.labels[g])
                    .expect("batch blocks are valid graphs")
            })
            .collect()
    }
}

pub fn batch_graphs(graphs: &[&Graph]) -> Result<BatchedGraph> {
    let first = graphs.first().ok_or_else(|| Error::argument("cannot batch an empty list of graphs"))?;
    let d_f = first.feature_dim();
    if let Some(g) = graphs.iter().find(|g| g.feature_dim() != d_f) {
        return Err(Error::argument(format!(
            "mixed feature widths in batch: {d_f} and {}",
            g.feature_dim()
        )));
    }
    let mut offsets = Vec::with_capacity(graphs.len() + 1);
    offsets.push(0);
    let mut edges = Vec::new();
    let mut segment_ids = Vec::new();
    for (slot, g) in graphs.iter().enumerate() {
        let base = *offsets.last().unwrap();
        edges.extend(g.edges().iter().map(|&(i, j)| (base + i, base + j)));
        segment_ids.extend(std::iter::repeat(slot).take(g.node_count()));
        offsets.push(base + g.node_count());
    }
    let total = *offsets.last().unwrap();
    let feats: Vec<&Matrix> = graphs.iter().map(|g| g.features()).collect();
    Ok(BatchedGraph {
        adjacency: Arc::new(SparseAdjacency::from_undirected(total, &edges)),
        features: Matrix::vcat(&feats)?,
        segment_ids,
        offsets,
        labels: graphs.iter().map(|g| g.label()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, name: &str, files: &[(&str, &str)]) {
        for (suffix, body) in files {
            fs::write(tu_path(dir, name, suffix), body).unwrap();
        }
    }

    #[test]
    fn parses_two_graph_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "T",
            &[("A", "1, 2\n2, 1\n3, 4\n4, 3\n"), ("graph_indicator", "1\n1\n2\n2\n")],
        );
        let (ds, summary) = parse_tu_dataset_with_summary(dir.path(), "T").unwrap();
        assert_eq!(ds.len(), 2);
        for g in ds.graphs() {
            assert_eq!(g.node_count(), 2);
            assert_eq!(g.edges(), &[(0, 1)]);
            assert_eq!(g.features().data(), &[1.0, 1.0]);
        }
        assert_eq!(summary.feature_source, FeatureSource::Constant);
        assert_eq!(summary.duplicate_edges_dropped, 0);
    }

    #[test]
    fn reads_archive_subdirectory() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("T");
        fs::create_dir(&sub).unwrap();
        write_fixture(&sub, "T", &[("A", "1, 2\n"), ("graph_indicator", "1\n1\n")]);
        assert_eq!(parse_tu_dataset(dir.path(), "T").unwrap().len(), 1);
    }

    #[test]
    fn node_labels_become_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "T",
            &[
                ("A", "1, 2\n2, 1\n3, 4\n4, 3\n"),
                ("graph_indicator", "1\n1\n2\n2\n"),
                ("node_labels", "0\n1\n1\n0\n"),
            ],
        );
        let ds = parse_tu_dataset(dir.path(), "T").unwrap();
        assert_eq!(ds.feature_dim(), 2);
        assert_eq!(ds.graphs()[0].features().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(ds.graphs()[1].features().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn attributes_win_over_labels() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "T",
            &[
                ("A", "1, 2\n"),
                ("graph_indicator", "1\n1\n"),
                ("node_labels", "0\n1\n"),
                ("node_attributes", "0.5, 1e-3\n-2, 3.25\n"),
                ("graph_labels", "7\n"),
            ],
        );
        let ds = parse_tu_dataset(dir.path(), "T").unwrap();
        assert_eq!(ds.graphs()[0].features().data(), &[0.5, 1e-3, -2.0, 3.25]);
        assert_eq!(ds.graphs()[0].label(), Some(7));
    }

    #[test]
    fn out_of_range_edge_names_line() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "T",
            &[("A", "1, 2\n2, 1\n5, 1\n"), ("graph_indicator", "1\n1\n2\n2\n")],
        );
        match parse_tu_dataset(dir.path(), "T") {
            Err(Error::Parse { line: Some(3), path, .. }) => assert!(path.ends_with("T_A.txt")),
            other => panic!("expected parse error on line 3, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_ragged_rows_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "T", &[("A", "1, 2\n")]);
        assert!(matches!(parse_tu_dataset(dir.path(), "T"), Err(Error::Parse { .. })));
        write_fixture(
            dir.path(),
            "T",
            &[("graph_indicator", "1\n1\n"), ("node_attributes", "1, 2\n3\n")],
        );
        assert!(matches!(
            parse_tu_dataset(dir.path(), "T"),
            Err(Error::Parse { line: Some(2), .. })
        ));
    }

    #[test]
    fn self_loops_and_duplicates_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "T",
            &[("A", "1, 1\n1, 2\n1, 2\n2, 1\n"), ("graph_indicator", "1\n1\n")],
        );
        let (ds, s) = parse_tu_dataset_with_summary(dir.path(), "T").unwrap();
        assert_eq!(ds.graphs()[0].edges(), &[(0, 1)]);
        assert_eq!((s.self_loops_dropped, s.duplicate_edges_dropped), (1, 1));
    }

    #[test]
    fn synthetic_generator_bounds() {
        let (id, ood) = generate_synthetic_pair(100, 7).unwrap();
        assert!(id.graphs().iter().all(|g| (20..=40).contains(&g.node_count())));
        assert!(ood.graphs().iter().all(|g| (20..=40).contains(&g.node_count())));
        let mean_deg: f64 = ood
            .graphs()
            .iter()
            .map(|g| 2.0 * g.edges().len() as f64 / g.node_count() as f64)
            .sum::<f64>()
            / 100.0;
        assert!((mean_deg - 4.0).abs() <= 0.5, "mean degree {mean_deg}");
        assert!(matches!(generate_synthetic_pair(1, 7), Err(Error::Argument(_))));
    }

    #[test]
    fn split_counts_follow_protocol() {
        let (id, _) = generate_synthetic_pair(1000, 1).unwrap();
        let (ood, _) = generate_synthetic_pair(500, 2).unwrap();
        let spec = SplitSpec {
            train_fraction: 0.9,
            seed: 3,
            mode: SplitMode::OodPair,
        };
        let s = split_ood(&id, &ood, &spec).unwrap();
        assert_eq!(s.train.len(), 900);
        assert_eq!(s.test.len(), 200);
        assert_eq!(s.test_labels.iter().filter(|&&l| l == 1).count(), 100);

        let tiny = id.subset("tiny", &(0..10).collect::<Vec<_>>());
        let empty = id.subset("none", &[]);
        assert!(matches!(split_ood(&tiny, &empty, &spec), Err(Error::Argument(_))));
    }

    fn labelled(counts: &[(i64, usize)]) -> GraphDataset {
        let mut graphs = Vec::new();
        for &(label, n) in counts {
            for _ in 0..n {
                graphs.push(Graph::unattributed(2, &[(0, 1)], Some(label)).unwrap());
            }
        }
        GraphDataset::new("L", graphs).unwrap()
    }

    #[test]
    fn anomaly_split_uses_minority_class() {
        let ds = labelled(&[(0, 90), (1, 10)]);
        let spec = SplitSpec {
            train_fraction: 0.9,
            seed: 0,
            mode: SplitMode::Anomaly,
        };
        let s = split_anomaly(&ds, &spec).unwrap();
        assert_eq!(s.train.len(), 81);
        assert!(s.train.graphs().iter().all(|g| g.label() == Some(0)));
        assert_eq!(s.test.len(), 19);
        assert_eq!(s.test_labels.iter().filter(|&&l| l == 1).count(), 10);

        let tie = labelled(&[(0, 5), (3, 5)]);
        let s = split_anomaly(&tie, &spec).unwrap();
        for (g, &l) in s.test.graphs().iter().zip(&s.test_labels) {
            assert_eq!(l == 1, g.label() == Some(3));
        }

        let single = labelled(&[(0, 5)]);
        assert!(matches!(split_anomaly(&single, &spec), Err(Error::Argument(_))));
        let (unlabelled, _) = generate_synthetic_pair(10, 0).unwrap();
        assert!(matches!(split_anomaly(&unlabelled, &spec), Err(Error::Argument(_))));
    }

    #[test]
    fn batching_offsets_segments() {
        let a = Graph::unattributed(2, &[(0, 1)], None).unwrap();
        let b = Graph::unattributed(3, &[(0, 1), (1, 2)], Some(4)).unwrap();
        let batch = batch_graphs(&[&a, &b]).unwrap();
        assert_eq!(batch.node_count(), 5);
        assert_eq!(batch.segment_ids, vec![0, 0, 1, 1, 1]);
        assert_eq!(batch.adjacency.neighbors(3), &[2, 4]);
        assert_eq!(batch.split(), vec![a.clone(), b]);

        let single = batch_graphs(&[&a]).unwrap();
        assert_eq!(single.segment_ids, vec![0, 0]);
        assert_eq!(single.split(), vec![a.clone()]);

        assert!(matches!(batch_graphs(&[]), Err(Error::Argument(_))));
        let wide = Graph::new(2, &[], Matrix::zeros(2, 3), None).unwrap();
        assert!(matches!(batch_graphs(&[&a, &wide]), Err(Error::Argument(_))));
    }
}
