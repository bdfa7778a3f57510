//! Graphs, datasets, the synthetic generator, splits and JSONL I/O.
//!
//! File format: a header line `{"D": int, "T": int, "name": str}` followed by
//! one graph per line, `{"n": int, "edges": [[i, j], ...], "x": [[f, ...], ...],
//! "y": [float | null, ...]}`. Edges are undirected and written once with
//! `i < j`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Matrix;
use crate::error::{invalid, Error, Result};
use crate::rng::{rng_for, Rng};

/// An undirected graph with node features and (possibly missing) binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub x: Matrix,
    pub a: Matrix,
    pub labels: Vec<Option<bool>>,
}

impl Graph {
    /// Builds a graph from an edge list. Edges are symmetrized and self loops
    /// are dropped.
    pub fn from_edges(x: Matrix, edges: &[(usize, usize)], labels: Vec<Option<bool>>) -> Result<Self> {
        let n = x.rows();
        let mut a = Matrix::zeros(n, n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(invalid(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            if i != j {
                a.set(i, j, 1.0);
                a.set(j, i, 1.0);
            }
        }
        Self::new(x, a, labels)
    }

    /// Validates and wraps a dense adjacency.
    pub fn new(x: Matrix, a: Matrix, labels: Vec<Option<bool>>) -> Result<Self> {
        let n = x.rows();
        if n == 0 {
            return Err(invalid("graph has no nodes"));
        }
        if a.shape() != (n, n) {
            return Err(Error::Shape { op: "graph", left: (n, n), right: a.shape() });
        }
        if !is_valid_adjacency(&a) {
            return Err(invalid("adjacency must be symmetric, binary, with a zero diagonal"));
        }
        if labels.iter().all(Option::is_none) {
            return Err(Error::AllLabelsMissing);
        }
        Ok(Self { x, a, labels })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    /// Undirected edges with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.a.get(i, j) != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Labels as a 1 x T row (missing entries are 0) plus a 0/1 mask row.
    pub fn label_rows(&self) -> (Vec<f64>, Vec<f64>) {
        let targets = self.labels.iter().map(|l| if *l == Some(true) { 1.0 } else { 0.0 }).collect();
        let mask = self.labels.iter().map(|l| if l.is_some() { 1.0 } else { 0.0 }).collect();
        (targets, mask)
    }
}

pub(crate) fn is_valid_adjacency(a: &Matrix) -> bool {
    let n = a.rows();
    if a.cols() != n {
        return false;
    }
    for i in 0..n {
        if a.get(i, i) != 0.0 {
            return false;
        }
        for j in (i + 1)..n {
            let v = a.get(i, j);
            if (v != 0.0 && v != 1.0) || a.get(j, i) != v {
                return false;
            }
        }
    }
    true
}

/// Number of nonzero adjacency entries; each undirected edge counts twice.
pub fn adjacency_nnz(g: &Graph) -> usize {
    g.a.nnz()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_dim: usize,
    pub task_count: usize,
    pub graphs: Vec<Graph>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, feature_dim: usize, task_count: usize, graphs: Vec<Graph>) -> Result<Self> {
        for (i, g) in graphs.iter().enumerate() {
            if g.feature_dim() != feature_dim || g.labels.len() != task_count {
                return Err(invalid(format!(
                    "graph {i} has D={} T={}, dataset expects D={feature_dim} T={task_count}",
                    g.feature_dim(),
                    g.labels.len()
                )));
            }
        }
        Ok(Self { name: name.into(), feature_dim, task_count, graphs })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            feature_dim: self.feature_dim,
            task_count: self.task_count,
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
        }
    }

    /// SHA-256 of the serialized dataset, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_dataset(self, &mut buf)?;
        Ok(hex::encode(Sha256::digest(&buf)))
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    #[serde(rename = "D")]
    feature_dim: usize,
    #[serde(rename = "T")]
    task_count: usize,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct GraphLine {
    n: usize,
    edges: Vec<[usize; 2]>,
    x: Vec<Vec<f64>>,
    y: Vec<Option<f64>>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path)?;
    read_dataset(BufReader::new(file))
}

pub fn read_dataset(reader: impl BufRead) -> Result<Dataset> {
    let parse = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let (hline, header) = lines.next().ok_or_else(|| parse(1, "missing header line".into()))?;
    let header: HeaderLine = serde_json::from_str(&header?).map_err(|e| parse(hline, e.to_string()))?;

    let mut graphs = Vec::new();
    for (lineno, line) in lines {
        let gl: GraphLine = serde_json::from_str(&line?).map_err(|e| parse(lineno, e.to_string()))?;
        if gl.x.len() != gl.n {
            return Err(parse(lineno, format!("{} feature rows for n = {}", gl.x.len(), gl.n)));
        }
        if let Some(row) = gl.x.iter().find(|r| r.len() != header.feature_dim) {
            return Err(parse(lineno, format!("feature dim {} != D = {}", row.len(), header.feature_dim)));
        }
        if gl.y.len() != header.task_count {
            return Err(parse(lineno, format!("{} labels != T = {}", gl.y.len(), header.task_count)));
        }
        let labels = gl
            .y
            .iter()
            .map(|v| match v {
                None => Ok(None),
                Some(v) if *v == 0.0 => Ok(Some(false)),
                Some(v) if *v == 1.0 => Ok(Some(true)),
                Some(v) => Err(parse(lineno, format!("label {v} is not 0, 1 or null"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let x = Matrix::from_rows(&gl.x).map_err(|e| parse(lineno, e.to_string()))?;
        let edges: Vec<(usize, usize)> = gl.edges.iter().map(|e| (e[0], e[1])).collect();
        let g = Graph::from_edges(x, &edges, labels).map_err(|e| parse(lineno, e.to_string()))?;
        graphs.push(g);
    }
    Dataset::new(header.name, header.feature_dim, header.task_count, graphs)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(d, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset(d: &Dataset, mut w: impl Write) -> Result<()> {
    let header = HeaderLine { feature_dim: d.feature_dim, task_count: d.task_count, name: d.name.clone() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for g in &d.graphs {
        let line = GraphLine {
            n: g.n(),
            edges: g.edges().into_iter().map(|(i, j)| [i, j]).collect(),
            x: g.x.to_rows(),
            y: g.labels.iter().map(|l| l.map(|b| if b { 1.0 } else { 0.0 })).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologySignal {
    /// Positive graphs carry planted triangles; negatives are bipartite.
    TriangleMotif,
    /// Positive graphs are two dense communities joined by one bridge.
    TwoCommunity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    FeatureOnly,
    TopologyOnly,
    /// Positive iff the feature offset is positive and the motif is present.
    Joint,
    /// Two tasks: feature offset sign and motif presence.
    MultiTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_graphs: usize,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub feature_dim: usize,
    pub edge_prob: f64,
    /// Per-coordinate shift of the node-feature mean, `+` or `-` by class.
    pub feature_signal: f64,
    pub topology_signal: TopologySignal,
    pub label_rule: LabelRule,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_graphs: 500,
            nodes_min: 8,
            nodes_max: 14,
            feature_dim: 8,
            edge_prob: 0.1,
            feature_signal: 0.3,
            topology_signal: TopologySignal::TriangleMotif,
            label_rule: LabelRule::Joint,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_min < 3 {
            return Err(Error::InfeasibleSpec(format!("nodes_min {} < 3", self.nodes_min)));
        }
        if self.nodes_max < self.nodes_min {
            return Err(Error::InfeasibleSpec("nodes_max < nodes_min".into()));
        }
        let motif_nodes = match self.topology_signal {
            TopologySignal::TriangleMotif => 3,
            TopologySignal::TwoCommunity => 4,
        };
        if self.nodes_max < motif_nodes {
            return Err(Error::InfeasibleSpec(format!(
                "motif needs {motif_nodes} nodes but nodes_max is {}",
                self.nodes_max
            )));
        }
        if !(self.edge_prob > 0.0 && self.edge_prob < 1.0) {
            return Err(Error::InfeasibleSpec(format!("edge_prob {} outside (0, 1)", self.edge_prob)));
        }
        if self.feature_dim == 0 {
            return Err(Error::InfeasibleSpec("feature_dim must be positive".into()));
        }
        if !self.feature_signal.is_finite() {
            return Err(Error::InfeasibleSpec("feature_signal must be finite".into()));
        }
        Ok(())
    }

    fn task_count(&self) -> usize {
        if self.label_rule == LabelRule::MultiTask {
            2
        } else {
            1
        }
    }

    fn name(&self) -> String {
        let rule = match self.label_rule {
            LabelRule::FeatureOnly => "feature",
            LabelRule::TopologyOnly => "topology",
            LabelRule::Joint => "joint",
            LabelRule::MultiTask => "multitask",
        };
        format!("synthetic-{rule}")
    }
}

/// Generates a labelled dataset. Deterministic in `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_for(seed, &[0]);
    let n = spec.num_graphs;

    // balanced primary labels, shuffled
    let mut primary: Vec<bool> = (0..n).map(|i| i < n.div_ceil(2)).collect();
    primary.shuffle(&mut rng);

    let mut graphs = Vec::with_capacity(n);
    for (idx, &label) in primary.iter().enumerate() {
        let mut grng = rng_for(seed, &[1, idx as u64]);
        let (positive_offset, motif, labels) = match spec.label_rule {
            LabelRule::FeatureOnly => (label, grng.random_bool(0.5), vec![Some(label)]),
            LabelRule::TopologyOnly => (grng.random_bool(0.5), label, vec![Some(label)]),
            LabelRule::Joint => {
                let (f, m) = if label {
                    (true, true)
                } else {
                    [(true, false), (false, true), (false, false)][grng.random_range(0..3)]
                };
                (f, m, vec![Some(label)])
            }
            LabelRule::MultiTask => {
                let m = grng.random_bool(0.5);
                (label, m, vec![Some(label), Some(m)])
            }
        };
        let nodes = grng.random_range(spec.nodes_min..=spec.nodes_max);
        let edges = match spec.topology_signal {
            TopologySignal::TriangleMotif => triangle_graph(nodes, spec.edge_prob, motif, &mut grng),
            TopologySignal::TwoCommunity => community_graph(nodes, spec.edge_prob, motif, &mut grng),
        };
        let offset = if positive_offset { spec.feature_signal } else { -spec.feature_signal };
        let x = Matrix::from_fn(nodes, spec.feature_dim, |_, _| {
            offset + grng.sample::<f64, _>(StandardNormal)
        });
        graphs.push(Graph::from_edges(x, &edges, labels)?);
    }
    Dataset::new(spec.name(), spec.feature_dim, spec.task_count(), graphs)
}

/// Random spanning tree plus extra edges that keep the graph bipartite.
/// With `motif`, disjoint triangles are planted on about a quarter of the
/// nodes. Without it the result is triangle-free.
fn triangle_graph(n: usize, p: f64, motif: bool, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut edges = BTreeSet::new();
    let mut depth = vec![0usize; n];
    for v in 1..n {
        let parent = rng.random_range(0..v);
        depth[v] = depth[parent] + 1;
        edges.insert((parent, v));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if depth[i] % 2 != depth[j] % 2 && rng.random_bool(p) {
                edges.insert((i, j));
            }
        }
    }
    if motif {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let triangles = (n / 4).max(1);
        for t in order.chunks_exact(3).take(triangles) {
            let mut t = t.to_vec();
            t.sort_unstable();
            edges.insert((t[0], t[1]));
            edges.insert((t[0], t[2]));
            edges.insert((t[1], t[2]));
        }
    }
    edges.into_iter().collect()
}

/// Two communities with dense interiors and a single bridge when `motif`,
/// otherwise one random connected graph of similar density.
fn community_graph(n: usize, p: f64, motif: bool, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut edges = BTreeSet::new();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let dense = (3.0 * p).min(0.9);
    let mut connect = |group: &[usize], prob: f64, edges: &mut BTreeSet<(usize, usize)>| {
        for w in group.windows(2) {
            edges.insert((w[0].min(w[1]), w[0].max(w[1])));
        }
        for (k, &i) in group.iter().enumerate() {
            for &j in &group[k + 1..] {
                if rng.random_bool(prob) {
                    edges.insert((i.min(j), i.max(j)));
                }
            }
        }
    };
    if motif {
        let (left, right) = order.split_at(n / 2);
        connect(left, dense, &mut edges);
        connect(right, dense, &mut edges);
        let (a, b) = (left[0], right[0]);
        edges.insert((a.min(b), a.max(b)));
    } else {
        connect(&order, dense / 2.0, &mut edges);
    }
    edges.into_iter().collect()
}

/// Seeded random split into (train, val, test).
///
/// Validation and test sizes are `floor(len * ratio)`; the remainder goes to
/// training.
pub fn split(d: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) {
        return Err(invalid(format!("split ratios must all be positive, got {ratios:?}")));
    }
    if ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios sum to {}, not 1", tr + va + te)));
    }
    let n = d.len();
    let n_val = (n as f64 * va).floor() as usize;
    let n_test = (n as f64 * te).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[2]));
    Ok((
        d.subset(&idx[..n_train]),
        d.subset(&idx[n_train..n_train + n_val]),
        d.subset(&idx[n_train + n_val..]),
    ))
}
