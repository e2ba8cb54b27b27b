//! Input graphs: data model, validation, JSON I/O, ordering helpers and
//! seeded synthetic generators.
//!
//! Edges are stored directed. The encoder and the grid environment see the
//! undirected neighbour relation returned by [`Graph::neighbors`].

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Device,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: usize,
    #[serde(rename = "op")]
    pub op_type: usize,
    pub compute: f64,
    pub memory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub bytes: f64,
}

/// Graph document exactly as it appears on disk. May violate invariants;
/// see [`validate_graph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGraph {
    pub kind: GraphKind,
    pub op_types: usize,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

/// One broken graph invariant, naming the first offending element.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    NoOpTypes,
    DuplicateNodeId { id: usize },
    NodeIdOutOfRange { id: usize, len: usize },
    MissingNodeId { id: usize },
    OpTypeOutOfRange { node: usize, op: usize, op_types: usize },
    BadNodeValue { node: usize, field: &'static str, value: f64 },
    EdgeEndpoint { edge: usize, endpoint: usize, len: usize },
    SelfLoop { edge: usize, node: usize },
    BadEdgeBytes { edge: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "graph has no nodes"),
            Violation::NoOpTypes => write!(f, "op_types must be at least 1"),
            Violation::DuplicateNodeId { id } => write!(f, "duplicate node id {id}"),
            Violation::NodeIdOutOfRange { id, len } => {
                write!(f, "node id {id} outside 0..{len}")
            }
            Violation::MissingNodeId { id } => write!(f, "missing node id {id}"),
            Violation::OpTypeOutOfRange { node, op, op_types } => {
                write!(f, "node {node}: op {op} outside 0..{op_types}")
            }
            Violation::BadNodeValue { node, field, value } => {
                write!(f, "node {node}: {field} = {value} must be finite and >= 0")
            }
            Violation::EdgeEndpoint { edge, endpoint, len } => {
                write!(f, "edge {edge}: endpoint {endpoint} outside 0..{len}")
            }
            Violation::SelfLoop { edge, node } => write!(f, "edge {edge}: self-loop on node {node}"),
            Violation::BadEdgeBytes { edge, value } => {
                write!(f, "edge {edge}: bytes = {value} must be finite and >= 0")
            }
        }
    }
}

fn bad_value(v: f64) -> bool {
    !v.is_finite() || v < 0.0
}

/// Checks every graph invariant. An empty result means the graph is valid.
pub fn validate_graph(g: &RawGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = g.nodes.len();
    if n == 0 {
        out.push(Violation::Empty);
    }
    if g.op_types == 0 {
        out.push(Violation::NoOpTypes);
    }

    let mut seen = vec![false; n];
    let mut id_problem = false;
    for node in &g.nodes {
        if node.id >= n {
            out.push(Violation::NodeIdOutOfRange { id: node.id, len: n });
            id_problem = true;
        } else if seen[node.id] {
            out.push(Violation::DuplicateNodeId { id: node.id });
            id_problem = true;
        } else {
            seen[node.id] = true;
        }
    }
    // A gap is implied by a duplicate or out-of-range id; only report it alone.
    if !id_problem {
        if let Some(id) = seen.iter().position(|s| !s) {
            out.push(Violation::MissingNodeId { id });
        }
    }

    for node in &g.nodes {
        if g.op_types > 0 && node.op_type >= g.op_types {
            out.push(Violation::OpTypeOutOfRange {
                node: node.id,
                op: node.op_type,
                op_types: g.op_types,
            });
        }
        if bad_value(node.compute) {
            out.push(Violation::BadNodeValue { node: node.id, field: "compute", value: node.compute });
        }
        if bad_value(node.memory) {
            out.push(Violation::BadNodeValue { node: node.id, field: "memory", value: node.memory });
        }
    }

    for (k, e) in g.edges.iter().enumerate() {
        for endpoint in [e.src, e.dst] {
            if endpoint >= n {
                out.push(Violation::EdgeEndpoint { edge: k, endpoint, len: n });
            }
        }
        if e.src == e.dst {
            out.push(Violation::SelfLoop { edge: k, node: e.src });
        }
        if bad_value(e.bytes) {
            out.push(Violation::BadEdgeBytes { edge: k, value: e.bytes });
        }
    }
    out
}

/// A validated, immutable graph. Nodes are stored so that `nodes()[i].id == i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    raw: RawGraph,
    neighbors: Vec<Vec<usize>>,
    in_degree: Vec<usize>,
    out_degree: Vec<usize>,
}

impl Graph {
    pub fn new(kind: GraphKind, op_types: usize, nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        Self::from_raw(RawGraph { kind, op_types, nodes, edges })
    }

    pub fn from_raw(mut raw: RawGraph) -> Result<Self> {
        let violations = validate_graph(&raw);
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        raw.nodes.sort_by_key(|n| n.id);

        let n = raw.nodes.len();
        let mut neighbors = vec![Vec::new(); n];
        let mut in_degree = vec![0; n];
        let mut out_degree = vec![0; n];
        for e in &raw.edges {
            neighbors[e.src].push(e.dst);
            neighbors[e.dst].push(e.src);
            out_degree[e.src] += 1;
            in_degree[e.dst] += 1;
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { raw, neighbors, in_degree, out_degree })
    }

    pub fn kind(&self) -> GraphKind {
        self.raw.kind
    }

    pub fn op_types(&self) -> usize {
        self.raw.op_types
    }

    pub fn nodes(&self) -> &[Node] {
        &self.raw.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.raw.edges
    }

    pub fn len(&self) -> usize {
        self.raw.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.raw.nodes[i]
    }

    /// Undirected neighbour set of `i`: sorted, deduplicated.
    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        self.neighbors
            .get(i)
            .map(Vec::as_slice)
            .ok_or(Error::Index { index: i, len: self.len() })
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.in_degree[i]
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.out_degree[i]
    }

    /// Incident edge count (in + out, parallel edges counted separately).
    pub fn degree(&self, i: usize) -> usize {
        self.in_degree[i] + self.out_degree[i]
    }

    pub fn total_memory(&self) -> f64 {
        self.raw.nodes.iter().map(|n| n.memory).sum()
    }

    pub fn as_raw(&self) -> &RawGraph {
        &self.raw
    }

    /// Kahn's algorithm; among ready nodes the smallest id goes first.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.len();
        let mut indeg = self.in_degree.clone();
        let mut succ = vec![Vec::new(); n];
        for e in &self.raw.edges {
            succ[e.src].push(e.dst);
        }
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(u)) = ready.pop() {
            order.push(u);
            for &v in &succ[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    ready.push(Reverse(v));
                }
            }
        }
        if order.len() < n {
            let node = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
            return Err(Error::Cycle { node });
        }
        Ok(order)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.raw).expect("graph serialization is infallible")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_graph(text: &str, context: &str) -> Result<Graph> {
    let raw: RawGraph = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: context.to_string(),
        message: e.to_string(),
    })?;
    Graph::from_raw(raw)
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Chain,
    Layered,
    RandomDag,
}

/// Knobs for [`generate_synthetic`]. Ranges are inclusive `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub kind: GraphKind,
    pub op_types: usize,
    pub compute: (f64, f64),
    pub memory: (f64, f64),
    pub bytes: (f64, f64),
    /// Layer count for [`Family::Layered`].
    pub layers: usize,
    /// Edge probability for layered and random DAG families.
    pub edge_prob: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            kind: GraphKind::Device,
            op_types: 4,
            compute: (1.0, 10.0),
            memory: (1.0, 10.0),
            bytes: (1.0, 10.0),
            layers: 3,
            edge_prob: 0.3,
        }
    }
}

impl SynthParams {
    fn check(&self, n: usize, family: Family) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidParams("node count must be at least 1".into()));
        }
        if self.op_types == 0 {
            return Err(Error::InvalidParams("op_types must be at least 1".into()));
        }
        for (name, (lo, hi)) in [("compute", self.compute), ("memory", self.memory), ("bytes", self.bytes)] {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return Err(Error::InvalidParams(format!("{name} range [{lo}, {hi}] must satisfy 0 <= lo <= hi")));
            }
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(Error::InvalidParams(format!("edge_prob {} outside [0, 1]", self.edge_prob)));
        }
        if family == Family::Layered && (self.layers == 0 || self.layers > n) {
            return Err(Error::InvalidParams(format!("layers = {} must be in 1..={n}", self.layers)));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Deterministic graph generator; a pure function of its arguments.
pub fn generate_synthetic(seed: u64, n: usize, family: Family, params: &SynthParams) -> Result<Graph> {
    params.check(n, family)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let nodes: Vec<Node> = (0..n)
        .map(|id| {
            let op_type = rng.gen_range(0..params.op_types);
            let compute = draw(&mut rng, params.compute);
            let memory = draw(&mut rng, params.memory);
            Node { id, op_type, compute, memory }
        })
        .collect();

    let mut pairs = Vec::new();
    match family {
        Family::Chain => pairs.extend((1..n).map(|i| (i - 1, i))),
        Family::RandomDag => {
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen_bool(params.edge_prob) {
                        pairs.push((i, j));
                    }
                }
            }
        }
        Family::Layered => {
            let layer_of = |i: usize| i * params.layers / n;
            let mut start = 0;
            while start < n {
                let layer = layer_of(start);
                let end = (start..n).find(|&i| layer_of(i) != layer).unwrap_or(n);
                if layer > 0 {
                    let prev: Vec<usize> = (0..start).filter(|&i| layer_of(i) == layer - 1).collect();
                    for v in start..end {
                        let before = pairs.len();
                        for &u in &prev {
                            if rng.gen_bool(params.edge_prob) {
                                pairs.push((u, v));
                            }
                        }
                        if pairs.len() == before {
                            pairs.push((prev[rng.gen_range(0..prev.len())], v));
                        }
                    }
                }
                start = end;
            }
        }
    }

    let edges = pairs
        .into_iter()
        .map(|(src, dst)| Edge { src, dst, bytes: draw(&mut rng, params.bytes) })
        .collect();
    Graph::new(params.kind, params.op_types, nodes, edges)
}
