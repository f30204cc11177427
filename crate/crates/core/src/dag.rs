//! Node-attributed DAGs and their unique layerwise bipartite tokenization.
//!
//! A DAG is split into layers by longest-path depth: layer 1 holds the
//! sources, and layer `l + 1` holds every remaining node whose predecessors
//! all lie in the first `l` layers. Each layer comes with the slice of edges
//! that point into it, so the sequence of `(layer, edge slice)` pairs is an
//! invertible encoding of the graph.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DagError {
    #[error("cycle detected through nodes {0:?}")]
    CycleDetected(Vec<usize>),
    #[error("edge ({0}, {1}) references a node outside [0, {2})")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("attribute mismatch at node {node}: {reason}")]
    AttrChannelMismatch { node: usize, reason: String },
    #[error("node {0} has no predecessor in the immediately preceding layer")]
    MissingLayerPredecessor(usize),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("layer index {index} out of range for {layers} layers")]
    IndexOutOfRange { index: usize, layers: usize },
}

/// Directed acyclic graph with categorical node attributes and an optional
/// scalar label.
///
/// Edges are kept sorted by `(destination, source)`, so two graphs with the
/// same edge set compare equal regardless of the order they were built in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dag {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    attrs: Vec<Vec<u32>>,
    label: Option<f64>,
}

impl Dag {
    /// Builds a DAG and validates it.
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        attrs: Vec<Vec<u32>>,
        label: Option<f64>,
    ) -> Result<Self, DagError> {
        let dag = Self::from_parts(num_nodes, edges, attrs, label);
        validate_dag(&dag)?;
        Ok(dag)
    }

    /// Builds a DAG without validation. Edges are put in canonical order.
    pub fn from_parts(
        num_nodes: usize,
        mut edges: Vec<(usize, usize)>,
        attrs: Vec<Vec<u32>>,
        label: Option<f64>,
    ) -> Self {
        edges.sort_unstable_by_key(|&(u, v)| (v, u));
        Self {
            num_nodes,
            edges,
            attrs,
            label,
        }
    }

    pub fn empty() -> Self {
        Self::from_parts(0, Vec::new(), Vec::new(), None)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges sorted by `(destination, source)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn attrs(&self) -> &[Vec<u32>] {
        &self.attrs
    }

    pub fn label(&self) -> Option<f64> {
        self.label
    }

    pub fn set_label(&mut self, label: Option<f64>) {
        self.label = label;
    }

    pub fn with_label(mut self, label: Option<f64>) -> Self {
        self.label = label;
        self
    }

    /// Number of attribute channels per node (0 for the empty graph).
    pub fn num_channels(&self) -> usize {
        self.attrs.first().map_or(0, Vec::len)
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(_, v) in &self.edges {
            deg[v] += 1;
        }
        deg
    }

    /// Predecessor lists, each sorted ascending.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            preds[v].push(u);
        }
        preds
    }

    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut succ = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            succ[u].push(v);
        }
        for s in &mut succ {
            s.sort_unstable();
        }
        succ
    }

    /// Checks every attribute value against per-channel cardinalities.
    pub fn check_cardinalities(&self, cards: &[usize]) -> Result<(), DagError> {
        for (node, row) in self.attrs.iter().enumerate() {
            if row.len() != cards.len() {
                return Err(DagError::AttrChannelMismatch {
                    node,
                    reason: format!("expected {} channels, found {}", cards.len(), row.len()),
                });
            }
            for (k, (&value, &card)) in row.iter().zip(cards).enumerate() {
                if value as usize >= card {
                    return Err(DagError::AttrChannelMismatch {
                        node,
                        reason: format!("channel {k} value {value} is not below {card}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Checks range, duplicates, attribute shape and acyclicity, in that order.
pub fn validate_dag(d: &Dag) -> Result<(), DagError> {
    let n = d.num_nodes;
    for &(u, v) in &d.edges {
        if u >= n || v >= n {
            return Err(DagError::EdgeOutOfRange(u, v, n));
        }
    }
    for &(u, v) in &d.edges {
        if u == v {
            return Err(DagError::CycleDetected(vec![u]));
        }
    }
    for pair in d.edges.windows(2) {
        if pair[0] == pair[1] {
            return Err(DagError::DuplicateEdge(pair[0].0, pair[0].1));
        }
    }
    if d.attrs.len() != n {
        return Err(DagError::AttrChannelMismatch {
            node: d.attrs.len().min(n),
            reason: format!("{} attribute rows for {} nodes", d.attrs.len(), n),
        });
    }
    let k = d.num_channels();
    if let Some(node) = d.attrs.iter().position(|row| row.len() != k) {
        return Err(DagError::AttrChannelMismatch {
            node,
            reason: format!("expected {k} channels, found {}", d.attrs[node].len()),
        });
    }
    topological_depths(d).map(|_| ())
}

/// Longest-path depth of every node (sources have depth 0), via Kahn's
/// algorithm. Fails with a cycle witness if no topological order exists.
fn topological_depths(d: &Dag) -> Result<Vec<usize>, DagError> {
    let n = d.num_nodes;
    let succ = d.successors();
    let mut indeg = d.in_degrees();
    let mut depth = vec![0usize; n];
    let mut queue: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut head = 0;
    while head < queue.len() {
        let u = queue[head];
        head += 1;
        for &v in &succ[u] {
            depth[v] = depth[v].max(depth[u] + 1);
            indeg[v] -= 1;
            if indeg[v] == 0 {
                queue.push(v);
            }
        }
    }
    if queue.len() == n {
        return Ok(depth);
    }
    // Every unprocessed node keeps an unprocessed predecessor; walking
    // backwards along them must revisit a node.
    let preds = d.predecessors();
    let start = (0..n).find(|&v| indeg[v] > 0).expect("unprocessed node");
    let mut seen = vec![usize::MAX; n];
    let mut walk = Vec::new();
    let mut cur = start;
    while seen[cur] == usize::MAX {
        seen[cur] = walk.len();
        walk.push(cur);
        cur = *preds[cur]
            .iter()
            .find(|&&p| indeg[p] > 0)
            .expect("remaining node has a remaining predecessor");
    }
    let mut cycle = walk[seen[cur]..].to_vec();
    cycle.reverse();
    Err(DagError::CycleDetected(cycle))
}

/// Ordered layers `V(1)..V(L)` plus the edge slices `E(2)..E(L)`.
///
/// Node IDs are the original DAG's IDs; nothing is re-indexed. Node
/// attributes and the label travel with the partition so that
/// [`reconstruct`] is an exact inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub layers: Vec<Vec<usize>>,
    /// `edge_slices[i]` holds the edges into `layers[i + 1]`.
    pub edge_slices: Vec<Vec<(usize, usize)>>,
    pub attrs: Vec<Vec<u32>>,
    pub label: Option<f64>,
}

impl LayerPartition {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.attrs.len()
    }

    /// Layer index (0-based) of every node.
    pub fn layer_of(&self) -> Vec<usize> {
        let mut of = vec![0; self.num_nodes()];
        for (l, layer) in self.layers.iter().enumerate() {
            for &v in layer {
                of[v] = l;
            }
        }
        of
    }
}

/// Splits a DAG into its layerwise partition.
pub fn layer_partition(d: &Dag) -> Result<LayerPartition, DagError> {
    validate_dag(d)?;
    let depth = topological_depths(d)?;
    let num_layers = depth.iter().map(|&x| x + 1).max().unwrap_or(0);
    let mut layers = vec![Vec::new(); num_layers];
    for (v, &k) in depth.iter().enumerate() {
        layers[k].push(v);
    }
    let mut edge_slices = vec![Vec::new(); num_layers.saturating_sub(1)];
    for &(u, v) in &d.edges {
        // Sources have depth 0 and receive no edges.
        edge_slices[depth[v] - 1].push((u, v));
    }
    Ok(LayerPartition {
        layers,
        edge_slices,
        attrs: d.attrs.clone(),
        label: d.label,
    })
}

/// Inverse of [`layer_partition`].
pub fn reconstruct(p: &LayerPartition) -> Result<Dag, DagError> {
    let n = p.attrs.len();
    let mut layer_of = vec![usize::MAX; n];
    for (l, layer) in p.layers.iter().enumerate() {
        for &v in layer {
            if v >= n {
                return Err(DagError::InvalidPartition(format!(
                    "node {v} outside [0, {n})"
                )));
            }
            if layer_of[v] != usize::MAX {
                return Err(DagError::InvalidPartition(format!(
                    "node {v} appears in more than one layer"
                )));
            }
            layer_of[v] = l;
        }
    }
    if let Some(v) = layer_of.iter().position(|&l| l == usize::MAX) {
        return Err(DagError::InvalidPartition(format!(
            "node {v} is not assigned to any layer"
        )));
    }
    if p.edge_slices.len() != p.layers.len().saturating_sub(1) {
        return Err(DagError::InvalidPartition(format!(
            "{} edge slices for {} layers",
            p.edge_slices.len(),
            p.layers.len()
        )));
    }
    let mut edges = Vec::new();
    for (i, slice) in p.edge_slices.iter().enumerate() {
        let target = i + 1;
        for &(u, v) in slice {
            if u >= n || v >= n {
                return Err(DagError::EdgeOutOfRange(u, v, n));
            }
            if layer_of[v] != target || layer_of[u] >= target {
                return Err(DagError::InvalidPartition(format!(
                    "edge ({u}, {v}) in slice {} does not point from V(<={}) into V({})",
                    target + 1,
                    target,
                    target + 1
                )));
            }
            edges.push((u, v));
        }
    }
    Dag::new(n, edges, p.attrs.clone(), p.label)
}

/// The bipartite step that produces layer `l + 1` from the first `l` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteSlice {
    pub context_nodes: Vec<usize>,
    pub new_nodes: Vec<usize>,
    pub cross_edges: Vec<(usize, usize)>,
}

pub fn bipartite_slice(p: &LayerPartition, l: usize) -> Result<BipartiteSlice, DagError> {
    if l >= p.layers.len() {
        return Err(DagError::IndexOutOfRange {
            index: l,
            layers: p.layers.len(),
        });
    }
    let context_nodes = p.layers[..l].iter().flatten().copied().collect();
    let cross_edges = if l == 0 {
        Vec::new()
    } else {
        p.edge_slices[l - 1].clone()
    };
    Ok(BipartiteSlice {
        context_nodes,
        new_nodes: p.layers[l].clone(),
        cross_edges,
    })
}

/// Per-graph summary statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagStats {
    pub num_layers: usize,
    pub layer_sizes: Vec<usize>,
    pub in_degrees: Vec<usize>,
    pub num_edges: usize,
}

pub fn dag_stats(d: &Dag) -> Result<DagStats, DagError> {
    let p = layer_partition(d)?;
    Ok(DagStats {
        num_layers: p.num_layers(),
        layer_sizes: p.layers.iter().map(Vec::len).collect(),
        in_degrees: d.in_degrees(),
        num_edges: d.num_edges(),
    })
}

/// Checks that every non-source node has a predecessor in the layer right
/// before its own. Graphs built by [`layer_partition`] satisfy this by
/// construction; the check guards ingestion of external data whose
/// declared structure must round-trip through the tokenization.
pub fn check_predecessor_property(d: &Dag) -> Result<(), DagError> {
    let p = layer_partition(d)?;
    let layer_of = p.layer_of();
    let preds = d.predecessors();
    for (v, ps) in preds.iter().enumerate() {
        if layer_of[v] > 0 && !ps.iter().any(|&u| layer_of[u] + 1 == layer_of[v]) {
            return Err(DagError::MissingLayerPredecessor(v));
        }
    }
    Ok(())
}

/// Prefix of a partition: the first `l` layers renumbered in layer order.
///
/// Local index `i` refers to `nodes[i]` of the original graph. Used as the
/// model's view of `G(<=l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prefix {
    pub nodes: Vec<usize>,
    pub attrs: Vec<Vec<u32>>,
    pub depth: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub num_layers: usize,
    /// Local index of the first node of the last layer.
    pub last_layer_start: usize,
}

impl Prefix {
    pub fn empty() -> Self {
        Self {
            nodes: Vec::new(),
            attrs: Vec::new(),
            depth: Vec::new(),
            edges: Vec::new(),
            num_layers: 0,
            last_layer_start: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn from_partition(p: &LayerPartition, l: usize) -> Self {
        let l = l.min(p.layers.len());
        let mut local = vec![usize::MAX; p.num_nodes()];
        let mut nodes = Vec::new();
        let mut depth = Vec::new();
        let mut last_layer_start = 0;
        for (k, layer) in p.layers[..l].iter().enumerate() {
            last_layer_start = nodes.len();
            for &v in layer {
                local[v] = nodes.len();
                nodes.push(v);
                depth.push(k);
            }
        }
        let edges = p.edge_slices[..l.saturating_sub(1)]
            .iter()
            .flatten()
            .map(|&(u, v)| (local[u], local[v]))
            .collect();
        let attrs = nodes.iter().map(|&v| p.attrs[v].clone()).collect();
        Self {
            nodes,
            attrs,
            depth,
            edges,
            num_layers: l,
            last_layer_start,
        }
    }

    /// Appends a new layer whose nodes get the next local indices.
    pub fn push_layer(&mut self, attrs: Vec<Vec<u32>>, cross_edges: &[(usize, usize)]) {
        let start = self.nodes.len();
        for (i, row) in attrs.into_iter().enumerate() {
            self.nodes.push(start + i);
            self.attrs.push(row);
            self.depth.push(self.num_layers);
        }
        self.edges.extend(cross_edges.iter().map(|&(u, j)| (u, start + j)));
        self.last_layer_start = start;
        self.num_layers += 1;
    }

    /// Converts into a DAG with node IDs equal to local indices.
    pub fn to_dag(&self, label: Option<f64>) -> Dag {
        Dag::from_parts(self.nodes.len(), self.edges.clone(), self.attrs.clone(), label)
    }
}

/// Edge list as a set, for order-insensitive comparisons.
pub fn edge_set(edges: &[(usize, usize)]) -> HashSet<(usize, usize)> {
    edges.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unattributed(n: usize, edges: &[(usize, usize)]) -> Dag {
        Dag::from_parts(n, edges.to_vec(), vec![vec![0]; n], None)
    }

    fn diamond() -> Dag {
        Dag::new(
            4,
            vec![(0, 1), (0, 2), (1, 3), (2, 3)],
            vec![vec![0], vec![1], vec![0], vec![1]],
            Some(2.5),
        )
        .unwrap()
    }

    #[test]
    fn validate_examples() {
        assert!(validate_dag(&unattributed(2, &[(0, 1)])).is_ok());
        assert!(matches!(
            validate_dag(&unattributed(2, &[(0, 1), (1, 0)])),
            Err(DagError::CycleDetected(_))
        ));
        assert_eq!(
            validate_dag(&unattributed(1, &[(0, 1)])),
            Err(DagError::EdgeOutOfRange(0, 1, 1))
        );
    }

    #[test]
    fn cycle_witness_is_a_cycle() {
        let d = unattributed(5, &[(0, 1), (1, 2), (2, 3), (3, 1), (3, 4)]);
        let Err(DagError::CycleDetected(cycle)) = validate_dag(&d) else {
            panic!("expected cycle");
        };
        let edges = edge_set(d.edges());
        for i in 0..cycle.len() {
            let next = cycle[(i + 1) % cycle.len()];
            assert!(edges.contains(&(cycle[i], next)), "{cycle:?}");
        }
        assert_eq!(cycle.len(), 3);
    }

    #[test]
    fn self_loop_and_duplicates() {
        assert_eq!(
            validate_dag(&unattributed(2, &[(1, 1)])),
            Err(DagError::CycleDetected(vec![1]))
        );
        assert_eq!(
            validate_dag(&unattributed(2, &[(0, 1), (0, 1)])),
            Err(DagError::DuplicateEdge(0, 1))
        );
    }

    #[test]
    fn attribute_shape_checks() {
        let d = Dag::from_parts(2, vec![(0, 1)], vec![vec![0], vec![0, 1]], None);
        assert!(matches!(
            validate_dag(&d),
            Err(DagError::AttrChannelMismatch { node: 1, .. })
        ));
        let d = Dag::from_parts(2, vec![(0, 1)], vec![vec![0]], None);
        assert!(matches!(validate_dag(&d), Err(DagError::AttrChannelMismatch { .. })));
        let d = diamond();
        assert!(d.check_cardinalities(&[2]).is_ok());
        assert!(d.check_cardinalities(&[1]).is_err());
    }

    #[test]
    fn partition_examples() {
        let p = layer_partition(&unattributed(3, &[(0, 2), (1, 2)])).unwrap();
        assert_eq!(p.layers, vec![vec![0, 1], vec![2]]);
        assert_eq!(p.edge_slices, vec![vec![(0, 2), (1, 2)]]);

        let p = layer_partition(&diamond()).unwrap();
        assert_eq!(p.layers, vec![vec![0], vec![1, 2], vec![3]]);

        let p = layer_partition(&unattributed(3, &[(0, 1), (1, 2), (0, 2)])).unwrap();
        assert_eq!(p.layers, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(edge_set(&p.edge_slices[1]), edge_set(&[(1, 2), (0, 2)]));
        assert!(p.edge_slices[0] == vec![(0, 1)]);
    }

    #[test]
    fn reconstruct_examples() {
        let d = diamond();
        assert_eq!(reconstruct(&layer_partition(&d).unwrap()).unwrap(), d);

        let sources = LayerPartition {
            layers: vec![vec![0, 1, 2]],
            edge_slices: vec![],
            attrs: vec![vec![1]; 3],
            label: None,
        };
        let d = reconstruct(&sources).unwrap();
        assert_eq!(d.num_nodes(), 3);
        assert_eq!(d.num_edges(), 0);

        let mut bad = layer_partition(&diamond()).unwrap();
        bad.edge_slices[1].push((3, 1));
        assert!(matches!(reconstruct(&bad), Err(DagError::InvalidPartition(_))));
    }

    #[test]
    fn slice_examples() {
        let p = layer_partition(&diamond()).unwrap();
        let s = bipartite_slice(&p, 0).unwrap();
        assert!(s.context_nodes.is_empty() && s.cross_edges.is_empty());
        assert_eq!(s.new_nodes, vec![0]);
        let s = bipartite_slice(&p, 1).unwrap();
        assert_eq!(s.context_nodes, vec![0]);
        assert_eq!(s.new_nodes, vec![1, 2]);
        assert_eq!(edge_set(&s.cross_edges), edge_set(&[(0, 1), (0, 2)]));
        assert_eq!(
            bipartite_slice(&p, 3),
            Err(DagError::IndexOutOfRange { index: 3, layers: 3 })
        );
    }

    #[test]
    fn stats_examples() {
        let s = dag_stats(&diamond()).unwrap();
        assert_eq!(s.num_layers, 3);
        assert_eq!(s.layer_sizes, vec![1, 2, 1]);
        assert_eq!(s.in_degrees, vec![0, 1, 1, 2]);
        assert_eq!(s.num_edges, 4);

        let s = dag_stats(&unattributed(1, &[])).unwrap();
        assert_eq!((s.num_layers, s.layer_sizes), (1, vec![1]));

        let s = dag_stats(&Dag::empty()).unwrap();
        assert_eq!((s.num_layers, s.layer_sizes), (0, vec![]));
    }

    #[test]
    fn predecessor_property() {
        assert!(check_predecessor_property(&diamond()).is_ok());
    }

    #[test]
    fn prefix_renumbers_in_layer_order() {
        let d = Dag::new(
            4,
            vec![(3, 0), (3, 1), (0, 2), (1, 2)],
            vec![vec![0]; 4],
            None,
        )
        .unwrap();
        let p = layer_partition(&d).unwrap();
        let pre = Prefix::from_partition(&p, 2);
        assert_eq!(pre.nodes, vec![3, 0, 1]);
        assert_eq!(pre.depth, vec![0, 1, 1]);
        assert_eq!(pre.edges, vec![(0, 1), (0, 2)]);
        assert_eq!(pre.last_layer_start, 1);
        let full = Prefix::from_partition(&p, 3);
        assert_eq!(full.edges.len(), 4);
    }
}
