//! Undirected communication topologies and their matrix representations.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

/// Fixed undirected graph over nodes `1..=N`.
///
/// Nodes are 1-based in the construction API (matching scenario files) and
/// 0-based everywhere else. Each edge is stored once with the lower-index
/// node as its tail, which fixes the incidence-matrix orientation; any fixed
/// orientation satisfies `L = D * D^T`.
///
/// Graphs are immutable after construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("graph needs at least one node")]
    NoNodes,
    #[error("node {node} out of range 1..={node_count}")]
    NodeOutOfRange { node: usize, node_count: usize },
    #[error("self-loop on node {node}")]
    SelfLoop { node: usize },
    #[error("duplicate edge ({tail}, {head})")]
    DuplicateEdge { tail: usize, head: usize },
}

impl Graph {
    /// Builds a graph from 1-based unordered node pairs.
    ///
    /// Rejects out-of-range indices, self-loops, and duplicate edges
    /// (including the same pair listed in the opposite order).
    pub fn new(node_count: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::NoNodes);
        }
        let mut canonical: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(i, j) in edges {
            for node in [i, j] {
                if node == 0 || node > node_count {
                    return Err(GraphError::NodeOutOfRange { node, node_count });
                }
            }
            if i == j {
                return Err(GraphError::SelfLoop { node: i });
            }
            let edge = (i.min(j) - 1, i.max(j) - 1);
            if canonical.contains(&edge) {
                return Err(GraphError::DuplicateEdge {
                    tail: edge.0 + 1,
                    head: edge.1 + 1,
                });
            }
            canonical.push(edge);
        }
        canonical.sort_unstable();
        let mut neighbors = vec![Vec::new(); node_count];
        for &(a, b) in &canonical {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            node_count,
            edges: canonical,
            neighbors,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Canonical 0-based edge list, ascending, tail < head.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// 0-based neighbors of `node`, ascending.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    /// Graph Laplacian: degrees on the diagonal, `-1` per edge off it.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.node_count;
        let mut l = DMatrix::zeros(n, n);
        for &(a, b) in &self.edges {
            l[(a, b)] = -1.0;
            l[(b, a)] = -1.0;
            l[(a, a)] += 1.0;
            l[(b, b)] += 1.0;
        }
        l
    }

    /// Node-by-edge incidence matrix: column `k` has `-1` at edge `k`'s tail
    /// and `+1` at its head. Satisfies `laplacian() = incidence() * incidence()^T`
    /// exactly (all entries are small integers).
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.node_count, self.edges.len());
        for (k, &(tail, head)) in self.edges.iter().enumerate() {
            d[(tail, k)] = -1.0;
            d[(head, k)] = 1.0;
        }
        d
    }

    /// True iff every node is reachable from node 1 (breadth-first search).
    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.node_count];
        let mut queue = VecDeque::new();
        seen[0] = true;
        queue.push_back(0);
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &self.neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.node_count
    }
}

/// The two four-agent topologies used by the built-in scenarios.
pub fn ring4() -> Graph {
    Graph::new(4, &[(1, 2), (2, 3), (3, 4), (4, 1)]).expect("static topology")
}

pub fn path4() -> Graph {
    Graph::new(4, &[(1, 2), (2, 3), (3, 4)]).expect("static topology")
}
