//! Directed multigraph storage for transaction networks.
//!
//! Nodes are accounts, edges are individual transactions; parallel edges and
//! self-loops are allowed. Edge ids are dense and equal to insertion order.
//! Graphs are immutable after construction: removal builds a new graph and
//! returns an old-to-new edge id map.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub type NodeId = u32;
pub type EdgeId = u32;

/// Binary transaction label: positive marks a laundering edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EdgeLabel {
    Negative,
    Positive,
}

impl EdgeLabel {
    pub fn is_positive(self) -> bool {
        matches!(self, EdgeLabel::Positive)
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            EdgeLabel::Positive
        } else {
            EdgeLabel::Negative
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

/// Hop expansion rule for ego networks. Transaction cycles traverse mixed
/// directions, so the default treats every edge as traversable both ways.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Reachability {
    Undirected,
    DirectedOut,
}

#[derive(Debug, Clone)]
pub struct DirectedMultigraph {
    node_count: usize,
    edges: Vec<Edge>,
    node_features: Matrix,
    edge_features: Matrix,
    edge_labels: Vec<EdgeLabel>,
    // (neighbor, edge id) per node, ascending edge id.
    in_index: Vec<Vec<(NodeId, EdgeId)>>,
    out_index: Vec<Vec<(NodeId, EdgeId)>>,
}

impl DirectedMultigraph {
    pub fn build(
        node_count: usize,
        edge_list: Vec<(NodeId, NodeId)>,
        node_features: Matrix,
        edge_features: Matrix,
        edge_labels: Vec<EdgeLabel>,
    ) -> Result<Self> {
        for (i, &(s, d)) in edge_list.iter().enumerate() {
            if (s as usize) >= node_count {
                return Err(Error::NodeOutOfRange { edge: i, node: s, nodes: node_count });
            }
            if (d as usize) >= node_count {
                return Err(Error::NodeOutOfRange { edge: i, node: d, nodes: node_count });
            }
        }
        if node_features.rows() != node_count {
            return Err(Error::Shape(format!(
                "node feature rows {} != node count {}",
                node_features.rows(),
                node_count
            )));
        }
        if edge_features.rows() != edge_list.len() {
            return Err(Error::Shape(format!(
                "edge feature rows {} != edge count {}",
                edge_features.rows(),
                edge_list.len()
            )));
        }
        if edge_labels.len() != edge_list.len() {
            return Err(Error::Shape(format!(
                "label count {} != edge count {}",
                edge_labels.len(),
                edge_list.len()
            )));
        }

        let mut in_index = vec![Vec::new(); node_count];
        let mut out_index = vec![Vec::new(); node_count];
        let edges: Vec<Edge> =
            edge_list.iter().map(|&(src, dst)| Edge { src, dst }).collect();
        // Pushing in edge order keeps every adjacency list ascending by edge id.
        for (id, e) in edges.iter().enumerate() {
            out_index[e.src as usize].push((e.dst, id as EdgeId));
            in_index[e.dst as usize].push((e.src, id as EdgeId));
        }

        Ok(DirectedMultigraph {
            node_count,
            edges,
            node_features,
            edge_features,
            edge_labels,
            in_index,
            out_index,
        })
    }

    /// Graph with the same structure but zero-width feature matrices.
    pub fn from_edges(node_count: usize, edge_list: Vec<(NodeId, NodeId)>) -> Result<Self> {
        let n_edges = edge_list.len();
        DirectedMultigraph::build(
            node_count,
            edge_list,
            Matrix::zeros(node_count, 0),
            Matrix::zeros(n_edges, 0),
            vec![EdgeLabel::Negative; n_edges],
        )
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> Result<Edge> {
        self.edges
            .get(id as usize)
            .copied()
            .ok_or(Error::UnknownEdge(id))
    }

    pub fn node_features(&self) -> &Matrix {
        &self.node_features
    }

    pub fn edge_features(&self) -> &Matrix {
        &self.edge_features
    }

    pub fn edge_labels(&self) -> &[EdgeLabel] {
        &self.edge_labels
    }

    pub fn with_node_features(mut self, features: Matrix) -> Result<Self> {
        if features.rows() != self.node_count {
            return Err(Error::Shape(format!(
                "node feature rows {} != node count {}",
                features.rows(),
                self.node_count
            )));
        }
        self.node_features = features;
        Ok(self)
    }

    pub fn with_edge_features(mut self, features: Matrix) -> Result<Self> {
        if features.rows() != self.edges.len() {
            return Err(Error::Shape(format!(
                "edge feature rows {} != edge count {}",
                features.rows(),
                self.edges.len()
            )));
        }
        self.edge_features = features;
        Ok(self)
    }

    pub fn with_edge_labels(mut self, labels: Vec<EdgeLabel>) -> Result<Self> {
        if labels.len() != self.edges.len() {
            return Err(Error::Shape(format!(
                "label count {} != edge count {}",
                labels.len(),
                self.edges.len()
            )));
        }
        self.edge_labels = labels;
        Ok(self)
    }

    /// Exact multiset of (neighbor, edge id), ascending edge id.
    pub fn neighbors(&self, v: NodeId, direction: Direction) -> Result<&[(NodeId, EdgeId)]> {
        let idx = v as usize;
        if idx >= self.node_count {
            return Err(Error::IndexOutOfRange { index: idx, len: self.node_count });
        }
        Ok(match direction {
            Direction::In => &self.in_index[idx],
            Direction::Out => &self.out_index[idx],
        })
    }

    pub fn in_degree(&self, v: NodeId) -> usize {
        self.in_index[v as usize].len()
    }

    pub fn out_degree(&self, v: NodeId) -> usize {
        self.out_index[v as usize].len()
    }

    /// Induced subgraph on the nodes within `k` hops of `center`.
    pub fn ego_network(
        &self,
        center: NodeId,
        k: usize,
        reachability: Reachability,
    ) -> Result<EgoNetwork> {
        let c = center as usize;
        if c >= self.node_count {
            return Err(Error::IndexOutOfRange { index: c, len: self.node_count });
        }

        let mut dist = vec![usize::MAX; self.node_count];
        dist[c] = 0;
        let mut queue = VecDeque::new();
        queue.push_back(center);
        while let Some(v) = queue.pop_front() {
            let d = dist[v as usize];
            if d == k {
                continue;
            }
            let mut visit = |u: NodeId| {
                if dist[u as usize] == usize::MAX {
                    dist[u as usize] = d + 1;
                    queue.push_back(u);
                }
            };
            for &(u, _) in &self.out_index[v as usize] {
                visit(u);
            }
            if reachability == Reachability::Undirected {
                for &(u, _) in &self.in_index[v as usize] {
                    visit(u);
                }
            }
        }

        // Local ids in ascending original node id order.
        let kept: Vec<usize> =
            (0..self.node_count).filter(|&v| dist[v] != usize::MAX).collect();
        let mut local = vec![u32::MAX; self.node_count];
        for (li, &v) in kept.iter().enumerate() {
            local[v] = li as u32;
        }

        let mut sub_edges = Vec::new();
        let mut kept_edge_rows = Vec::new();
        let mut labels = Vec::new();
        for (id, e) in self.edges.iter().enumerate() {
            let (ls, ld) = (local[e.src as usize], local[e.dst as usize]);
            if ls != u32::MAX && ld != u32::MAX {
                sub_edges.push((ls, ld));
                kept_edge_rows.push(id);
                labels.push(self.edge_labels[id]);
            }
        }

        let node_features = self.node_features.select_rows(&kept);
        let edge_features = self.edge_features.select_rows(&kept_edge_rows);
        let subgraph = DirectedMultigraph::build(
            kept.len(),
            sub_edges,
            node_features,
            edge_features,
            labels,
        )?;

        let center_local = local[c];
        let mut center_mark = vec![false; kept.len()];
        center_mark[center_local as usize] = true;

        Ok(EgoNetwork {
            subgraph,
            center_local_index: center_local,
            hop_radius: k,
            center_mark,
        })
    }

    /// New graph without the listed edges. Node set is unchanged; surviving
    /// edges keep their features/labels and get fresh dense ids. The returned
    /// map gives, for every old edge id, its new id (None when dropped).
    pub fn remove_edges(&self, edge_ids: &[EdgeId]) -> Result<(Self, Vec<Option<EdgeId>>)> {
        let mut drop = vec![false; self.edges.len()];
        for &id in edge_ids {
            let slot = drop
                .get_mut(id as usize)
                .ok_or(Error::UnknownEdge(id))?;
            *slot = true;
        }

        let mut id_map = vec![None; self.edges.len()];
        let mut kept_rows = Vec::new();
        let mut edge_list = Vec::new();
        let mut labels = Vec::new();
        for (id, e) in self.edges.iter().enumerate() {
            if drop[id] {
                continue;
            }
            id_map[id] = Some(kept_rows.len() as EdgeId);
            kept_rows.push(id);
            edge_list.push((e.src, e.dst));
            labels.push(self.edge_labels[id]);
        }

        let edge_features = self.edge_features.select_rows(&kept_rows);
        let graph = DirectedMultigraph::build(
            self.node_count,
            edge_list,
            self.node_features.clone(),
            edge_features,
            labels,
        )?;
        Ok((graph, id_map))
    }

    /// Connected components of the symmetrized simple graph. Component ids
    /// are dense in [0, M) and assigned in order of the lowest node id.
    pub fn connected_components(&self) -> (Vec<u32>, usize) {
        let mut comp = vec![u32::MAX; self.node_count];
        let mut count = 0u32;
        for start in 0..self.node_count {
            if comp[start] != u32::MAX {
                continue;
            }
            comp[start] = count;
            let mut queue = VecDeque::new();
            queue.push_back(start as NodeId);
            while let Some(v) = queue.pop_front() {
                for &(u, _) in self.out_index[v as usize]
                    .iter()
                    .chain(self.in_index[v as usize].iter())
                {
                    if comp[u as usize] == u32::MAX {
                        comp[u as usize] = count;
                        queue.push_back(u);
                    }
                }
            }
            count += 1;
        }
        (comp, count as usize)
    }
}

/// Induced k-hop neighborhood around a flagged center node.
#[derive(Debug, Clone)]
pub struct EgoNetwork {
    pub subgraph: DirectedMultigraph,
    pub center_local_index: NodeId,
    pub hop_radius: usize,
    pub center_mark: Vec<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(u32, u32)]) -> DirectedMultigraph {
        DirectedMultigraph::from_edges(n, edges.to_vec()).unwrap()
    }

    #[test]
    fn empty_graph() {
        let g = graph(0, &[]);
        assert_eq!(g.node_count(), 0);
        assert_eq!(g.edge_count(), 0);
        let (_, m) = g.connected_components();
        assert_eq!(m, 0);
    }

    #[test]
    fn parallel_edges_are_a_multiset() {
        let g = graph(2, &[(0, 1), (0, 1)]);
        assert_eq!(g.edge_count(), 2);
        let nbrs = g.neighbors(1, Direction::In).unwrap();
        assert_eq!(nbrs, &[(0, 0), (0, 1)]);
        assert!(g.neighbors(1, Direction::Out).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_edge_is_rejected() {
        let err = DirectedMultigraph::from_edges(2, vec![(0, 1), (0, 5)]).unwrap_err();
        match err {
            Error::NodeOutOfRange { edge, node, nodes } => {
                assert_eq!((edge, node, nodes), (1, 5, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let err = DirectedMultigraph::build(
            2,
            vec![(0, 1)],
            Matrix::zeros(3, 1),
            Matrix::zeros(1, 1),
            vec![EdgeLabel::Negative],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn neighbor_index_out_of_range() {
        let g = graph(2, &[(0, 1)]);
        assert!(g.neighbors(7, Direction::In).is_err());
    }

    #[test]
    fn degree_sums_match_edge_count() {
        // Seeded pseudo-random edges over 50 nodes.
        let mut edges = Vec::new();
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..1000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let s = ((state >> 33) % 50) as u32;
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let d = ((state >> 33) % 50) as u32;
            edges.push((s, d));
        }
        let g = graph(50, &edges);
        let in_sum: usize = (0..50).map(|v| g.in_degree(v)).sum();
        let out_sum: usize = (0..50).map(|v| g.out_degree(v)).sum();
        assert_eq!(in_sum, 1000);
        assert_eq!(out_sum, 1000);

        // Multiset inverse of the edge list: count (src, dst) pairs both ways.
        let mut from_index = std::collections::HashMap::new();
        for v in 0..50u32 {
            for &(u, _) in g.neighbors(v, Direction::In).unwrap() {
                *from_index.entry((u, v)).or_insert(0usize) += 1;
            }
        }
        let mut from_edges = std::collections::HashMap::new();
        for e in g.edges() {
            *from_edges.entry((e.src, e.dst)).or_insert(0usize) += 1;
        }
        assert_eq!(from_index, from_edges);
    }

    #[test]
    fn ego_radius_zero_is_center_only() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let ego = g.ego_network(2, 0, Reachability::Undirected).unwrap();
        assert_eq!(ego.subgraph.node_count(), 1);
        assert_eq!(ego.subgraph.edge_count(), 0);
        assert_eq!(ego.center_local_index, 0);
        assert_eq!(ego.center_mark, vec![true]);
    }

    #[test]
    fn ego_star_one_hop() {
        // Center 0 with 5 leaves, mixed directions.
        let g = graph(6, &[(0, 1), (0, 2), (3, 0), (4, 0), (0, 5)]);
        let ego = g.ego_network(0, 1, Reachability::Undirected).unwrap();
        assert_eq!(ego.subgraph.node_count(), 6);
        assert_eq!(ego.subgraph.edge_count(), 5);
        assert_eq!(ego.center_mark.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn ego_directed_only_restricts_reach() {
        let g = graph(3, &[(1, 0), (0, 2)]);
        let undirected = g.ego_network(0, 1, Reachability::Undirected).unwrap();
        assert_eq!(undirected.subgraph.node_count(), 3);
        let directed = g.ego_network(0, 1, Reachability::DirectedOut).unwrap();
        assert_eq!(directed.subgraph.node_count(), 2);
    }

    #[test]
    fn ego_c6_versus_two_triangles() {
        let c6 = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]);
        let two_c3 = graph(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]);
        for v in 0..6 {
            assert_eq!(
                c6.ego_network(v, 3, Reachability::Undirected).unwrap().subgraph.node_count(),
                6
            );
            assert_eq!(
                two_c3.ego_network(v, 3, Reachability::Undirected).unwrap().subgraph.node_count(),
                3
            );
        }
    }

    #[test]
    fn ego_node_set_monotone_in_radius() {
        let g = graph(8, &[(0, 1), (1, 2), (2, 3), (3, 4), (5, 4), (6, 5), (7, 6)]);
        let mut prev = 0;
        for k in 0..6 {
            let n = g.ego_network(0, k, Reachability::Undirected).unwrap().subgraph.node_count();
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn remove_nothing_is_identity() {
        let g = graph(3, &[(0, 1), (1, 2), (2, 0)]);
        let (h, map) = g.remove_edges(&[]).unwrap();
        assert_eq!(h.edge_count(), 3);
        assert_eq!(h.edges(), g.edges());
        assert_eq!(map, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn remove_all_keeps_nodes() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let (h, map) = g.remove_edges(&[0, 1]).unwrap();
        assert_eq!(h.node_count(), 3);
        assert_eq!(h.edge_count(), 0);
        assert_eq!(map, vec![None, None]);
    }

    #[test]
    fn remove_unknown_edge_errors() {
        let g = graph(2, &[(0, 1)]);
        assert!(matches!(g.remove_edges(&[4]).unwrap_err(), Error::UnknownEdge(4)));
    }

    #[test]
    fn removing_bridge_splits_component() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let (_, before) = g.connected_components();
        assert_eq!(before, 1);
        let (h, _) = g.remove_edges(&[1]).unwrap();
        let (_, after) = h.connected_components();
        assert_eq!(after, 2);
    }

    #[test]
    fn removed_edge_ids_never_reappear() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (1, 3)]);
        let (h, map) = g.remove_edges(&[1, 3]).unwrap();
        // Surviving edges preserve order: old 0,2,4 -> new 0,1,2.
        assert_eq!(map, vec![Some(0), None, Some(1), None, Some(2)]);
        assert_eq!(h.edge(1).unwrap(), Edge { src: 2, dst: 3 });
        for v in 0..4 {
            for &(_, e) in h.neighbors(v, Direction::In).unwrap() {
                assert!((e as usize) < h.edge_count());
            }
        }
    }

    #[test]
    fn components_no_edges() {
        let g = graph(5, &[]);
        let (ids, m) = g.connected_components();
        assert_eq!(m, 5);
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn directed_cycle_is_one_component() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        let (_, m) = g.connected_components();
        assert_eq!(m, 1);
    }

    #[test]
    fn components_invariant_under_reversal() {
        let edges = [(0u32, 1u32), (2, 1), (3, 4), (5, 5)];
        let g = graph(6, &edges);
        let reversed: Vec<(u32, u32)> = edges.iter().map(|&(s, d)| (d, s)).collect();
        let h = graph(6, &reversed);
        assert_eq!(g.connected_components(), h.connected_components());
    }

    #[test]
    fn self_loop_counts_both_directions() {
        let g = graph(2, &[(0, 0)]);
        assert_eq!(g.in_degree(0), 1);
        assert_eq!(g.out_degree(0), 1);
        let (_, m) = g.connected_components();
        assert_eq!(m, 2);
    }
}
