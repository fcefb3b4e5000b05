//! Road-network graphs, the row-normalized propagation operator and K-hop
//! propagation with hop-wise concatenation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// A directed, weighted edge list over `n_nodes` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    n_nodes: usize,
    edges: Vec<Edge>,
}

impl GraphSpec {
    pub fn new(n_nodes: usize, edges: Vec<Edge>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Validation("graph must have at least one node".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &edges {
            if e.src >= n_nodes || e.dst >= n_nodes {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) references a node outside 0..{n_nodes}",
                    e.src, e.dst
                )));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) has invalid weight {}",
                    e.src, e.dst, e.weight
                )));
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(Error::Validation(format!(
                    "duplicate edge ({}, {})",
                    e.src, e.dst
                )));
            }
        }
        Ok(Self { n_nodes, edges })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn dense_adjacency(&self) -> Tensor {
        let n = self.n_nodes;
        let mut a = Tensor::zeros(&[n, n]);
        for e in &self.edges {
            a.set(&[e.src, e.dst], e.weight);
        }
        a
    }

    /// Hop distance from `source` along edges in either direction
    /// (`None` when unreachable).
    pub fn hop_distances(&self, source: usize) -> Vec<Option<usize>> {
        let n = self.n_nodes;
        let mut nbrs = vec![Vec::new(); n];
        for e in &self.edges {
            if e.weight > 0.0 && e.src != e.dst {
                nbrs[e.src].push(e.dst);
                nbrs[e.dst].push(e.src);
            }
        }
        let mut dist = vec![None; n];
        dist[source] = Some(0);
        let mut queue = std::collections::VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for &v in &nbrs[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Row-normalized operator `D⁻¹(A [+ I])`; entries in `[0, 1]`, every row sums
/// to 1 or is entirely zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationOperator {
    matrix: Tensor,
}

impl PropagationOperator {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn n_nodes(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Wraps a caller-built matrix after checking it is a valid operator.
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        let s = matrix.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::dim("PropagationOperator", s, s));
        }
        let n = s[0];
        for row in matrix.data().chunks(n) {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation("operator entries must lie in [0, 1]".into()));
            }
            let total: f64 = row.iter().sum();
            if total != 0.0 && (total - 1.0).abs() > 1e-12 {
                return Err(Error::Validation(format!(
                    "operator row sums to {total}, expected 0 or 1"
                )));
            }
        }
        Ok(Self { matrix })
    }
}

pub fn normalize_adjacency(g: &GraphSpec, add_self_loops: bool) -> Result<PropagationOperator> {
    let n = g.n_nodes();
    let mut a = vec![0.0; n * n];
    for e in g.edges() {
        if e.weight < 0.0 {
            return Err(Error::Validation(format!("negative weight {}", e.weight)));
        }
        a[e.src * n + e.dst] += e.weight;
    }
    if add_self_loops {
        for i in 0..n {
            a[i * n + i] += 1.0;
        }
    }
    for row in a.chunks_mut(n) {
        let deg: f64 = row.iter().sum();
        if deg > 0.0 {
            for v in row.iter_mut() {
                *v /= deg;
            }
        }
    }
    Ok(PropagationOperator {
        matrix: Tensor::new(vec![n, n], a)?,
    })
}

fn check_propagate(shape: &[usize], op: &PropagationOperator) -> Result<()> {
    if shape.len() != 3 || shape[1] != op.n_nodes() {
        return Err(Error::dim("propagate", shape, op.matrix.shape()));
    }
    Ok(())
}

/// `[x ∥ L̃x ∥ … ∥ L̃ᴷx]` along the feature axis of `x: [T, N, D]`, with `L̃`
/// applied per timestep over the node axis.
pub fn propagate(x: &Tensor, op: &PropagationOperator, k_hops: usize) -> Result<Tensor> {
    check_propagate(x.shape(), op)?;
    let mut hops = vec![x.clone()];
    for _ in 0..k_hops {
        let next = tensor::matmul(&op.matrix, hops.last().unwrap())?;
        hops.push(next);
    }
    let refs: Vec<&Tensor> = hops.iter().collect();
    tensor::concat_last_axis(&refs)
}

/// Differentiable version of [`propagate`] recorded on `g`.
pub fn propagate_var(g: &mut Graph, x: Var, op: &PropagationOperator, k_hops: usize) -> Result<Var> {
    check_propagate(g.shape(x), op)?;
    let l = g.input(op.matrix.clone());
    let mut hops = vec![x];
    for _ in 0..k_hops {
        let next = g.matmul(l, *hops.last().unwrap())?;
        hops.push(next);
    }
    if hops.len() == 1 {
        return Ok(x);
    }
    g.concat(&hops)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge(src: usize, dst: usize, weight: f64) -> Edge {
        Edge { src, dst, weight }
    }

    #[test]
    fn self_loops_only_gives_identity() {
        let g = GraphSpec::new(3, (0..3).map(|i| edge(i, i, 1.0)).collect()).unwrap();
        let op = normalize_adjacency(&g, false).unwrap();
        assert_eq!(op.matrix(), &Tensor::eye(3));
        let g = GraphSpec::new(3, vec![]).unwrap();
        assert_eq!(normalize_adjacency(&g, true).unwrap().matrix(), &Tensor::eye(3));
    }

    #[test]
    fn swap_and_weighted_rows() {
        let g = GraphSpec::new(2, vec![edge(0, 1, 1.0), edge(1, 0, 1.0)]).unwrap();
        let op = normalize_adjacency(&g, false).unwrap();
        assert_eq!(op.matrix().data(), &[0., 1., 1., 0.]);

        let g = GraphSpec::new(3, vec![edge(0, 1, 2.0), edge(0, 2, 1.0), edge(1, 2, 1.0)]).unwrap();
        let op = normalize_adjacency(&g, false).unwrap();
        assert_eq!(&op.matrix().data()[..3], &[0.0, 2.0 / 3.0, 1.0 / 3.0]);
        // node 2 has no out-edges: zero row
        assert_eq!(&op.matrix().data()[6..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn validation_errors() {
        assert!(GraphSpec::new(2, vec![edge(0, 1, -1.0)]).is_err());
        assert!(GraphSpec::new(2, vec![edge(0, 2, 1.0)]).is_err());
        assert!(GraphSpec::new(2, vec![edge(0, 1, 1.0), edge(0, 1, 2.0)]).is_err());
    }

    #[test]
    fn zero_hop_is_identity_and_isolated_hops_vanish() {
        let x = Tensor::from_fn(&[2, 3, 2], |i| i as f64 + 1.0);
        let g = GraphSpec::new(3, vec![]).unwrap();
        let op = normalize_adjacency(&g, false).unwrap();
        assert_eq!(propagate(&x, &op, 0).unwrap(), x);
        let y = propagate(&x, &op, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 6]);
        assert_eq!(tensor::slice_last_axis(&y, 0, 2).unwrap(), x);
        assert!(tensor::slice_last_axis(&y, 2, 4).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = Tensor::zeros(&[2, 4, 2]);
        assert!(matches!(propagate(&bad, &op, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hop_distances_bfs() {
        let g = GraphSpec::new(4, vec![edge(0, 1, 1.0), edge(2, 1, 1.0)]).unwrap();
        assert_eq!(g.hop_distances(0), vec![Some(0), Some(1), Some(2), None]);
    }
}
