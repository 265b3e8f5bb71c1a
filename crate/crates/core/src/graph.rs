//! Weighted undirected interaction graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An undirected edge `{i, j}` with positive weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected graph on agents `0..n`. Absent pairs have weight zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n_agents: usize,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl Graph {
    /// Builds a graph on `n_agents` agents. Edges are normalized to `i < j`.
    pub fn new(n_agents: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::InvalidParameter("graph needs at least one agent".into()));
        }
        let mut adjacency = vec![Vec::new(); n_agents];
        let mut normalized = Vec::with_capacity(edges.len());
        for &(a, b, weight) in edges {
            if a == b {
                return Err(Error::InvalidParameter(format!("self-loop at agent {a}")));
            }
            let (i, j) = (a.min(b), a.max(b));
            if j >= n_agents {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    len: n_agents,
                });
            }
            if !(weight.is_finite() && weight > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "edge {{{i}, {j}}} has non-positive weight {weight}"
                )));
            }
            if adjacency[i].iter().any(|&(k, _)| k == j) {
                return Err(Error::InvalidParameter(format!("duplicate edge {{{i}, {j}}}")));
            }
            adjacency[i].push((j, weight));
            adjacency[j].push((i, weight));
            normalized.push(Edge { i, j, weight });
        }
        for row in &mut adjacency {
            row.sort_by_key(|&(k, _)| k);
        }
        Ok(Self {
            n_agents,
            edges: normalized,
            adjacency,
        })
    }

    /// Builds a graph whose agent count is one past the largest index used.
    pub fn from_edge_list(edges: &[(usize, usize, f64)]) -> Result<Self> {
        let n = edges
            .iter()
            .map(|&(i, j, _)| i.max(j) + 1)
            .max()
            .ok_or_else(|| Error::InvalidParameter("empty edge list".into()))?;
        Self::new(n, edges)
    }

    pub fn complete(n: usize) -> Result<Self> {
        require_agents("complete", n, 2)?;
        let edges: Vec<_> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j, 1.0)))
            .collect();
        Self::new(n, &edges)
    }

    pub fn ring(n: usize) -> Result<Self> {
        require_agents("ring", n, 3)?;
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect();
        Self::new(n, &edges)
    }

    pub fn path(n: usize) -> Result<Self> {
        require_agents("path", n, 2)?;
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
        Self::new(n, &edges)
    }

    /// Agent 0 is the hub.
    pub fn star(n: usize) -> Result<Self> {
        require_agents("star", n, 2)?;
        let edges: Vec<_> = (1..n).map(|j| (0, j, 1.0)).collect();
        Self::new(n, &edges)
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbors of `i` with their weights, sorted by index.
    pub fn neighbors(&self, i: usize) -> Result<&[(usize, f64)]> {
        self.adjacency
            .get(i)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                index: i,
                len: self.n_agents,
            })
    }

    pub(crate) fn adjacency(&self) -> &[Vec<(usize, f64)>] {
        &self.adjacency
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_agents];
        let mut stack = vec![0];
        seen[0] = true;
        let mut reached = 1;
        while let Some(i) = stack.pop() {
            for &(j, _) in &self.adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    reached += 1;
                    stack.push(j);
                }
            }
        }
        reached == self.n_agents
    }

    pub(crate) fn ensure_connected(&self) -> Result<()> {
        if self.is_connected() {
            Ok(())
        } else {
            Err(Error::DisconnectedGraph)
        }
    }
}

fn require_agents(kind: &str, n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::InvalidParameter(format!(
            "{kind} graph needs at least {min} agents, got {n}"
        )));
    }
    Ok(())
}
