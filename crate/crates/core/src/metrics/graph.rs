//! Overlap graphs and Erdős–Rényi connectivity.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Undirected simple graph as adjacency lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    pub adj: Vec<Vec<usize>>,
}

impl Graph {
    pub fn empty(n: usize) -> Self {
        Graph { adj: vec![Vec::new(); n] }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut g = Graph::empty(n);
        for &(a, b) in edges {
            g.adj[a].push(b);
            g.adj[b].push(a);
        }
        g
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn bfs(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        dist[src] = Some(0);
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            let d = dist[u].unwrap() + 1;
            for &v in &self.adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d);
                    q.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.is_empty() || self.bfs(0).iter().all(Option::is_some)
    }

    /// Longest shortest path; `None` when disconnected.
    pub fn diameter(&self) -> Option<usize> {
        (0..self.len())
            .into_par_iter()
            .map(|s| self.bfs(s).into_iter().try_fold(0, |m, d| d.map(|d| m.max(d))))
            .try_reduce(|| 0, |a, b| Some(a.max(b)))
    }
}

/// Edge between every pair of rows within distance `2·radius`.
pub fn overlap_graph(points: &Tensor, radius: f64) -> Result<Graph> {
    if points.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "overlap_graph",
            lhs: points.shape().to_vec(),
            rhs: vec![],
        });
    }
    if !(radius >= 0.0) {
        return Err(Error::config(format!("radius {radius} must be non-negative")));
    }
    let n = points.rows();
    let lim = (2.0 * radius) * (2.0 * radius);
    let mut g = Graph::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d <= lim {
                g.adj[i].push(j);
                g.adj[j].push(i);
            }
        }
    }
    Ok(g)
}

pub fn erdos_renyi(n: usize, p: f64, rng: &mut impl Rng) -> Graph {
    let mut g = Graph::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                g.adj[i].push(j);
                g.adj[j].push(i);
            }
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErParams {
    pub n: usize,
    /// Edge probability is `c · ln n / n`.
    pub c: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErCheck {
    pub p: f64,
    pub connected_rate: f64,
    /// Diameters of the connected samples.
    pub mean_diameter: Option<f64>,
    pub max_diameter: Option<usize>,
}

pub fn er_connectivity(params: &ErParams) -> Result<ErCheck> {
    if params.n < 2 || params.samples == 0 {
        return Err(Error::config("er check needs n >= 2 and at least one sample"));
    }
    let n = params.n as f64;
    let p = (params.c * n.ln() / n).clamp(0.0, 1.0);
    let diam: Vec<Option<usize>> = (0..params.samples)
        .into_par_iter()
        .map(|s| erdos_renyi(params.n, p, &mut stream(&[params.seed, s as u64])).diameter())
        .collect();
    let conn: Vec<usize> = diam.iter().flatten().copied().collect();
    Ok(ErCheck {
        p,
        connected_rate: conn.len() as f64 / params.samples as f64,
        mean_diameter: (!conn.is_empty()).then(|| conn.iter().sum::<usize>() as f64 / conn.len() as f64),
        max_diameter: conn.iter().max().copied(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    pub nodes: usize,
    pub edges: usize,
    pub connected: bool,
    pub diameter: Option<usize>,
    pub er_check: Option<ErCheck>,
}

pub fn overlap_graph_diagnostics(points: &Tensor, radius: f64, er: Option<&ErParams>) -> Result<GraphReport> {
    if points.rank() == 2 && points.rows() < 2 {
        return Err(Error::contract("overlap graph needs at least two points"));
    }
    let g = overlap_graph(points, radius)?;
    let diameter = g.diameter();
    Ok(GraphReport {
        nodes: g.len(),
        edges: g.edge_count(),
        connected: diameter.is_some(),
        diameter,
        er_check: er.map(er_connectivity).transpose()?,
    })
}
