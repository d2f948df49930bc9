//! Weighted undirected interaction graphs with leader gains, the switching
//! signal, and joint-connectivity checks.
//!
//! A topology holds `N` followers; the virtual leader is never a node of the
//! adjacency matrix. Leader access is encoded by the gain vector `d`: follower
//! `i` hears the leader iff `d[i] > 0`. The grand coupling matrix is
//! `G = L + D` with `L` the graph Laplacian and `D = diag(d)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("adjacency matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency must be symmetric with zero diagonal and nonnegative entries (violated at ({i},{j}))")]
    BadAdjacency { i: usize, j: usize },
    #[error("leader gain vector has {got} entries, expected {expected}")]
    BadGains { expected: usize, got: usize },
    #[error("leader gains must be nonnegative (violated at {i})")]
    NegativeGain { i: usize },
    #[error("graphs have mismatched follower counts: {a} vs {b}")]
    SizeMismatch { a: usize, b: usize },
    #[error("empty graph collection")]
    EmptyCollection,
    #[error("schedule has no subintervals")]
    EmptySchedule,
    #[error("subinterval {index} refers to graph {graph_index}, but only {count} graphs are defined")]
    BadGraphIndex { index: usize, graph_index: usize, count: usize },
    #[error("dwell time must be positive, got {tau}")]
    NonPositiveDwell { tau: f64 },
    #[error("subinterval {index} has duration {duration}, below the dwell time {tau}")]
    DwellViolation { index: usize, duration: f64, tau: f64 },
    #[error("window boundaries must start at 0, be strictly increasing, and stay below the subinterval count")]
    BadWindows,
    #[error("window index {index} out of range ({count} windows)")]
    WindowOutOfRange { index: usize, count: usize },
    #[error("time {t} is negative")]
    NegativeTime { t: f64 },
}

/// One interaction topology: symmetric weighted adjacency over the followers
/// plus leader gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyGraphRepr", into = "TopologyGraphRepr")]
pub struct TopologyGraph {
    n: usize,
    adjacency: DMatrix<f64>,
    leader_gains: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone)]
struct TopologyGraphRepr {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    d: Vec<f64>,
}

impl TryFrom<TopologyGraphRepr> for TopologyGraph {
    type Error = GraphError;
    fn try_from(r: TopologyGraphRepr) -> Result<Self, GraphError> {
        if r.a.len() != r.n || r.a.iter().any(|row| row.len() != r.n) {
            return Err(GraphError::NotSquare {
                rows: r.a.len(),
                cols: r.a.first().map(|row| row.len()).unwrap_or(0),
            });
        }
        let adjacency = DMatrix::from_fn(r.n, r.n, |i, j| r.a[i][j]);
        TopologyGraph::new(adjacency, r.d)
    }
}

impl From<TopologyGraph> for TopologyGraphRepr {
    fn from(g: TopologyGraph) -> Self {
        let a = (0..g.n)
            .map(|i| (0..g.n).map(|j| g.adjacency[(i, j)]).collect())
            .collect();
        TopologyGraphRepr { n: g.n, a, d: g.leader_gains }
    }
}

impl TopologyGraph {
    pub fn new(adjacency: DMatrix<f64>, leader_gains: Vec<f64>) -> Result<Self, GraphError> {
        let (rows, cols) = adjacency.shape();
        if rows != cols {
            return Err(GraphError::NotSquare { rows, cols });
        }
        let n = rows;
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(GraphError::BadAdjacency { i, j: i });
            }
            for j in 0..n {
                let w = adjacency[(i, j)];
                if w < 0.0 || !w.is_finite() || (adjacency[(j, i)] - w).abs() > 0.0 {
                    return Err(GraphError::BadAdjacency { i, j });
                }
            }
        }
        if leader_gains.len() != n {
            return Err(GraphError::BadGains { expected: n, got: leader_gains.len() });
        }
        if let Some(i) = leader_gains.iter().position(|&d| d < 0.0 || !d.is_finite()) {
            return Err(GraphError::NegativeGain { i });
        }
        Ok(TopologyGraph { n, adjacency, leader_gains })
    }

    /// Convenience constructor from a weighted edge list.
    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize, f64)],
        leader_gains: Vec<f64>,
    ) -> Result<Self, GraphError> {
        let mut a = DMatrix::zeros(n, n);
        for &(i, j, w) in edges {
            a[(i, j)] += w;
            a[(j, i)] += w;
        }
        TopologyGraph::new(a, leader_gains)
    }

    pub fn follower_count(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn leader_gains(&self) -> &[f64] {
        &self.leader_gains
    }

    /// Graph Laplacian: off-diagonal `-A_jk`, diagonal row degree.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = -self.adjacency.clone();
        for i in 0..self.n {
            l[(i, i)] = self.adjacency.row(i).sum();
        }
        l
    }

    /// The grand coupling matrix `G = L + D`.
    pub fn grand_matrix(&self) -> DMatrix<f64> {
        let mut g = self.laplacian();
        for i in 0..self.n {
            g[(i, i)] += self.leader_gains[i];
        }
        g
    }

    /// Entrywise union: adjacency and gains are summed.
    pub fn union(graphs: &[TopologyGraph]) -> Result<TopologyGraph, GraphError> {
        let first = graphs.first().ok_or(GraphError::EmptyCollection)?;
        let n = first.n;
        let mut adjacency = DMatrix::zeros(n, n);
        let mut gains = vec![0.0; n];
        for g in graphs {
            if g.n != n {
                return Err(GraphError::SizeMismatch { a: n, b: g.n });
            }
            adjacency += &g.adjacency;
            for (acc, d) in gains.iter_mut().zip(&g.leader_gains) {
                *acc += d;
            }
        }
        TopologyGraph::new(adjacency, gains)
    }

    /// Breadth-first connectivity of the graph augmented with the leader
    /// node; the leader is attached to every follower with a positive gain.
    pub fn is_connected_with_leader(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        // Node n is the leader.
        let total = self.n + 1;
        let mut seen = vec![false; total];
        let mut queue = std::collections::VecDeque::new();
        seen[self.n] = true;
        queue.push_back(self.n);
        while let Some(u) = queue.pop_front() {
            for v in 0..total {
                if seen[v] {
                    continue;
                }
                let linked = if u == self.n {
                    v < self.n && self.leader_gains[v] > 0.0
                } else if v == self.n {
                    self.leader_gains[u] > 0.0
                } else {
                    self.adjacency[(u, v)] > 0.0
                };
                if linked {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// The piecewise-constant switching signal: a finite subinterval list that
/// repeats cyclically past its horizon, partitioned into joint-connectivity
/// windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SwitchingScheduleRepr", into = "SwitchingScheduleRepr")]
pub struct SwitchingSchedule {
    graphs: Vec<TopologyGraph>,
    subintervals: Vec<(usize, f64)>,
    window_boundaries: Vec<usize>,
    tau: f64,
    cumulative: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone)]
struct SwitchingScheduleRepr {
    graphs: Vec<TopologyGraph>,
    subintervals: Vec<(usize, f64)>,
    windows: Vec<usize>,
    tau: f64,
}

impl TryFrom<SwitchingScheduleRepr> for SwitchingSchedule {
    type Error = GraphError;
    fn try_from(r: SwitchingScheduleRepr) -> Result<Self, GraphError> {
        SwitchingSchedule::new(r.graphs, r.subintervals, r.windows, r.tau)
    }
}

impl From<SwitchingSchedule> for SwitchingScheduleRepr {
    fn from(s: SwitchingSchedule) -> Self {
        SwitchingScheduleRepr {
            graphs: s.graphs,
            subintervals: s.subintervals,
            windows: s.window_boundaries,
            tau: s.tau,
        }
    }
}

impl SwitchingSchedule {
    pub fn new(
        graphs: Vec<TopologyGraph>,
        subintervals: Vec<(usize, f64)>,
        window_boundaries: Vec<usize>,
        tau: f64,
    ) -> Result<Self, GraphError> {
        if subintervals.is_empty() {
            return Err(GraphError::EmptySchedule);
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(GraphError::NonPositiveDwell { tau });
        }
        let n = graphs.first().map(TopologyGraph::follower_count).unwrap_or(0);
        for g in &graphs {
            if g.follower_count() != n {
                return Err(GraphError::SizeMismatch { a: n, b: g.follower_count() });
            }
        }
        for (index, &(gi, dur)) in subintervals.iter().enumerate() {
            if gi >= graphs.len() {
                return Err(GraphError::BadGraphIndex { index, graph_index: gi, count: graphs.len() });
            }
            if dur < tau {
                return Err(GraphError::DwellViolation { index, duration: dur, tau });
            }
        }
        let ok_windows = !window_boundaries.is_empty()
            && window_boundaries[0] == 0
            && window_boundaries.windows(2).all(|w| w[0] < w[1])
            && *window_boundaries.last().unwrap() < subintervals.len();
        if !ok_windows {
            return Err(GraphError::BadWindows);
        }
        let mut cumulative = Vec::with_capacity(subintervals.len() + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for &(_, dur) in &subintervals {
            acc += dur;
            cumulative.push(acc);
        }
        Ok(SwitchingSchedule { graphs, subintervals, window_boundaries, tau, cumulative })
    }

    pub fn graphs(&self) -> &[TopologyGraph] {
        &self.graphs
    }

    pub fn graph(&self, i: usize) -> &TopologyGraph {
        &self.graphs[i]
    }

    pub fn follower_count(&self) -> usize {
        self.graphs.first().map(TopologyGraph::follower_count).unwrap_or(0)
    }

    pub fn subintervals(&self) -> &[(usize, f64)] {
        &self.subintervals
    }

    pub fn dwell_time(&self) -> f64 {
        self.tau
    }

    /// Total duration of one pass through the subinterval list.
    pub fn period(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn window_count(&self) -> usize {
        self.window_boundaries.len()
    }

    /// Subinterval index range `[start, end)` of a window.
    pub fn window_range(&self, window_index: usize) -> Result<(usize, usize), GraphError> {
        if window_index >= self.window_boundaries.len() {
            return Err(GraphError::WindowOutOfRange {
                index: window_index,
                count: self.window_boundaries.len(),
            });
        }
        let start = self.window_boundaries[window_index];
        let end = self
            .window_boundaries
            .get(window_index + 1)
            .copied()
            .unwrap_or(self.subintervals.len());
        Ok((start, end))
    }

    /// Union over the graphs active in a window, with multiplicity (repeated
    /// graphs add their weights).
    pub fn window_union(&self, window_index: usize) -> Result<TopologyGraph, GraphError> {
        let (start, end) = self.window_range(window_index)?;
        let members: Vec<TopologyGraph> = self.subintervals[start..end]
            .iter()
            .map(|&(gi, _)| self.graphs[gi].clone())
            .collect();
        TopologyGraph::union(&members)
    }

    /// True iff the union of the window's graphs, leader included, is
    /// connected. A window whose followers are mutually connected but cut off
    /// from the leader is reported not jointly connected.
    pub fn is_jointly_connected(&self, window_index: usize) -> Result<bool, GraphError> {
        Ok(self.window_union(window_index)?.is_connected_with_leader())
    }

    /// Index of the subinterval (within one period) containing time `t`;
    /// right-continuous at switch instants, cyclic past the horizon.
    pub fn subinterval_at(&self, t: f64) -> Result<usize, GraphError> {
        if t < 0.0 || !t.is_finite() {
            return Err(GraphError::NegativeTime { t });
        }
        let period = self.period();
        let mut r = t - (t / period).floor() * period;
        if r >= period {
            r -= period;
        }
        // Snap values a hair below a boundary onto it so step times computed
        // as k*dt land in the right subinterval.
        let eps = 1e-9 * period;
        for (i, _) in self.subintervals.iter().enumerate() {
            if r < self.cumulative[i + 1] - eps {
                return Ok(i);
            }
        }
        Ok(0)
    }

    /// The graph index active at time `t`.
    pub fn graph_at(&self, t: f64) -> Result<usize, GraphError> {
        Ok(self.subintervals[self.subinterval_at(t)?].0)
    }
}
