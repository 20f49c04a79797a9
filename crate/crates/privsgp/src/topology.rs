//! Time-varying directed communication graphs and their column-stochastic
//! mixing matrices.
//!
//! Edges are stored as (src, dst) pairs meaning "src sends to dst". The
//! mixing matrix entry P[i][j] is the weight node i applies to the message
//! received from node j, so column j describes how sender j splits its mass.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("node {node} has no self-loop at iteration {k} in custom schedule")]
    MissingSelfLoop { node: usize, k: usize },
    #[error("edge ({src},{dst}) out of range for n={n}")]
    EdgeOutOfRange { src: usize, dst: usize, n: usize },
    #[error("schedule is not {b}-strongly connected")]
    NotConnected { b: usize },
    #[error("consensus constants require lambda < 1, got {lambda}")]
    LambdaOutOfRange { lambda: f64 },
    #[error("custom schedule line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("custom schedule is empty")]
    EmptyCustom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Exponential,
    Ring,
    Complete,
    StaticCustom,
}

/// A periodic sequence of directed graphs over n nodes.
#[derive(Debug, Clone)]
pub struct GraphSchedule {
    pub kind: ScheduleKind,
    pub n: usize,
    /// One edge list per iteration for `StaticCustom`; cycled with period
    /// equal to its length. Self-loops are stored explicitly.
    pub custom_edges: Option<Vec<Vec<(usize, usize)>>>,
}

impl GraphSchedule {
    pub fn exponential(n: usize) -> Self {
        assert!(n >= 1);
        Self { kind: ScheduleKind::Exponential, n, custom_edges: None }
    }

    pub fn ring(n: usize) -> Self {
        assert!(n >= 1);
        Self { kind: ScheduleKind::Ring, n, custom_edges: None }
    }

    pub fn complete(n: usize) -> Self {
        assert!(n >= 1);
        Self { kind: ScheduleKind::Complete, n, custom_edges: None }
    }

    /// Custom schedule from explicit per-iteration edge lists. Edges are kept
    /// as given; validation (range, self-loops) happens when a mixing matrix
    /// is built.
    pub fn custom(n: usize, edges: Vec<Vec<(usize, usize)>>) -> Result<Self, TopologyError> {
        if edges.is_empty() {
            return Err(TopologyError::EmptyCustom);
        }
        for per_iter in &edges {
            for &(src, dst) in per_iter {
                if src >= n || dst >= n {
                    return Err(TopologyError::EdgeOutOfRange { src, dst, n });
                }
            }
        }
        Ok(Self { kind: ScheduleKind::StaticCustom, n, custom_edges: Some(edges) })
    }

    /// Number of offsets the exponential graph cycles through:
    /// m = floor(log2(n-1)) + 1, with m = 0 for n = 1.
    pub fn exponential_offsets(n: usize) -> usize {
        if n <= 1 {
            0
        } else {
            ((n - 1) as f64).log2().floor() as usize + 1
        }
    }

    /// Period of the schedule in iterations.
    pub fn period(&self) -> usize {
        match self.kind {
            ScheduleKind::Exponential => Self::exponential_offsets(self.n).max(1),
            ScheduleKind::Ring | ScheduleKind::Complete => 1,
            ScheduleKind::StaticCustom => self.custom_edges.as_ref().map_or(1, |e| e.len()),
        }
    }

    /// Directed edges (src sends to dst) active at iteration k, including
    /// self-loops for the built-in kinds.
    pub fn edges_at(&self, k: usize) -> Vec<(usize, usize)> {
        let n = self.n;
        match self.kind {
            ScheduleKind::Exponential => {
                let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
                let m = Self::exponential_offsets(n);
                if m > 0 {
                    let offset = 1usize << (k % m);
                    for i in 0..n {
                        edges.push((i, (i + offset) % n));
                    }
                }
                edges
            }
            ScheduleKind::Ring => {
                let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
                if n > 1 {
                    for i in 0..n {
                        edges.push((i, (i + 1) % n));
                    }
                }
                edges
            }
            ScheduleKind::Complete => {
                let mut edges = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        edges.push((i, j));
                    }
                }
                edges
            }
            ScheduleKind::StaticCustom => {
                let lists = self.custom_edges.as_ref().expect("custom schedule has edges");
                lists[k % lists.len()].clone()
            }
        }
    }
}

/// Dense column-stochastic mixing matrix for one iteration.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    pub n: usize,
    pub k: usize,
    entries: Vec<f64>, // row-major
}

impl MixingMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                sums[j] += self.get(i, j);
            }
        }
        sums
    }

    pub fn is_column_stochastic(&self, tol: f64) -> bool {
        self.column_sums().iter().all(|s| (s - 1.0).abs() <= tol)
            && self.entries.iter().all(|&e| e >= 0.0)
    }

    /// Raw constructor for tests and oracles; entries are row-major.
    pub fn from_entries(n: usize, k: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), n * n);
        Self { n, k, entries }
    }

    /// Identity matrix; mixing with it is a no-op.
    pub fn identity(n: usize, k: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self { n, k, entries }
    }
}

/// Builds the mixing matrix for iteration k: sender j splits its mass
/// uniformly over its out-neighbors including itself. For the exponential
/// graph this is 1/2 self, 1/2 recipient.
pub fn mixing_matrix(schedule: &GraphSchedule, k: usize) -> Result<MixingMatrix, TopologyError> {
    let n = schedule.n;
    let edges = schedule.edges_at(k);
    // out-neighbor sets per sender, dedup via boolean rows
    let mut out = vec![vec![false; n]; n];
    for &(src, dst) in &edges {
        if src >= n || dst >= n {
            return Err(TopologyError::EdgeOutOfRange { src, dst, n });
        }
        out[src][dst] = true;
    }
    if schedule.kind == ScheduleKind::StaticCustom {
        for (j, row) in out.iter().enumerate() {
            if !row[j] {
                return Err(TopologyError::MissingSelfLoop { node: j, k });
            }
        }
    } else {
        debug_assert!(out.iter().enumerate().all(|(j, row)| row[j]));
    }
    let mut entries = vec![0.0; n * n];
    for j in 0..n {
        let degree = out[j].iter().filter(|&&b| b).count();
        let weight = 1.0 / degree as f64;
        for i in 0..n {
            if out[j][i] {
                entries[i * n + j] = weight;
            }
        }
    }
    Ok(MixingMatrix { n, k, entries })
}

/// Result of checking Assumption-style B-window connectivity.
#[derive(Debug, Clone, Copy)]
pub struct ConnectivityReport {
    pub connected: bool,
    /// Max diameter over the checked windows; meaningful only if connected.
    pub diameter: usize,
}

/// Checks that the union of edge sets over each window [lB, (l+1)B-1] is
/// strongly connected, for enough windows to cover one full period of the
/// schedule. Also reports the max diameter over the checked windows.
pub fn verify_b_strong_connectivity(schedule: &GraphSchedule, b: usize) -> ConnectivityReport {
    assert!(b >= 1);
    let n = schedule.n;
    if n == 1 {
        return ConnectivityReport { connected: true, diameter: 0 };
    }
    let period = schedule.period();
    let windows = lcm(period, b) / b;
    let mut max_diameter = 0usize;
    for l in 0..windows {
        let mut adj = vec![vec![false; n]; n];
        for k in l * b..(l + 1) * b {
            for (src, dst) in schedule.edges_at(k) {
                adj[src][dst] = true;
            }
        }
        match union_diameter(&adj) {
            Some(d) => max_diameter = max_diameter.max(d),
            None => return ConnectivityReport { connected: false, diameter: 0 },
        }
    }
    ConnectivityReport { connected: true, diameter: max_diameter }
}

/// BFS all-pairs eccentricity on the directed union graph. None if any node
/// fails to reach any other.
fn union_diameter(adj: &[Vec<bool>]) -> Option<usize> {
    let n = adj.len();
    let mut diameter = 0usize;
    for start in 0..n {
        let mut dist = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::new();
        dist[start] = 0;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if adj[u][v] && dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for &d in &dist {
            if d == usize::MAX {
                return None;
            }
            diameter = diameter.max(d);
        }
    }
    Some(diameter)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Geometric-consensus constants of the mixing sequence.
#[derive(Debug, Clone, Copy)]
pub struct ConsensusConstants {
    /// Minimum non-zero mixing weight over one schedule period.
    pub eps_min: f64,
    pub b: usize,
    pub delta: usize,
    pub lambda: f64,
    /// Geometric decay rate of the consensus error, q in [0, 1).
    pub q: f64,
    /// Upper bound on the consensus constant C; infinite when lambda = 0
    /// (consensus is immediate and the bound degenerates).
    pub c: f64,
}

/// Evaluates eps_min, lambda = 1 - n * eps_min^(delta*B),
/// q = lambda^(1/(delta*B+1)) and the C upper bound for a schedule that
/// passes the B-strong-connectivity check.
pub fn consensus_constants(
    schedule: &GraphSchedule,
    b: usize,
    d: usize,
) -> Result<ConsensusConstants, TopologyError> {
    let report = verify_b_strong_connectivity(schedule, b);
    if !report.connected {
        return Err(TopologyError::NotConnected { b });
    }
    let delta = report.diameter;
    let mut eps_min = f64::INFINITY;
    for k in 0..schedule.period() {
        let p = mixing_matrix(schedule, k)?;
        for i in 0..p.n {
            for j in 0..p.n {
                let e = p.get(i, j);
                if e > 0.0 {
                    eps_min = eps_min.min(e);
                }
            }
        }
    }
    let db = (delta * b) as f64;
    let lambda = (1.0 - schedule.n as f64 * eps_min.powf(db)).max(0.0);
    if lambda >= 1.0 {
        return Err(TopologyError::LambdaOutOfRange { lambda });
    }
    let q = if lambda == 0.0 { 0.0 } else { lambda.powf(1.0 / (db + 1.0)) };
    let c = if lambda == 0.0 {
        f64::INFINITY
    } else {
        2.0 * (d as f64).sqrt() * eps_min.powf(-db) / lambda.powf((db + 2.0) / (db + 1.0))
    };
    Ok(ConsensusConstants { eps_min, b, delta, lambda, q, c })
}

/// Parses a custom schedule: one line per iteration, semicolon-separated
/// "src>dst" pairs. Self-loops are implicit and added for every node.
pub fn parse_custom_schedule(n: usize, text: &str) -> Result<GraphSchedule, TopologyError> {
    let mut per_iter = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        for pair in line.split(';') {
            let pair = pair.trim();
            if pair.is_empty() {
                continue;
            }
            let (src, dst) = pair.split_once('>').ok_or_else(|| TopologyError::Parse {
                line: idx + 1,
                msg: format!("expected src>dst, got {pair:?}"),
            })?;
            let src: usize = src.trim().parse().map_err(|_| TopologyError::Parse {
                line: idx + 1,
                msg: format!("bad node id {src:?}"),
            })?;
            let dst: usize = dst.trim().parse().map_err(|_| TopologyError::Parse {
                line: idx + 1,
                msg: format!("bad node id {dst:?}"),
            })?;
            if src >= n || dst >= n {
                return Err(TopologyError::Parse {
                    line: idx + 1,
                    msg: format!("node id out of range for n={n}"),
                });
            }
            if src != dst {
                edges.push((src, dst));
            }
        }
        per_iter.push(edges);
    }
    GraphSchedule::custom(n, per_iter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exp_target(schedule: &GraphSchedule, node: usize, k: usize) -> usize {
        schedule
            .edges_at(k)
            .into_iter()
            .find(|&(src, dst)| src == node && dst != node)
            .map(|(_, dst)| dst)
            .unwrap_or(node)
    }

    #[test]
    fn exponential_offsets_cycle() {
        // n=8: node 0 sends to 1, 2, 4 then back to 1
        let s = GraphSchedule::exponential(8);
        assert_eq!(exp_target(&s, 0, 0), 1);
        assert_eq!(exp_target(&s, 0, 1), 2);
        assert_eq!(exp_target(&s, 0, 2), 4);
        assert_eq!(exp_target(&s, 0, 3), 1);
    }

    #[test]
    fn exponential_single_node_is_self_loop_only() {
        let s = GraphSchedule::exponential(1);
        for k in 0..5 {
            assert_eq!(s.edges_at(k), vec![(0, 0)]);
        }
    }

    #[test]
    fn exponential_offset_wraps() {
        // n=4, node 3, k=1: offset 2, target (3+2) mod 4 = 1
        let s = GraphSchedule::exponential(4);
        assert_eq!(exp_target(&s, 3, 1), 1);
    }

    #[test]
    fn mixing_matrix_two_nodes() {
        let s = GraphSchedule::exponential(2);
        for k in 0..3 {
            let p = mixing_matrix(&s, k).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(p.get(i, j), 0.5);
                }
            }
        }
    }

    #[test]
    fn mixing_matrix_single_node_is_identity() {
        let s = GraphSchedule::exponential(1);
        let p = mixing_matrix(&s, 0).unwrap();
        assert_eq!(p.get(0, 0), 1.0);
    }

    #[test]
    fn mixing_matrix_exponential_n4_k0() {
        let s = GraphSchedule::exponential(4);
        let p = mixing_matrix(&s, 0).unwrap();
        for j in 0..4 {
            assert_eq!(p.get(j, j), 0.5);
            assert_eq!(p.get((j + 1) % 4, j), 0.5);
        }
        assert!(p.is_column_stochastic(1e-12));
    }

    #[test]
    fn custom_without_self_loop_rejected() {
        let s = GraphSchedule::custom(2, vec![vec![(0, 1), (1, 0)]]).unwrap();
        assert!(matches!(
            mixing_matrix(&s, 0),
            Err(TopologyError::MissingSelfLoop { node: 0, k: 0 })
        ));
    }

    #[test]
    fn connectivity_exponential_n8() {
        let s = GraphSchedule::exponential(8);
        assert!(!verify_b_strong_connectivity(&s, 1).connected);
        assert!(verify_b_strong_connectivity(&s, 3).connected);
    }

    #[test]
    fn connectivity_single_node() {
        let s = GraphSchedule::exponential(1);
        let r = verify_b_strong_connectivity(&s, 1);
        assert!(r.connected);
        assert_eq!(r.diameter, 0);
    }

    #[test]
    fn connectivity_ring_n4() {
        let s = GraphSchedule::ring(4);
        let r = verify_b_strong_connectivity(&s, 1);
        assert!(r.connected);
        assert_eq!(r.diameter, 3);
    }

    #[test]
    fn constants_two_node_exponential() {
        let s = GraphSchedule::exponential(2);
        let c = consensus_constants(&s, 1, 1).unwrap();
        assert!((c.eps_min - 0.5).abs() < 1e-15);
        assert_eq!(c.delta, 1);
        assert!((c.lambda - 0.0).abs() < 1e-15);
        assert_eq!(c.q, 0.0);
    }

    #[test]
    fn constants_single_node() {
        let s = GraphSchedule::exponential(1);
        let c = consensus_constants(&s, 1, 3).unwrap();
        assert_eq!(c.q, 0.0);
    }

    #[test]
    fn constants_ring_n4() {
        let s = GraphSchedule::ring(4);
        let c = consensus_constants(&s, 1, 1).unwrap();
        assert!((c.eps_min - 0.5).abs() < 1e-15);
        assert!((c.lambda - 0.5).abs() < 1e-12);
        assert!((c.q - 0.5f64.powf(0.25)).abs() < 1e-12);
        assert!((c.q - 0.8409).abs() < 1e-3);
    }

    #[test]
    fn parse_custom_schedule_roundtrip() {
        let s = parse_custom_schedule(3, "0>1;1>2\n2>0\n").unwrap();
        assert_eq!(s.period(), 2);
        let e0 = s.edges_at(0);
        assert!(e0.contains(&(0, 1)) && e0.contains(&(1, 2)) && e0.contains(&(0, 0)));
        let e1 = s.edges_at(1);
        assert!(e1.contains(&(2, 0)) && e1.contains(&(1, 1)));
        // mixing works since self-loops were added
        assert!(mixing_matrix(&s, 0).unwrap().is_column_stochastic(1e-12));
    }

    #[test]
    fn parse_custom_schedule_bad_line() {
        let err = parse_custom_schedule(3, "0>1\n0-2\n").unwrap_err();
        assert!(matches!(err, TopologyError::Parse { line: 2, .. }));
    }

    proptest! {
        #[test]
        fn columns_sum_to_one(n in 1usize..20, k in 0usize..64) {
            for s in [GraphSchedule::exponential(n), GraphSchedule::ring(n), GraphSchedule::complete(n)] {
                let p = mixing_matrix(&s, k).unwrap();
                prop_assert!(p.is_column_stochastic(1e-12));
            }
        }

        #[test]
        fn exponential_is_periodic(n in 2usize..40, k in 0usize..32) {
            let s = GraphSchedule::exponential(n);
            let m = s.period();
            prop_assert_eq!(s.edges_at(k), s.edges_at(k + m));
        }

        #[test]
        fn q_below_one_when_connected(n in 1usize..12) {
            let s = GraphSchedule::exponential(n);
            let b = s.period();
            if verify_b_strong_connectivity(&s, b).connected {
                let c = consensus_constants(&s, b, 4).unwrap();
                prop_assert!(c.q < 1.0);
                prop_assert!(c.q >= 0.0);
            }
        }
    }
}
