//! Communication graphs, their mixing matrices, and spectral quantities.
//!
//! A [`MixingMatrix`] is only constructible when it is symmetric, doubly
//! stochastic, nonnegative, supported on the graph's edges plus the diagonal,
//! and has `beta < 1`. `beta` is the second largest eigenvalue magnitude and
//! governs how fast gossip averaging contracts toward consensus.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigenvalues, DenseMatrix};

/// Tolerance for symmetry and row/column sums of a mixing matrix.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-12;

/// `beta` must stay below `1 - SPECTRAL_GAP_MARGIN`; anything closer is
/// indistinguishable from a disconnected graph at solver precision.
pub const SPECTRAL_GAP_MARGIN: f64 = 1e-10;

/// Number of Erdos-Renyi draws attempted before giving up on connectivity.
pub const ER_MAX_ATTEMPTS: usize = 100;

/// Undirected simple connected graph on nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph")]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

#[derive(Deserialize)]
struct RawGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<RawGraph> for Graph {
    type Error = Error;
    fn try_from(raw: RawGraph) -> Result<Self> {
        Graph::new(raw.n, raw.edges)
    }
}

impl Graph {
    /// Validates and normalizes an edge list (each edge stored as `(lo, hi)`,
    /// sorted). Rejects self-loops, duplicates, out-of-range nodes, and
    /// disconnected graphs.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let g = Self::unchecked(n, edges)?;
        if !g.is_connected() {
            return Err(Error::InvalidGraph(format!(
                "graph on {n} nodes with {} edges is not connected",
                g.edges.len()
            )));
        }
        Ok(g)
    }

    fn unchecked(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGraph(format!(
                "need at least 2 nodes, got {n}"
            )));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
            }
            if !set.insert((i.min(j), i.max(j))) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({i}, {j})")));
            }
        }
        Ok(Self {
            n,
            edges: set.into_iter().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.binary_search(&(i.min(j), i.max(j))).is_ok()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| match (a == i, b == i) {
                (true, _) => Some(b),
                (_, true) => Some(a),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n
    }

    pub fn adjacency(&self) -> DenseMatrix {
        let mut a = DenseMatrix::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    /// Combinatorial Laplacian `D - A`.
    pub fn laplacian(&self) -> DenseMatrix {
        let mut l = DenseMatrix::zeros(self.n, self.n);
        for (i, d) in self.degrees().into_iter().enumerate() {
            l.set(i, i, d as f64);
        }
        for &(i, j) in &self.edges {
            l.set(i, j, -1.0);
            l.set(j, i, -1.0);
        }
        l
    }
}

/// Cycle `0 - 1 - ... - (n-1) - 0`.
pub fn build_ring(n: usize) -> Result<Graph> {
    if n < 3 {
        return Err(Error::InvalidGraph(format!(
            "a ring needs at least 3 nodes, got {n}"
        )));
    }
    Graph::new(n, (0..n).map(|i| (i, (i + 1) % n)))
}

pub fn build_complete(n: usize) -> Result<Graph> {
    Graph::new(n, (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))))
}

/// G(n, p_c): every pair is an edge independently with probability `p_c`.
/// Disconnected draws are discarded and redrawn from the advanced stream,
/// up to [`ER_MAX_ATTEMPTS`] times.
pub fn build_erdos_renyi<R: Rng + ?Sized>(n: usize, p_c: f64, rng: &mut R) -> Result<Graph> {
    if n < 2 {
        return Err(Error::InvalidGraph(format!(
            "need at least 2 nodes, got {n}"
        )));
    }
    if !(p_c > 0.0 && p_c <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "edge probability must be in (0, 1], got {p_c}"
        )));
    }
    for _ in 0..ER_MAX_ATTEMPTS {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p_c {
                    edges.push((i, j));
                }
            }
        }
        let g = Graph::unchecked(n, edges)?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::Disconnected {
        attempts: ER_MAX_ATTEMPTS,
        p_c,
    })
}

/// Static exponential graph: node `i` links to `(i + 2^k) mod n` for
/// `k = 0..=floor(log2(n - 1))`, taken as undirected edges.
pub fn build_exponential_graph(n: usize) -> Result<Graph> {
    if n < 2 {
        return Err(Error::InvalidGraph(format!(
            "need at least 2 nodes, got {n}"
        )));
    }
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut offset = 1;
        while offset < n {
            let j = (i + offset) % n;
            edges.insert((i.min(j), i.max(j)));
            offset *= 2;
        }
    }
    Graph::new(n, edges)
}

/// How a mixing matrix was built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    /// `(I + A) / 3` on a ring.
    Ring,
    /// `I - 2 L / (3 lambda_max(L))`.
    Laplacian,
    /// All entries `1/n`.
    Complete,
    /// `q_ij = 1 / (1 + max(d_i, d_j))` on edges.
    MetropolisHastings,
    /// User-supplied weights.
    Explicit,
}

impl fmt::Display for MixingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MixingKind::Ring => "ring",
            MixingKind::Laplacian => "laplacian",
            MixingKind::Complete => "complete",
            MixingKind::MetropolisHastings => "metropolis_hastings",
            MixingKind::Explicit => "explicit",
        };
        f.write_str(s)
    }
}

/// Validated symmetric doubly stochastic gossip matrix.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    q: DenseMatrix,
    graph: Graph,
    eigenvalues: Vec<f64>,
    beta: f64,
    kind: MixingKind,
    /// Per row: `(j, q_ij)` for every strictly positive entry.
    support: Vec<Vec<(usize, f64)>>,
}

/// Checks symmetry, nonnegativity and unit row/column sums of a raw matrix.
pub fn check_doubly_stochastic(q: &DenseMatrix) -> Result<()> {
    let asym = q.max_asymmetry()?;
    if asym > STOCHASTIC_TOLERANCE {
        return Err(Error::InvalidMixing(format!(
            "not symmetric: max |q_ij - q_ji| = {asym:e}"
        )));
    }
    if let Some(x) = q.as_slice().iter().find(|x| **x < 0.0) {
        return Err(Error::InvalidMixing(format!("negative entry {x}")));
    }
    for (i, s) in q.row_sums().into_iter().enumerate() {
        if (s - 1.0).abs() > STOCHASTIC_TOLERANCE {
            return Err(Error::InvalidMixing(format!("row {i} sums to {s}")));
        }
    }
    for (j, s) in q.col_sums().into_iter().enumerate() {
        if (s - 1.0).abs() > STOCHASTIC_TOLERANCE {
            return Err(Error::InvalidMixing(format!("column {j} sums to {s}")));
        }
    }
    Ok(())
}

/// `max(|lambda_2|, |lambda_n|)` for descending eigenvalues.
pub fn second_largest_magnitude(eigenvalues: &[f64]) -> f64 {
    match eigenvalues {
        [] | [_] => 0.0,
        [_, second] => second.abs(),
        [_, second, .., last] => second.abs().max(last.abs()),
    }
}

impl MixingMatrix {
    pub fn new(q: DenseMatrix, graph: &Graph, kind: MixingKind) -> Result<Self> {
        let n = graph.n();
        if q.shape() != (n, n) {
            return Err(Error::InvalidMixing(format!(
                "expected {n}x{n} weights, got {}x{}",
                q.rows(),
                q.cols()
            )));
        }
        check_doubly_stochastic(&q)?;
        for i in 0..n {
            for j in 0..n {
                if i != j && q.get(i, j) > 0.0 && !graph.has_edge(i, j) {
                    return Err(Error::InvalidMixing(format!(
                        "q[{i}][{j}] = {} but ({i}, {j}) is not an edge",
                        q.get(i, j)
                    )));
                }
            }
        }
        let eigenvalues = symmetric_eigenvalues(&q)?;
        let beta = second_largest_magnitude(&eigenvalues);
        if beta >= 1.0 - SPECTRAL_GAP_MARGIN {
            return Err(Error::InvalidMixing(format!(
                "no spectral gap: beta = {beta} (graph disconnected or weights degenerate)"
            )));
        }
        let support = (0..n)
            .map(|i| {
                (0..n)
                    .filter_map(|j| {
                        let w = q.get(i, j);
                        (w > 0.0).then_some((j, w))
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            q,
            graph: graph.clone(),
            eigenvalues,
            beta,
            kind,
            support,
        })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.q
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn kind(&self) -> MixingKind {
        self.kind
    }

    /// Eigenvalues of `Q`, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Second largest eigenvalue magnitude.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Consensus contraction factor `(1 + beta^2) / 2`.
    pub fn rho(&self) -> f64 {
        (1.0 + self.beta * self.beta) / 2.0
    }

    /// Strictly positive entries of row `i` as `(j, q_ij)`, including `j == i`.
    pub fn row_support(&self, i: usize) -> &[(usize, f64)] {
        &self.support[i]
    }

    /// Number of other nodes node `i` receives from.
    pub fn out_degree(&self, i: usize) -> usize {
        self.support[i].iter().filter(|(j, _)| *j != i).count()
    }
}

/// `Q = (I + A) / 3` for a ring graph.
pub fn mixing_from_ring(g: &Graph) -> Result<MixingMatrix> {
    let n = g.n();
    if n < 3 || g.edges().len() != n || g.degrees().iter().any(|&d| d != 2) {
        return Err(Error::InvalidGraph(
            "ring mixing requires a cycle: every node of degree 2".into(),
        ));
    }
    let q = DenseMatrix::identity(n)
        .add(&g.adjacency())?
        .scale(1.0 / 3.0)?;
    MixingMatrix::new(q, g, MixingKind::Ring)
}

/// `Q = I - 2 L / (3 lambda_max(L))` with `L` the graph Laplacian.
pub fn mixing_from_laplacian(g: &Graph) -> Result<MixingMatrix> {
    if !g.is_connected() {
        return Err(Error::InvalidGraph(
            "Laplacian mixing needs a connected graph".into(),
        ));
    }
    let l = g.laplacian();
    let lambda_max = symmetric_eigenvalues(&l)?[0];
    let q = DenseMatrix::identity(g.n()).sub(&l.scale(2.0 / (3.0 * lambda_max))?)?;
    MixingMatrix::new(q, g, MixingKind::Laplacian)
}

/// Exact averaging: every entry `1/n`.
pub fn mixing_complete(n: usize) -> Result<MixingMatrix> {
    let g = build_complete(n)?;
    MixingMatrix::new(
        DenseMatrix::filled(n, n, 1.0 / n as f64),
        &g,
        MixingKind::Complete,
    )
}

/// Metropolis-Hastings weights; symmetric doubly stochastic for any degrees.
pub fn mixing_metropolis_hastings(g: &Graph) -> Result<MixingMatrix> {
    let n = g.n();
    let deg = g.degrees();
    let mut q = DenseMatrix::zeros(n, n);
    for &(i, j) in g.edges() {
        let w = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
        q.set(i, j, w);
        q.set(j, i, w);
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| q.get(i, j)).sum();
        q.set(i, i, 1.0 - off);
    }
    MixingMatrix::new(q, g, MixingKind::MetropolisHastings)
}

/// Spectral norm of `Q^N - (1/n) 1 1^T`, computed from the eigenvalues of
/// that (symmetric) matrix.
pub fn spectral_contraction(q: &MixingMatrix, power: u32) -> Result<f64> {
    if power == 0 {
        return Err(Error::InvalidArgument("power must be positive".into()));
    }
    let n = q.n();
    let qn = q.weights().powi(power)?;
    let centered = qn.sub(&DenseMatrix::filled(n, n, 1.0 / n as f64))?;
    let eig = symmetric_eigenvalues(&centered)?;
    Ok(eig.iter().fold(0.0, |m, x| m.max(x.abs())))
}

/// JSON form of a topology: node count, edge list and optional explicit
/// weights. Without weights the Metropolis-Hastings rule is used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyFile {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
}

impl TopologyFile {
    pub fn from_mixing(q: &MixingMatrix) -> Self {
        let w = q.weights();
        Self {
            n: q.n(),
            edges: q.graph().edges().to_vec(),
            weights: Some((0..w.rows()).map(|i| w.row(i).to_vec()).collect()),
        }
    }

    pub fn to_mixing(&self) -> Result<MixingMatrix> {
        let g = Graph::new(self.n, self.edges.iter().copied())?;
        match &self.weights {
            None => mixing_metropolis_hastings(&g),
            Some(rows) => {
                if rows.len() != self.n || rows.iter().any(|r| r.len() != self.n) {
                    return Err(Error::InvalidMixing(format!(
                        "weights must be {n}x{n}",
                        n = self.n
                    )));
                }
                MixingMatrix::new(DenseMatrix::from_rows(rows), &g, MixingKind::Explicit)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamRole};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn ring_beta_formula(n: usize) -> f64 {
        (1..n)
            .map(|k| ((1.0 + 2.0 * (2.0 * PI * k as f64 / n as f64).cos()) / 3.0).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn ring_structure() {
        let g3 = build_ring(3).unwrap();
        assert_eq!(g3.edges().len(), 3);
        assert!(build_ring(5).unwrap().degrees().iter().all(|&d| d == 2));
        assert_eq!(
            build_ring(4).unwrap().edges(),
            &[(0, 1), (0, 3), (1, 2), (2, 3)]
        );
        assert!(build_ring(2).is_err());
    }

    #[test]
    fn erdos_renyi_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            build_erdos_renyi(6, 1.0, &mut rng).unwrap().edges().len(),
            15
        );
        assert_eq!(
            build_erdos_renyi(2, 1.0, &mut rng).unwrap().edges(),
            &[(0, 1)]
        );
        assert!(build_erdos_renyi(5, 0.0, &mut rng).is_err());
        assert!(build_erdos_renyi(5, 1.5, &mut rng).is_err());
        assert!(matches!(
            build_erdos_renyi(40, 0.01, &mut rng),
            Err(Error::Disconnected { attempts: 100, .. })
        ));
    }

    #[test]
    fn erdos_renyi_golden_edge_set() {
        let g = build_erdos_renyi(30, 0.6, &mut stream(2024, StreamRole::Topology, &[])).unwrap();
        let checksum: u64 = g
            .edges()
            .iter()
            .map(|&(i, j)| (i * 30 + j) as u64 * (i as u64 + 1))
            .sum();
        // Frozen from the first verified run.
        assert_eq!(g.edges().len(), GOLDEN_ER_EDGES);
        assert_eq!(checksum, GOLDEN_ER_CHECKSUM);
    }

    const GOLDEN_ER_EDGES: usize = 253;
    const GOLDEN_ER_CHECKSUM: u64 = 1_173_874;

    #[test]
    fn exponential_graph_offsets() {
        assert_eq!(build_exponential_graph(2).unwrap().edges(), &[(0, 1)]);
        assert_eq!(build_exponential_graph(3).unwrap().edges().len(), 3);
        let g8 = build_exponential_graph(8).unwrap();
        for i in 0..8 {
            let expected: BTreeSet<usize> = [1usize, 2, 4]
                .iter()
                .flat_map(|o| [(i + o) % 8, (i + 8 - o) % 8])
                .collect();
            let got: BTreeSet<usize> = g8.neighbors(i).into_iter().collect();
            assert_eq!(got, expected);
            assert_eq!(got.len(), 5);
        }
    }

    #[test]
    fn ring_mixing_values() {
        let q3 = mixing_from_ring(&build_ring(3).unwrap()).unwrap();
        assert!(q3
            .weights()
            .as_slice()
            .iter()
            .all(|&x| (x - 1.0 / 3.0).abs() < 1e-16));
        let q4 = mixing_from_ring(&build_ring(4).unwrap()).unwrap();
        assert!((q4.beta() - 1.0 / 3.0).abs() < 1e-12);
        let q16 = mixing_from_ring(&build_ring(16).unwrap()).unwrap();
        let want = (1.0 + 2.0 * (2.0 * PI / 16.0).cos()) / 3.0;
        assert!((q16.beta() - want).abs() < 1e-10);
        assert!((q16.beta() - 0.949253).abs() < 1e-6);
        assert!((q16.beta() - ring_beta_formula(16)).abs() < 1e-10);
        assert!(mixing_from_ring(&build_complete(4).unwrap()).is_err());
    }

    #[test]
    fn laplacian_mixing_values() {
        let q = mixing_from_laplacian(&build_complete(3).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 5.0 / 9.0 } else { 2.0 / 9.0 };
                assert!((q.weights().get(i, j) - want).abs() < 1e-14);
            }
        }
        let q2 = mixing_from_laplacian(&Graph::new(2, [(0, 1)]).unwrap()).unwrap();
        let want = DenseMatrix::from_rows(&[[2.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]]);
        assert!(q2.weights().max_abs_diff(&want).unwrap() < 1e-15);
        assert!((q2.beta() - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn complete_mixing_averages() {
        let q = mixing_complete(2).unwrap();
        assert_eq!(q.weights(), &DenseMatrix::filled(2, 2, 0.5));
        for n in 2..9 {
            let q = mixing_complete(n).unwrap();
            assert!(q.beta() < 1e-12);
            let v: Vec<f64> = (0..n).map(|i| (i * i) as f64 - 1.5).collect();
            let mean = v.iter().sum::<f64>() / n as f64;
            for x in q.weights().mul_vec(&v).unwrap() {
                assert!((x - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_invalid_weights() {
        let g = build_ring(4).unwrap();
        // Identity rows are doubly stochastic but have no spectral gap.
        assert!(MixingMatrix::new(DenseMatrix::identity(4), &g, MixingKind::Explicit).is_err());
        let mut off_graph = DenseMatrix::filled(4, 4, 0.25);
        off_graph.set(0, 0, 0.25);
        assert!(MixingMatrix::new(off_graph, &g, MixingKind::Explicit).is_err());
        let mut broken = mixing_from_ring(&g).unwrap().weights().clone();
        broken.set(0, 0, 0.5);
        assert!(check_doubly_stochastic(&broken).is_err());
    }

    #[test]
    fn spectral_contraction_matches_beta_power() {
        let q4 = mixing_from_ring(&build_ring(4).unwrap()).unwrap();
        assert!((spectral_contraction(&q4, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((spectral_contraction(&q4, 3).unwrap() - 1.0 / 27.0).abs() < 1e-12);
        let qc = mixing_complete(5).unwrap();
        assert!(spectral_contraction(&qc, 4).unwrap() < 1e-14);

        let er = build_erdos_renyi(12, 0.4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let exp = build_exponential_graph(10).unwrap();
        for q in [
            mixing_from_ring(&build_ring(9).unwrap()).unwrap(),
            mixing_from_laplacian(&er).unwrap(),
            mixing_metropolis_hastings(&exp).unwrap(),
        ] {
            for power in [1u32, 2, 5, 10] {
                let got = spectral_contraction(&q, power).unwrap();
                let want = q.beta().powi(power as i32);
                assert!((got - want).abs() <= 1e-8 * want + 1e-14, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn top_eigenvalue_is_one_with_constant_vector() {
        let er = build_erdos_renyi(15, 0.3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        for q in [
            mixing_from_ring(&build_ring(7).unwrap()).unwrap(),
            mixing_from_laplacian(&er).unwrap(),
            mixing_metropolis_hastings(&build_exponential_graph(13).unwrap()).unwrap(),
            mixing_complete(6).unwrap(),
        ] {
            assert!((q.eigenvalues()[0] - 1.0).abs() < 1e-10);
            let ones = vec![1.0; q.n()];
            for x in q.weights().mul_vec(&ones).unwrap() {
                assert!((x - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn denser_erdos_renyi_has_smaller_beta() {
        let mean_beta = |p: f64| {
            (0..20u64)
                .map(|s| {
                    let g = build_erdos_renyi(20, p, &mut stream(s, StreamRole::Topology, &[]))
                        .unwrap();
                    mixing_from_laplacian(&g).unwrap().beta()
                })
                .sum::<f64>()
                / 20.0
        };
        assert!(mean_beta(0.8) <= mean_beta(0.3));
    }

    #[test]
    fn gossip_converges_at_rate_beta() {
        let q = mixing_from_ring(&build_ring(10).unwrap()).unwrap();
        let mut x: Vec<f64> = (0..10).map(|i| ((i * 7) % 10) as f64).collect();
        let mean = x.iter().sum::<f64>() / 10.0;
        let dev = |v: &[f64]| v.iter().map(|a| (a - mean).powi(2)).sum::<f64>().sqrt();
        for _ in 0..60 {
            let next = q.weights().mul_vec(&x).unwrap();
            assert!(dev(&next) <= (q.beta() + 1e-9) * dev(&x) + 1e-300);
            x = next;
        }
        assert!(x.iter().all(|a| (a - mean).abs() < 1e-3));
    }

    #[test]
    fn topology_file_round_trip() {
        let q = mixing_from_ring(&build_ring(5).unwrap()).unwrap();
        let json = serde_json::to_string(&TopologyFile::from_mixing(&q)).unwrap();
        let back: TopologyFile = serde_json::from_str(&json).unwrap();
        let q2 = back.to_mixing().unwrap();
        assert_eq!(q2.weights(), q.weights());
        assert_eq!(q2.kind(), MixingKind::Explicit);

        let no_weights = TopologyFile {
            n: 4,
            edges: vec![(0, 1), (1, 2), (2, 3)],
            weights: None,
        };
        assert_eq!(
            no_weights.to_mixing().unwrap().kind(),
            MixingKind::MetropolisHastings
        );
        assert!(serde_json::from_str::<Graph>(r#"{"n":3,"edges":[[0,1]]}"#).is_err());
    }
}
