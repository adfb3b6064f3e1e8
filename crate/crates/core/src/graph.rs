//! Graph topology, per-step graph state and edge-noise perturbation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use pmp_autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{PmpError, Result};
use crate::nn::Mlp;

/// Fixed set of directed edges over `n_nodes` nodes.
///
/// Edge `e = (src, dst)` carries a message from `src` into `dst`; the
/// incoming list of a node holds the ids of edges ending there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    src: Vec<usize>,
    dst: Vec<usize>,
    incoming: Vec<Vec<usize>>,
}

impl GraphTopology {
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(edges.len());
        for &(s, d) in &edges {
            if s >= n_nodes || d >= n_nodes {
                return Err(PmpError::Graph(format!(
                    "edge ({s}, {d}) has an endpoint outside 0..{n_nodes}"
                )));
            }
            if s == d {
                return Err(PmpError::Graph(format!("self-loop on node {s}")));
            }
            if !seen.insert((s, d)) {
                return Err(PmpError::Graph(format!("duplicate edge ({s}, {d})")));
            }
        }
        let mut incoming = vec![Vec::new(); n_nodes];
        for (e, &(_, d)) in edges.iter().enumerate() {
            incoming[d].push(e);
        }
        Ok(Self {
            n_nodes,
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
            edges,
            incoming,
        })
    }

    /// Every ordered pair of distinct nodes, in lexicographic order.
    pub fn fully_connected(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(PmpError::Graph(format!(
                "a fully connected graph needs at least 2 nodes, got {n}"
            )));
        }
        let edges = (0..n)
            .flat_map(|s| (0..n).filter(move |&d| d != s).map(move |d| (s, d)))
            .collect();
        Self::new(n, edges)
    }

    /// Builds directed edges from an undirected pair list, keeping both
    /// directions and dropping self-loops and repeats.
    pub fn from_undirected(n_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut edges = Vec::with_capacity(2 * pairs.len());
        for &(a, b) in pairs {
            if a == b {
                continue;
            }
            for e in [(a, b), (b, a)] {
                if seen.insert(e) {
                    edges.push(e);
                }
            }
        }
        Self::new(n_nodes, edges)
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Source node of every edge.
    pub fn sources(&self) -> &[usize] {
        &self.src
    }

    /// Destination node of every edge.
    pub fn targets(&self) -> &[usize] {
        &self.dst
    }

    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.incoming[node].len()
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.incoming[dst].iter().any(|&e| self.src[e] == src)
    }

    /// Copy with `⌊ratio·|E|⌋` extra directed edges drawn uniformly without
    /// replacement from the absent, non-self-loop pairs. Original edges keep
    /// their ids; new edges are appended in draw order.
    pub fn add_noise_edges(&self, ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(ratio >= 0.0) || !ratio.is_finite() {
            return Err(PmpError::InvalidArgument(format!(
                "noise ratio must be a finite non-negative number, got {ratio}"
            )));
        }
        let extra = (ratio * self.n_edges() as f64).floor() as usize;
        let n = self.n_nodes;
        let absent = n * n.saturating_sub(1) - self.n_edges();
        if extra > absent {
            return Err(PmpError::Graph(format!(
                "cannot add {extra} noise edges: only {absent} absent pairs"
            )));
        }
        let mut present: HashSet<(usize, usize)> = self.edges.iter().copied().collect();
        let mut edges = self.edges.clone();
        if extra * 4 <= absent {
            while edges.len() < self.n_edges() + extra {
                let s = rng.random_range(0..n);
                let d = rng.random_range(0..n);
                if s != d && present.insert((s, d)) {
                    edges.push((s, d));
                }
            }
        } else {
            let candidates: Vec<(usize, usize)> = (0..n)
                .flat_map(|s| (0..n).map(move |d| (s, d)))
                .filter(|&(s, d)| s != d && !present.contains(&(s, d)))
                .collect();
            for i in sample(rng, candidates.len(), extra) {
                edges.push(candidates[i]);
            }
        }
        Self::new(n, edges)
    }

    /// Renames node `i` to `perm[i]`; edge order is preserved.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_nodes {
            return Err(PmpError::Graph(format!(
                "permutation has {} entries for {} nodes",
                perm.len(),
                self.n_nodes
            )));
        }
        Self::new(
            self.n_nodes,
            self.edges
                .iter()
                .map(|&(s, d)| (perm[s], perm[d]))
                .collect(),
        )
    }

    /// Text form: `n_nodes n_edges` on the first line, then one `src dst`
    /// pair per line, 0-indexed.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{} {}\n", self.n_nodes, self.n_edges());
        for &(s, d) in &self.edges {
            let _ = writeln!(out, "{s} {d}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        Self::parse_edge_list(text, Path::new("<edge list>"))
    }

    fn parse_edge_list(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| PmpError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (ln, header) = lines
            .next()
            .ok_or_else(|| err(1, "empty edge list".into()))?;
        let nums = parse_pair(header).ok_or_else(|| err(ln, format!("bad header {header:?}")))?;
        let (n_nodes, n_edges) = nums;
        let mut edges = Vec::with_capacity(n_edges);
        for (ln, line) in lines {
            let e = parse_pair(line).ok_or_else(|| err(ln, format!("bad edge line {line:?}")))?;
            edges.push(e);
        }
        if edges.len() != n_edges {
            return Err(err(
                ln,
                format!("header promises {n_edges} edges, found {}", edges.len()),
            ));
        }
        Self::new(n_nodes, edges)
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list())
            .map_err(|e| PmpError::io(format!("writing {}", path.display()), e))
    }

    pub fn read_edge_list(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PmpError::io(format!("reading {}", path.display()), e))?;
        Self::parse_edge_list(&text, path)
    }
}

fn parse_pair(line: &str) -> Option<(usize, usize)> {
    let mut it = line.split_whitespace();
    let a = it.next()?.parse().ok()?;
    let b = it.next()?.parse().ok()?;
    it.next().is_none().then_some((a, b))
}

/// Node attributes `V` (`N×Dv`), global attributes `u` (`1×Dv`) and the
/// number of message-passing steps taken so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphState {
    pub v: Var,
    pub u: Var,
    pub step: usize,
}

/// Row-wise MLP from raw node features to initial node attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEncoder {
    pub mlp: Mlp,
}

impl NodeEncoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        feature_dim: usize,
        node_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            mlp: Mlp::new(
                store,
                "encoder",
                &[feature_dim, node_dim, node_dim],
                true,
                rng,
            ),
        }
    }

    pub fn node_dim(&self) -> usize {
        self.mlp.out_dim()
    }
}

/// Initial graph state: `V` is the encoder applied to each feature row and
/// `u` starts at zero.
pub fn init_state<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    features: &Tensor<F>,
    topo: &GraphTopology,
    encoder: &NodeEncoder,
) -> Result<GraphState> {
    if features.rows() != topo.n_nodes() {
        return Err(PmpError::Shape(format!(
            "{} feature rows for {} nodes",
            features.rows(),
            topo.n_nodes()
        )));
    }
    if features.cols() != encoder.mlp.in_dim() {
        return Err(PmpError::Shape(format!(
            "feature width {} but encoder expects {}",
            features.cols(),
            encoder.mlp.in_dim()
        )));
    }
    let x = tape.constant(features.clone())?;
    let v = encoder.mlp.forward(tape, store, x)?;
    let u = tape.constant(Tensor::zeros(1, encoder.node_dim()))?;
    Ok(GraphState { v, u, step: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fully_connected_sizes() {
        assert_eq!(GraphTopology::fully_connected(3).unwrap().n_edges(), 6);
        assert_eq!(GraphTopology::fully_connected(25).unwrap().n_edges(), 600);
        assert_eq!(
            GraphTopology::fully_connected(2).unwrap().edges(),
            &[(0, 1), (1, 0)]
        );
        assert!(GraphTopology::fully_connected(1).is_err());
    }

    #[test]
    fn fully_connected_is_lexicographic() {
        let t = GraphTopology::fully_connected(5).unwrap();
        assert!(t.edges().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejects_invalid_edges() {
        assert!(GraphTopology::new(3, vec![(0, 0)]).is_err());
        assert!(GraphTopology::new(3, vec![(0, 1), (0, 1)]).is_err());
        assert!(GraphTopology::new(3, vec![(0, 3)]).is_err());
    }

    #[test]
    fn incoming_lists_edges_by_destination() {
        let t = GraphTopology::new(3, vec![(0, 1), (2, 1), (1, 0)]).unwrap();
        assert_eq!(t.incoming(1), &[0, 1]);
        assert_eq!(t.incoming(0), &[2]);
        assert_eq!(t.in_degree(2), 0);
    }

    fn ring(n: usize) -> GraphTopology {
        GraphTopology::new(n, (0..n).map(|i| (i, (i + 1) % n)).collect()).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let t = ring(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(t.add_noise_edges(0.0, &mut rng).unwrap(), t);
    }

    #[test]
    fn full_noise_doubles_edge_count() {
        let t = ring(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noisy = t.add_noise_edges(1.0, &mut rng).unwrap();
        assert_eq!(noisy.n_edges(), 20);
        assert_eq!(&noisy.edges()[..10], t.edges());
    }

    #[test]
    fn noise_is_seeded() {
        let t = ring(12);
        let a = t
            .add_noise_edges(2.0, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let b = t
            .add_noise_edges(2.0, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_fails_without_room() {
        let t = GraphTopology::fully_connected(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(t.add_noise_edges(0.5, &mut rng).is_err());
        assert!(t.add_noise_edges(-1.0, &mut rng).is_err());
    }

    #[test]
    fn dense_noise_path_fills_the_graph() {
        // 3 nodes, 2 edges: 4 absent pairs, ratio 2 asks for all of them.
        let t = GraphTopology::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let full = t
            .add_noise_edges(2.0, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(full.n_edges(), 6);
    }

    #[test]
    fn edge_list_parse_errors_carry_line_numbers() {
        let err = GraphTopology::from_edge_list("3 2\n0 1\nx y\n").unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
        assert!(GraphTopology::from_edge_list("3 2\n0 1\n").is_err());
    }

    #[test]
    fn undirected_pairs_expand_to_both_directions() {
        let t = GraphTopology::from_undirected(3, &[(0, 1), (1, 0), (1, 2), (2, 2)]).unwrap();
        assert_eq!(t.edges(), &[(0, 1), (1, 0), (1, 2), (2, 1)]);
    }
}
