//! The skeleton: a tree of joints rooted at the body center, its spatial
//! partition into root/centripetal/centrifugal neighbor sets, and the
//! degree-normalized adjacency of each subset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_SUBSETS: usize = 3;

/// Shipped graph templates, loadable by name.
pub const BUILTIN_GRAPHS: [&str; 2] = ["ntu25", "nwucla20"];

const NTU25_JSON: &str = include_str!("../data/ntu25.json");
const NWUCLA20_JSON: &str = include_str!("../data/nwucla20.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub num_joints: usize,
    pub center: usize,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SkeletonGraph {
    num_joints: usize,
    center: usize,
    edges: Vec<(usize, usize)>,
    /// BFS parent toward the center; None only at the center itself.
    parent: Vec<Option<usize>>,
    /// Hop distance from the center.
    dist: Vec<usize>,
}

impl SkeletonGraph {
    /// Validate an edge list and build the tree (parents, distances) by BFS
    /// from the center.
    pub fn build(edges: &[(usize, usize)], num_joints: usize, center: usize) -> Result<Self> {
        if num_joints < 2 {
            return Err(Error::validation(format!(
                "skeleton needs at least 2 joints, got {num_joints}"
            )));
        }
        if center >= num_joints {
            return Err(Error::validation(format!(
                "center joint {center} out of range for {num_joints} joints"
            )));
        }
        let mut adj = vec![Vec::new(); num_joints];
        for &(a, b) in edges {
            if a >= num_joints || b >= num_joints {
                return Err(Error::validation(format!(
                    "edge ({a}, {b}) out of range for {num_joints} joints"
                )));
            }
            if a == b {
                return Err(Error::validation(format!("self-loop at joint {a}")));
            }
            if adj[a].contains(&b) {
                return Err(Error::validation(format!("duplicate edge ({a}, {b})")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        if edges.len() + 1 != num_joints {
            let what = if edges.len() + 1 > num_joints { "a cycle" } else { "a disconnected graph" };
            return Err(Error::validation(format!(
                "{} edges over {num_joints} joints means {what}, not a tree",
                edges.len()
            )));
        }
        let mut parent = vec![None; num_joints];
        let mut dist = vec![usize::MAX; num_joints];
        let mut queue = std::collections::VecDeque::from([center]);
        dist[center] = 0;
        while let Some(j) = queue.pop_front() {
            for &nb in &adj[j] {
                if dist[nb] == usize::MAX {
                    dist[nb] = dist[j] + 1;
                    parent[nb] = Some(j);
                    queue.push_back(nb);
                }
            }
        }
        if let Some(unreached) = dist.iter().position(|&d| d == usize::MAX) {
            return Err(Error::validation(format!(
                "graph is disconnected: joint {unreached} unreachable from center {center}"
            )));
        }
        Ok(SkeletonGraph {
            num_joints,
            center,
            edges: edges.to_vec(),
            parent,
            dist,
        })
    }

    pub fn from_spec(spec: &GraphSpec) -> Result<Self> {
        SkeletonGraph::build(&spec.edges, spec.num_joints, spec.center)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: GraphSpec = serde_json::from_str(json)?;
        SkeletonGraph::from_spec(&spec)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let json = match name {
            "ntu25" => NTU25_JSON,
            "nwucla20" => NWUCLA20_JSON,
            _ => return None,
        };
        Some(SkeletonGraph::from_json(json).expect("shipped templates are valid"))
    }

    /// Resolve a graph reference: a builtin template name, or a path to a
    /// graph JSON file (relative paths resolved against `base`).
    pub fn resolve(graph_ref: &str, base: Option<&std::path::Path>) -> Result<Self> {
        if let Some(g) = SkeletonGraph::builtin(graph_ref) {
            return Ok(g);
        }
        let mut path = std::path::PathBuf::from(graph_ref);
        if path.is_relative() {
            if let Some(base) = base {
                path = base.join(path);
            }
        }
        let json = std::fs::read_to_string(&path).map_err(|e| {
            Error::validation(format!(
                "graph '{graph_ref}' is not a builtin ({}) and {} cannot be read: {e}",
                BUILTIN_GRAPHS.join(", "),
                path.display()
            ))
        })?;
        SkeletonGraph::from_json(&json)
    }

    pub fn spec(&self) -> GraphSpec {
        GraphSpec {
            num_joints: self.num_joints,
            center: self.center,
            edges: self.edges.clone(),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn dist_to_center(&self, joint: usize) -> usize {
        self.dist[joint]
    }

    /// Dense 0/1 adjacency (no self-loops).
    pub fn adjacency(&self) -> Tensor {
        let n = self.num_joints;
        let mut a = Tensor::zeros(&[n, n]);
        for &(i, j) in &self.edges {
            a.set(&[i, j], 1.0);
            a.set(&[j, i], 1.0);
        }
        a
    }

    /// Relabel joints: joint j becomes perm[j]. Used by permutation tests.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_joints {
            return Err(Error::validation("permutation length != joint count"));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::validation("not a permutation"));
            }
            seen[p] = true;
        }
        let edges: Vec<(usize, usize)> =
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        SkeletonGraph::build(&edges, self.num_joints, perm[self.center])
    }
}

/// The three spatial-configuration subsets of A+I, as 0/1 masks and their
/// normalized forms.
#[derive(Debug, Clone)]
pub struct PartitionedAdjacency {
    /// masks[0]: self loops (root). masks[1]: neighbors at most as far from
    /// the center as the receiving joint (centripetal; hop ties land here).
    /// masks[2]: neighbors farther from the center (centrifugal).
    /// mask[i][j] == 1 reads: receiver i listens to neighbor j.
    pub masks: [Tensor; NUM_SUBSETS],
    pub normalized: [Tensor; NUM_SUBSETS],
}

/// Split A+I by spatial configuration: self-loops, centripetal neighbors,
/// centrifugal neighbors. In a tree rooted at the center no neighbor pair is
/// equidistant, but the ≤ rule makes the tie choice explicit anyway.
pub fn spatial_partition(graph: &SkeletonGraph) -> PartitionedAdjacency {
    let n = graph.num_joints;
    let mut masks = [Tensor::zeros(&[n, n]), Tensor::zeros(&[n, n]), Tensor::zeros(&[n, n])];
    for i in 0..n {
        masks[0].set(&[i, i], 1.0);
    }
    for &(a, b) in &graph.edges {
        for (recv, nb) in [(a, b), (b, a)] {
            if graph.dist[nb] <= graph.dist[recv] {
                masks[1].set(&[recv, nb], 1.0);
            } else {
                masks[2].set(&[recv, nb], 1.0);
            }
        }
    }
    let normalized = [
        normalize_adjacency(&masks[0]),
        normalize_adjacency(&masks[1]),
        normalize_adjacency(&masks[2]),
    ];
    PartitionedAdjacency { masks, normalized }
}

/// Symmetric-style degree normalization that also covers asymmetric masks:
/// out[i,j] = a[i,j] / (√row_degree(i) · √col_degree(j)). Rows or columns
/// with zero degree stay zero. Symmetric input gives the usual
/// Λ^{-1/2}·A·Λ^{-1/2} and a symmetric result.
pub fn normalize_adjacency(mask: &Tensor) -> Tensor {
    assert_eq!(mask.rank(), 2, "adjacency must be a matrix");
    let n = mask.shape()[0];
    assert_eq!(mask.shape()[1], n, "adjacency must be square");
    let mut row_deg = vec![0.0; n];
    let mut col_deg = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let v = mask.at(&[i, j]);
            row_deg[i] += v;
            col_deg[j] += v;
        }
    }
    let inv_sqrt = |d: f64| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 };
    let ri: Vec<f64> = row_deg.iter().map(|&d| inv_sqrt(d)).collect();
    let ci: Vec<f64> = col_deg.iter().map(|&d| inv_sqrt(d)).collect();
    Tensor::from_fn(&[n, n], |ix| mask.at(ix) * ri[ix[0]] * ci[ix[1]])
}
