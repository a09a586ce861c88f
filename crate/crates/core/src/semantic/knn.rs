//! Sparse kNN similarity graph over unit-normalized embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::dot;

/// Above this many nodes `Backend::Auto` switches to the approximate index.
pub const DEFAULT_EXACT_LIMIT: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Backend {
    Exact,
    /// Random-hyperplane LSH with exact re-ranking of bucket candidates.
    Lsh { tables: usize, bits: usize, seed: u64 },
    Auto { exact_limit: usize },
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Auto {
            exact_limit: DEFAULT_EXACT_LIMIT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnParams {
    pub k: usize,
    pub tau: f64,
    pub backend: Backend,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self {
            k: 50,
            tau: 0.5,
            backend: Backend::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub w: f64,
}

/// Undirected weighted graph, each edge stored once with `a < b`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityGraph {
    pub nodes: usize,
    pub edges: Vec<Edge>,
}

impl EntityGraph {
    /// Build from (a, b, w) triples; pairs are canonicalized, duplicate
    /// pairs keep the last weight, self-loops are rejected.
    pub fn from_edges(nodes: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (a, b, w) in edges {
            if a == b || a >= nodes || b >= nodes {
                return Err(Error::invalid(format!("invalid edge ({a}, {b}) for {nodes} nodes")));
            }
            map.insert((a.min(b), a.max(b)), w);
        }
        Ok(Self {
            nodes,
            edges: map.into_iter().map(|((a, b), w)| Edge { a, b, w }).collect(),
        })
    }

    /// Symmetric adjacency lists sorted by neighbor.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes];
        for e in &self.edges {
            adj[e.a].push((e.b, e.w));
            adj[e.b].push((e.a, e.w));
        }
        for list in &mut adj {
            list.sort_by_key(|&(n, _)| n);
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes];
        for e in &self.edges {
            d[e.a] += 1;
            d[e.b] += 1;
        }
        d
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.w).sum()
    }

    pub fn mean_weight(&self) -> Option<f64> {
        if self.edges.is_empty() {
            None
        } else {
            Some(self.total_weight() / self.edges.len() as f64)
        }
    }

    /// Edges as JSONL `{"a","b","w"}`.
    pub fn save_edges(&self, path: &Path) -> Result<()> {
        crate::io::write_jsonl(path, &self.edges)
    }

    pub fn load_edges(path: &Path, nodes: usize) -> Result<Self> {
        let edges: Vec<Edge> = crate::io::read_jsonl(path)?;
        Self::from_edges(nodes, edges.into_iter().map(|e| (e.a, e.b, e.w)))
    }
}

/// Top-k neighbor search over a fixed set of unit vectors.
pub trait NeighborSearch: Sync {
    /// Up to `k` neighbors of `node` (excluding itself) with similarity
    /// >= `tau`, sorted by descending similarity then ascending index.
    fn neighbors(&self, node: usize, k: usize, tau: f64) -> Vec<(usize, f64)>;
}

pub struct ExactSearch<'a> {
    vectors: &'a [Vec<f32>],
}

impl<'a> ExactSearch<'a> {
    pub fn new(vectors: &'a [Vec<f32>]) -> Self {
        Self { vectors }
    }
}

fn top_k(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    scored.truncate(k);
    scored
}

impl NeighborSearch for ExactSearch<'_> {
    fn neighbors(&self, node: usize, k: usize, tau: f64) -> Vec<(usize, f64)> {
        let q = &self.vectors[node];
        let scored = self
            .vectors
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != node)
            .map(|(j, v)| (j, dot(q, v).min(1.0)))
            .filter(|&(_, s)| s >= tau)
            .collect();
        top_k(scored, k)
    }
}

/// Random-hyperplane LSH: `tables` hash tables of `bits` sign bits each.
pub struct LshSearch<'a> {
    vectors: &'a [Vec<f32>],
    codes: Vec<Vec<u64>>,
    buckets: Vec<BTreeMap<u64, Vec<usize>>>,
}

impl<'a> LshSearch<'a> {
    pub fn new(vectors: &'a [Vec<f32>], tables: usize, bits: usize, seed: u64) -> Self {
        let dims = vectors.first().map_or(0, Vec::len);
        let bits = bits.clamp(1, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes: Vec<Vec<Vec<f32>>> = (0..tables)
            .map(|_| {
                (0..bits)
                    .map(|_| (0..dims).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
                    .collect()
            })
            .collect();
        let codes: Vec<Vec<u64>> = vectors
            .par_iter()
            .map(|v| {
                planes
                    .iter()
                    .map(|table| {
                        table.iter().enumerate().fold(0u64, |code, (i, p)| {
                            if dot(v, p) >= 0.0 {
                                code | (1 << i)
                            } else {
                                code
                            }
                        })
                    })
                    .collect()
            })
            .collect();
        let mut buckets = vec![BTreeMap::new(); tables];
        for (node, node_codes) in codes.iter().enumerate() {
            for (t, &code) in node_codes.iter().enumerate() {
                buckets[t].entry(code).or_insert_with(Vec::new).push(node);
            }
        }
        Self {
            vectors,
            codes,
            buckets,
        }
    }
}

impl NeighborSearch for LshSearch<'_> {
    fn neighbors(&self, node: usize, k: usize, tau: f64) -> Vec<(usize, f64)> {
        let mut candidates = BTreeSet::new();
        for (t, &code) in self.codes[node].iter().enumerate() {
            if let Some(members) = self.buckets[t].get(&code) {
                candidates.extend(members.iter().copied().filter(|&j| j != node));
            }
        }
        let q = &self.vectors[node];
        let scored = candidates
            .into_iter()
            .map(|j| (j, dot(q, &self.vectors[j]).min(1.0)))
            .filter(|&(_, s)| s >= tau)
            .collect();
        top_k(scored, k)
    }
}

/// For each node keep its top-k neighbors with cosine >= tau, then
/// symmetrize by union.
pub fn build_knn_graph(vectors: &[Vec<f32>], params: &KnnParams) -> Result<EntityGraph> {
    if params.k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if !(-1.0..=1.0).contains(&params.tau) {
        return Err(Error::invalid(format!("tau {} outside [-1, 1]", params.tau)));
    }
    if let Some(dim) = vectors.first().map(Vec::len) {
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid("embeddings have inconsistent dimensions"));
        }
    }
    let backend = match params.backend {
        Backend::Auto { exact_limit } if vectors.len() > exact_limit => Backend::Lsh {
            tables: 8,
            bits: 12,
            seed: 0,
        },
        Backend::Auto { .. } => Backend::Exact,
        other => other,
    };
    let search: Box<dyn NeighborSearch> = match backend {
        Backend::Lsh { tables, bits, seed } => Box::new(LshSearch::new(vectors, tables, bits, seed)),
        _ => Box::new(ExactSearch::new(vectors)),
    };
    let lists: Vec<Vec<(usize, f64)>> = (0..vectors.len())
        .into_par_iter()
        .map(|i| search.neighbors(i, params.k, params.tau))
        .collect();
    EntityGraph::from_edges(
        vectors.len(),
        lists
            .into_iter()
            .enumerate()
            .flat_map(|(i, l)| l.into_iter().map(move |(j, w)| (i, j, w))),
    )
}
