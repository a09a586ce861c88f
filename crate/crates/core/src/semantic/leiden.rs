//! Leiden community detection (local move, refinement, aggregation) on a
//! weighted undirected graph under CPM or resolution-scaled modularity.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::knn::EntityGraph;
use crate::error::{Error, Result};

const EPS: f64 = 1e-10;
const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Constant Potts Model; gamma is multiplied by the mean edge weight.
    #[default]
    Cpm,
    Modularity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeidenParams {
    pub gamma: f64,
    pub seed: u64,
    #[serde(default)]
    pub objective: Objective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub gamma: f64,
    pub seed: u64,
    pub objective: Objective,
    /// Node index to cluster id; ids are dense and ordered by smallest member.
    pub assignment: Vec<usize>,
    pub quality: f64,
    /// Objective after each outer iteration, starting from singletons.
    pub trace: Vec<f64>,
}

impl Clustering {
    pub fn num_clusters(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }

    /// Members of each cluster, ascending.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters()];
        for (v, &c) in self.assignment.iter().enumerate() {
            out[c].push(v);
        }
        out
    }
}

/// Per-node weight and the lambda multiplying the community-weight penalty.
fn penalty(graph: &EntityGraph, objective: Objective, gamma: f64) -> (Vec<f64>, f64) {
    match objective {
        Objective::Cpm => (
            vec![1.0; graph.nodes],
            effective_resolution(graph, objective, gamma),
        ),
        Objective::Modularity => {
            let mut strength = vec![0.0; graph.nodes];
            for e in &graph.edges {
                strength[e.a] += e.w;
                strength[e.b] += e.w;
            }
            let m = graph.total_weight();
            (strength, if m > 0.0 { gamma / (2.0 * m) } else { 0.0 })
        }
    }
}

/// Resolution actually used by the objective. For CPM this is gamma times the
/// mean edge weight (plain gamma on an edgeless graph).
pub fn effective_resolution(graph: &EntityGraph, objective: Objective, gamma: f64) -> f64 {
    match objective {
        Objective::Cpm => gamma * graph.mean_weight().unwrap_or(1.0),
        Objective::Modularity => gamma,
    }
}

/// Objective value of `assignment` on the original graph.
///
/// CPM: sum over clusters of internal weight minus gamma_eff * n(n-1)/2.
/// Modularity: internal weight minus gamma * K^2 / 4m, K the strength total.
pub fn quality(graph: &EntityGraph, assignment: &[usize], objective: Objective, gamma: f64) -> f64 {
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    let mut internal = vec![0.0; k];
    for e in &graph.edges {
        if assignment[e.a] == assignment[e.b] {
            internal[assignment[e.a]] += e.w;
        }
    }
    let e_total: f64 = internal.iter().sum();
    match objective {
        Objective::Cpm => {
            let g = effective_resolution(graph, objective, gamma);
            let mut sizes = vec![0.0f64; k];
            for &c in assignment {
                sizes[c] += 1.0;
            }
            e_total - g * sizes.iter().map(|n| n * (n - 1.0) / 2.0).sum::<f64>()
        }
        Objective::Modularity => {
            let m = graph.total_weight();
            if m == 0.0 {
                return 0.0;
            }
            let (strength, _) = penalty(graph, objective, gamma);
            let mut kc = vec![0.0; k];
            for (v, &c) in assignment.iter().enumerate() {
                kc[c] += strength[v];
            }
            e_total - gamma * kc.iter().map(|x| x * x).sum::<f64>() / (4.0 * m)
        }
    }
}

/// Relabel so ids are dense and ordered by smallest member index.
pub fn renumber(assignment: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    assignment
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    weight: Vec<f64>,
}

impl Level {
    fn len(&self) -> usize {
        self.adj.len()
    }

    /// Collapse nodes by `part` (dense ids); returns the new level.
    fn aggregate(&self, part: &[usize]) -> Level {
        let k = part.iter().max().map_or(0, |m| m + 1);
        let mut weight = vec![0.0; k];
        let mut edges: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); k];
        for v in 0..self.len() {
            weight[part[v]] += self.weight[v];
            for &(u, w) in &self.adj[v] {
                let (a, b) = (part[v], part[u]);
                if a != b {
                    *edges[a].entry(b).or_insert(0.0) += w;
                }
            }
        }
        Level {
            adj: edges.into_iter().map(|m| m.into_iter().collect()).collect(),
            weight,
        }
    }
}

fn distinct(part: &[usize]) -> usize {
    let mut seen = vec![false; part.len()];
    part.iter().filter(|&&c| !std::mem::replace(&mut seen[c], true)).count()
}

/// Queue-based local moving. Nodes only move on a strictly positive gain;
/// equal-gain targets resolve to the lowest community id.
fn move_nodes(level: &Level, comm: &mut [usize], lambda: f64, rng: &mut ChaCha8Rng) {
    let n = level.len();
    let mut cweight = vec![0.0; n];
    let mut csize = vec![0usize; n];
    for v in 0..n {
        cweight[comm[v]] += level.weight[v];
        csize[comm[v]] += 1;
    }
    let mut empty: Vec<usize> = (0..n).rev().filter(|&c| csize[c] == 0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into();
    let mut queued = vec![true; n];
    let mut kvc = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();

    while let Some(v) = queue.pop_front() {
        queued[v] = false;
        let wv = level.weight[v];
        let a = comm[v];
        for &(u, w) in &level.adj[v] {
            let c = comm[u];
            if kvc[c] == 0.0 {
                touched.push(c);
            }
            kvc[c] += w;
        }
        cweight[a] -= wv;
        csize[a] -= 1;
        if csize[a] == 0 {
            empty.push(a);
        }
        let stay = kvc[a] - lambda * wv * cweight[a];

        let mut cands = touched.clone();
        if let Some(&e) = empty.last() {
            cands.push(e);
        }
        cands.sort_unstable();
        cands.dedup();
        let mut best: Option<(usize, f64)> = None;
        for c in cands {
            if c == a {
                continue;
            }
            let gain = kvc[c] - lambda * wv * cweight[c];
            if best.is_none_or(|(_, g)| gain > g + EPS) {
                best = Some((c, gain));
            }
        }
        let target = match best {
            Some((c, g)) if g > stay + EPS => c,
            _ => a,
        };

        if csize[target] == 0 {
            if let Some(pos) = empty.iter().rposition(|&c| c == target) {
                empty.remove(pos);
            }
        }
        comm[v] = target;
        cweight[target] += wv;
        csize[target] += 1;
        if target != a {
            for &(u, _) in &level.adj[v] {
                if comm[u] != target && !queued[u] {
                    queued[u] = true;
                    queue.push_back(u);
                }
            }
        }
        for c in touched.drain(..) {
            kvc[c] = 0.0;
        }
    }
}

/// Greedy refinement inside each community of `comm`. Starts from
/// singletons; a node that is still a singleton and well connected to its
/// community may join a well-connected refined subset with the best positive
/// gain.
fn refine(level: &Level, comm: &[usize], lambda: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = level.len();
    let mut cweight = vec![0.0; n];
    for v in 0..n {
        cweight[comm[v]] += level.weight[v];
    }
    // weight from v to the rest of its community
    let kin: Vec<f64> = (0..n)
        .map(|v| {
            level.adj[v]
                .iter()
                .filter(|&&(u, _)| comm[u] == comm[v])
                .map(|&(_, w)| w)
                .sum()
        })
        .collect();
    let mut refined: Vec<usize> = (0..n).collect();
    let mut rweight = level.weight.clone();
    let mut rsize = vec![1usize; n];
    let mut ext = kin.clone();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut kvt = vec![0.0; n];
    let mut touched = Vec::new();
    for v in order {
        if rsize[refined[v]] != 1 {
            continue;
        }
        let c = comm[v];
        let wv = level.weight[v];
        if kin[v] + EPS < lambda * wv * (cweight[c] - wv) {
            continue;
        }
        for &(u, w) in &level.adj[v] {
            if comm[u] == c && refined[u] != refined[v] {
                let t = refined[u];
                if kvt[t] == 0.0 {
                    touched.push(t);
                }
                kvt[t] += w;
            }
        }
        touched.sort_unstable();
        let mut best: Option<(usize, f64)> = None;
        for &t in &touched {
            let well_connected = ext[t] + EPS >= lambda * rweight[t] * (cweight[c] - rweight[t]);
            if !well_connected {
                continue;
            }
            let gain = kvt[t] - lambda * wv * rweight[t];
            if gain > EPS && best.is_none_or(|(_, g)| gain > g + EPS) {
                best = Some((t, gain));
            }
        }
        if let Some((t, _)) = best {
            let old = refined[v];
            rsize[old] = 0;
            rweight[old] = 0.0;
            ext[t] += kin[v] - 2.0 * kvt[t];
            refined[v] = t;
            rweight[t] += wv;
            rsize[t] += 1;
        }
        for t in touched.drain(..) {
            kvt[t] = 0.0;
        }
    }
    refined
}

/// One full Leiden pass starting from `init` on the base level.
fn leiden_pass(base: &Level, init: &[usize], lambda: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut to_level: Vec<usize> = (0..base.len()).collect();
    let mut comm = renumber(init);
    let mut level_store;
    let mut level = base;
    loop {
        move_nodes(level, &mut comm, lambda, rng);
        comm = renumber(&comm);
        if distinct(&comm) == level.len() {
            break;
        }
        let refined = renumber(&refine(level, &comm, lambda, rng));
        let by = if distinct(&refined) == level.len() {
            comm.clone()
        } else {
            refined
        };
        let next = level.aggregate(&by);
        let mut next_comm = vec![0; next.len()];
        for v in 0..level.len() {
            next_comm[by[v]] = comm[v];
        }
        for slot in to_level.iter_mut() {
            *slot = by[*slot];
        }
        comm = renumber(&next_comm);
        level_store = next;
        level = &level_store;
    }
    to_level.iter().map(|&l| comm[l]).collect()
}

pub fn leiden_cluster(graph: &EntityGraph, params: &LeidenParams) -> Result<Clustering> {
    if !(params.gamma > 0.0 && params.gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive, got {}", params.gamma)));
    }
    let (weight, lambda) = penalty(graph, params.objective, params.gamma);
    let base = Level {
        adj: graph.adjacency(),
        weight,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut assignment: Vec<usize> = (0..graph.nodes).collect();
    let q = |a: &[usize]| quality(graph, a, params.objective, params.gamma);
    let mut trace = vec![q(&assignment)];
    for _ in 0..MAX_ITERATIONS {
        let next = renumber(&leiden_pass(&base, &assignment, lambda, &mut rng));
        trace.push(q(&next));
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(Clustering {
        gamma: params.gamma,
        seed: params.seed,
        objective: params.objective,
        quality: q(&assignment),
        assignment,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub clusters: usize,
    pub quality: f64,
}

pub fn resolution_sweep(
    graph: &EntityGraph,
    gammas: &[f64],
    seed: u64,
    objective: Objective,
) -> Result<Vec<SweepRow>> {
    gammas
        .iter()
        .map(|&gamma| {
            let c = leiden_cluster(graph, &LeidenParams { gamma, seed, objective })?;
            Ok(SweepRow {
                gamma,
                clusters: c.num_clusters(),
                quality: c.quality,
            })
        })
        .collect()
}
