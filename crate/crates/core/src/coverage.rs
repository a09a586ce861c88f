//! Coverage of the semantic clusters by an evaluation query set, and the
//! running coverage state used by query generation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Qrels;
use crate::error::{Error, Result};
use crate::semantic::{ClusterMaps, ClusterSet};
use crate::stratification::{Regimes, StructuralSignals};

pub const DEFAULT_SCC_THRESHOLD: usize = 5;

/// Clusters touched by at least one query's own cluster set C(q).
pub fn touched<'a>(query_clusters: impl IntoIterator<Item = &'a ClusterSet>) -> ClusterSet {
    query_clusters.into_iter().flatten().copied().collect()
}

pub fn msc<'a>(query_clusters: impl IntoIterator<Item = &'a ClusterSet>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("coverage needs at least one cluster"));
    }
    Ok(touched(query_clusters).len() as f64 / k as f64)
}

pub fn zqc<'a>(query_clusters: impl IntoIterator<Item = &'a ClusterSet>, k: usize) -> usize {
    k - touched(query_clusters).iter().filter(|&&c| c < k).count()
}

/// Per-cluster count of queries with at least one relevant document in the
/// cluster (a query counts once per cluster).
pub fn relevant_doc_query_counts(qrels: &Qrels, maps: &ClusterMaps, k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for q in qrels.query_ids() {
        for c in maps.docs_union(qrels.relevant(q)) {
            if c < k {
                counts[c] += 1;
            }
        }
    }
    counts
}

/// Fraction of documents with at least one cluster holding >= `threshold`
/// queries. Each document is counted once.
pub fn scc(query_counts: &[usize], doc_clusters: &BTreeMap<String, ClusterSet>, threshold: usize) -> f64 {
    if doc_clusters.is_empty() {
        return 0.0;
    }
    let qualifying = |c: &usize| query_counts.get(*c).is_some_and(|&n| n >= threshold);
    let hits = doc_clusters.values().filter(|cs| cs.iter().any(qualifying)).count();
    hits as f64 / doc_clusters.len() as f64
}

/// Modal cluster over the relevant documents' cluster multiset; ties go to
/// the lowest id.
pub fn primary_cluster<'a>(docs: impl IntoIterator<Item = &'a str>, maps: &ClusterMaps) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for d in docs {
        for &c in maps.doc(d) {
            *counts.entry(c).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(usize, usize)>, (c, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((c, n)),
        })
        .map(|(c, _)| c)
}

pub fn primary_clusters(qrels: &Qrels, maps: &ClusterMaps) -> BTreeMap<String, usize> {
    qrels
        .query_ids()
        .filter_map(|q| primary_cluster(qrels.relevant(q), maps).map(|c| (q.to_string(), c)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub cluster_id: usize,
    pub label: String,
    pub doc_count: usize,
    pub query_count: usize,
    pub mean_metric: Option<f64>,
}

/// Per cluster: documents, queries whose primary cluster it is, and their
/// mean metric (absent without queries). Documents in several clusters are
/// counted in each.
pub fn cluster_scatter(
    maps: &ClusterMaps,
    primary: &BTreeMap<String, usize>,
    metric: &BTreeMap<String, f64>,
    labels: &[String],
) -> Vec<ScatterRow> {
    let k = maps.num_clusters;
    let mut docs = vec![0; k];
    for cs in maps.doc_clusters.values() {
        for &c in cs {
            if c < k {
                docs[c] += 1;
            }
        }
    }
    let mut queries = vec![0; k];
    let mut sums = vec![0.0; k];
    let mut scored = vec![0usize; k];
    for (q, &c) in primary {
        if c >= k {
            continue;
        }
        queries[c] += 1;
        if let Some(v) = metric.get(q) {
            sums[c] += v;
            scored[c] += 1;
        }
    }
    (0..k)
        .map(|c| ScatterRow {
            cluster_id: c,
            label: labels.get(c).cloned().unwrap_or_default(),
            doc_count: docs[c],
            query_count: queries[c],
            mean_metric: (scored[c] > 0).then(|| sums[c] / scored[c] as f64),
        })
        .collect()
}

pub fn write_scatter_csv(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    crate::io::write_string(path, &String::from_utf8_lossy(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub msc: f64,
    pub scc: f64,
    pub zqc: usize,
    pub threshold: usize,
    pub num_clusters: usize,
    pub per_cluster: Vec<ClusterCoverage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCoverage {
    pub cluster_id: usize,
    pub label: String,
    pub doc_count: usize,
    /// Queries whose C(q) contains the cluster.
    pub touching_queries: usize,
    /// Queries with a relevant document in the cluster.
    pub relevant_doc_queries: usize,
}

pub fn coverage_report(qrels: &Qrels, maps: &ClusterMaps, labels: &[String], threshold: usize) -> Result<CoverageReport> {
    let k = maps.num_clusters;
    let judged: Vec<&ClusterSet> = qrels.query_ids().map(|q| maps.query(q)).collect();
    let rel_counts = relevant_doc_query_counts(qrels, maps, k);
    let mut touching = vec![0; k];
    for cs in &judged {
        for &c in *cs {
            if c < k {
                touching[c] += 1;
            }
        }
    }
    let mut docs = vec![0; k];
    for cs in maps.doc_clusters.values() {
        for &c in cs {
            if c < k {
                docs[c] += 1;
            }
        }
    }
    Ok(CoverageReport {
        msc: msc(judged.iter().copied(), k)?,
        scc: scc(&rel_counts, &maps.doc_clusters, threshold),
        zqc: zqc(judged.iter().copied(), k),
        threshold,
        num_clusters: k,
        per_cluster: (0..k)
            .map(|c| ClusterCoverage {
                cluster_id: c,
                label: labels.get(c).cloned().unwrap_or_default(),
                doc_count: docs[c],
                touching_queries: touching[c],
                relevant_doc_queries: rel_counts[c],
            })
            .collect(),
    })
}

/// What the generation loop records per accepted query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub signals: StructuralSignals,
    /// Clusters of the relevant documents.
    pub doc_clusters: ClusterSet,
}

/// Running coverage counts. Raw signals are kept so buckets can be rebinned
/// when boundaries move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageState {
    pub num_clusters: usize,
    /// Queries with a relevant document in each cluster.
    pub cluster_queries: Vec<usize>,
    pub n_delta: Vec<usize>,
    pub n_jaccard: Vec<usize>,
    pub covered: ClusterSet,
    pub regimes: Regimes,
    pub records: Vec<StateRecord>,
}

impl CoverageState {
    pub fn new(num_clusters: usize, regimes: Regimes) -> Self {
        Self {
            num_clusters,
            cluster_queries: vec![0; num_clusters],
            n_delta: vec![0; regimes.delta.buckets()],
            n_jaccard: vec![0; regimes.jaccard.buckets()],
            covered: ClusterSet::new(),
            regimes,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn update(&mut self, record: StateRecord) {
        let (db, jb) = self.regimes.buckets_of(&record.signals);
        if let Some(b) = db {
            self.n_delta[b] += 1;
        }
        if let Some(b) = jb {
            self.n_jaccard[b] += 1;
        }
        for &c in &record.doc_clusters {
            if c < self.num_clusters {
                self.cluster_queries[c] += 1;
                self.covered.insert(c);
            }
        }
        self.records.push(record);
    }

    /// Swap in new boundaries and recount buckets from the stored raw values.
    pub fn rebin(&mut self, regimes: Regimes) {
        self.n_delta = vec![0; regimes.delta.buckets()];
        self.n_jaccard = vec![0; regimes.jaccard.buckets()];
        for r in &self.records {
            let (db, jb) = regimes.buckets_of(&r.signals);
            if let Some(b) = db {
                self.n_delta[b] += 1;
            }
            if let Some(b) = jb {
                self.n_jaccard[b] += 1;
            }
        }
        self.regimes = regimes;
    }

    /// Refit boundaries over every stored record. Keeps the current ones if
    /// there are too few defined values.
    pub fn refresh(&mut self, buckets: usize) {
        match Regimes::fit(self.records.iter().map(|r| &r.signals), buckets) {
            Ok(r) => self.rebin(r),
            Err(e) => log::warn!("keeping previous boundaries: {e}"),
        }
    }
}

/// Per-bucket shortfall against an even share: max(0, 1/B - n_b / total),
/// and 1/B for every bucket before anything is counted.
pub fn deficits(counts: &[usize]) -> Vec<f64> {
    let b = counts.len().max(1) as f64;
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&n| {
            if total == 0 {
                1.0 / b
            } else {
                (1.0 / b - n as f64 / total as f64).max(0.0)
            }
        })
        .collect()
}
