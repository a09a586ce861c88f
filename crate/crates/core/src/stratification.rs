//! Structural signals per query (dispersion and alignment), their ordinal
//! buckets, and the variance-reduction diagnostic.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Qrels;
use crate::error::{Error, Result};
use crate::semantic::{ClusterMaps, ClusterSet};
use crate::stats;

pub const DEFAULT_BUCKETS: usize = 3;

/// Dispersion: distinct clusters over summed cluster counts across the
/// relevant documents. Documents with no cluster are skipped and counted in
/// the second return value. `None` when nothing remains.
pub fn dispersion<'a>(doc_clusters: impl IntoIterator<Item = &'a ClusterSet>) -> (Option<f64>, usize) {
    let mut union = ClusterSet::new();
    let mut total = 0usize;
    let mut skipped = 0usize;
    for c in doc_clusters {
        if c.is_empty() {
            skipped += 1;
            continue;
        }
        total += c.len();
        union.extend(c.iter().copied());
    }
    let value = (total > 0).then(|| union.len() as f64 / total as f64);
    (value, skipped)
}

/// Jaccard of the query's clusters and its relevant documents' clusters.
pub fn alignment(query: &ClusterSet, docs: &ClusterSet) -> Option<f64> {
    let union = query.union(docs).count();
    if union == 0 {
        return None;
    }
    Some(query.intersection(docs).count() as f64 / union as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuralSignals {
    pub delta: Option<f64>,
    pub jaccard: Option<f64>,
    pub n_rel: usize,
    /// Relevant documents left out of dispersion for having no cluster.
    pub unclustered_docs: usize,
}

impl StructuralSignals {
    pub fn flags(&self) -> &'static str {
        match (self.delta.is_some(), self.jaccard.is_some()) {
            (true, true) => "ok",
            (false, true) => "delta_undefined",
            (true, false) => "jaccard_undefined",
            (false, false) => "undefined",
        }
    }
}

/// Signals from a relevant-document set and the query's own clusters.
pub fn signals_from(docs: &[&str], query_clusters: &ClusterSet, maps: &ClusterMaps) -> StructuralSignals {
    let (delta, unclustered_docs) = dispersion(docs.iter().map(|d| maps.doc(d)));
    let doc_union = maps.docs_union(docs.iter().copied());
    StructuralSignals {
        delta,
        jaccard: alignment(query_clusters, &doc_union),
        n_rel: docs.len(),
        unclustered_docs,
    }
}

/// Signals for every judged query in `qrels`.
pub fn compute_signals(qrels: &Qrels, maps: &ClusterMaps) -> BTreeMap<String, StructuralSignals> {
    qrels
        .query_ids()
        .map(|q| {
            let docs: Vec<&str> = qrels.relevant(q).into_iter().collect();
            (q.to_string(), signals_from(&docs, maps.query(q), maps))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Delta,
    Jaccard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketBoundaries {
    pub signal: Signal,
    /// Strictly ascending cut points.
    pub cuts: Vec<f64>,
}

impl BucketBoundaries {
    /// Fixed cuts at 1/B, 2/B, ... used before any data is seen.
    pub fn uniform(signal: Signal, buckets: usize) -> Self {
        Self {
            signal,
            cuts: (1..buckets).map(|i| i as f64 / buckets as f64).collect(),
        }
    }

    pub fn buckets(&self) -> usize {
        self.cuts.len() + 1
    }

    /// Number of cut points <= x.
    pub fn bucket(&self, x: f64) -> usize {
        self.cuts.partition_point(|&c| c <= x)
    }
}

/// Nearest-rank cut points at i/B. Cuts at or below the minimum are dropped
/// and duplicates merged, shrinking the bucket count.
pub fn fit_boundaries(signal: Signal, values: &[f64], buckets: usize) -> Result<BucketBoundaries> {
    if buckets == 0 {
        return Err(Error::invalid("bucket count must be positive"));
    }
    if values.len() < buckets {
        return Err(Error::invalid(format!(
            "need at least {buckets} defined values to fit {signal:?} boundaries, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let min = sorted[0];
    let mut cuts: Vec<f64> = (1..buckets)
        .map(|i| sorted[(i * n).div_ceil(buckets).max(1) - 1])
        .filter(|&c| c > min)
        .collect();
    cuts.dedup();
    if cuts.len() + 1 < buckets {
        log::debug!(
            "{signal:?}: tied quantiles collapse {buckets} buckets to {}",
            cuts.len() + 1
        );
    }
    Ok(BucketBoundaries { signal, cuts })
}

/// Dispersion and alignment boundaries together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regimes {
    pub delta: BucketBoundaries,
    pub jaccard: BucketBoundaries,
}

impl Regimes {
    pub fn uniform(buckets: usize) -> Self {
        Self {
            delta: BucketBoundaries::uniform(Signal::Delta, buckets),
            jaccard: BucketBoundaries::uniform(Signal::Jaccard, buckets),
        }
    }

    /// Fit both signals over the defined values in `signals`.
    pub fn fit<'a>(signals: impl IntoIterator<Item = &'a StructuralSignals>, buckets: usize) -> Result<Self> {
        let (mut d, mut j) = (Vec::new(), Vec::new());
        for s in signals {
            d.extend(s.delta);
            j.extend(s.jaccard);
        }
        Ok(Self {
            delta: fit_boundaries(Signal::Delta, &d, buckets)?,
            jaccard: fit_boundaries(Signal::Jaccard, &j, buckets)?,
        })
    }

    pub fn buckets_of(&self, s: &StructuralSignals) -> (Option<usize>, Option<usize>) {
        (
            s.delta.map(|x| self.delta.bucket(x)),
            s.jaccard.map(|x| self.jaccard.bucket(x)),
        )
    }
}

/// Semantic cluster plus the two ordinal buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StratumKey {
    pub cluster: Option<usize>,
    pub delta_bucket: usize,
    pub jaccard_bucket: usize,
}

/// Between-group share of the population variance of `values`.
pub fn vrr<K: Ord + Clone>(values: &[f64], groups: &[K]) -> Result<f64> {
    if values.len() != groups.len() {
        return Err(Error::invalid("vrr needs one group per value"));
    }
    let split = stats::variance_split(values, groups)
        .ok_or_else(|| Error::invalid("vrr needs at least one value"))?;
    if split.groups < 2 {
        return Err(Error::invalid("vrr needs at least two non-empty groups"));
    }
    if split.total <= 0.0 {
        return Err(Error::invalid("vrr undefined: zero total variance"));
    }
    Ok((split.between / split.total).clamp(0.0, 1.0))
}

#[derive(Debug, Serialize)]
struct SignalRow<'a> {
    query_id: &'a str,
    delta: Option<f64>,
    jaccard: Option<f64>,
    delta_bucket: Option<usize>,
    jaccard_bucket: Option<usize>,
    n_rel: usize,
    defined_flags: &'a str,
}

/// `signals.csv` with buckets under `regimes`.
pub fn write_signals_csv(
    path: &Path,
    signals: &BTreeMap<String, StructuralSignals>,
    regimes: &Regimes,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (id, s) in signals {
        let (db, jb) = regimes.buckets_of(s);
        w.serialize(SignalRow {
            query_id: id,
            delta: s.delta,
            jaccard: s.jaccard,
            delta_bucket: db,
            jaccard_bucket: jb,
            n_rel: s.n_rel,
            defined_flags: s.flags(),
        })
        .map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    crate::io::write_string(path, &String::from_utf8_lossy(&bytes))
}
