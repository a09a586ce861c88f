//! Report sections and the plot-ready figure tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::stats;
use crate::stratification::{Regimes, StructuralSignals};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub mean: f64,
    pub count: usize,
}

/// Mean metric per (dispersion bucket, alignment bucket); `cells[d][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub delta_buckets: usize,
    pub jaccard_buckets: usize,
    pub cells: Vec<Vec<Option<GridCell>>>,
    /// Scored queries left out because a signal is undefined.
    pub skipped: usize,
}

pub fn structural_grid(
    values: &BTreeMap<String, f64>,
    signals: &BTreeMap<String, StructuralSignals>,
    regimes: &Regimes,
) -> Grid {
    let nd = regimes.delta.buckets();
    let nj = regimes.jaccard.buckets();
    let mut acc = vec![vec![(0.0, 0usize); nj]; nd];
    let mut skipped = 0;
    for (q, v) in values {
        match signals.get(q).map(|s| regimes.buckets_of(s)) {
            Some((Some(d), Some(j))) => {
                acc[d][j].0 += v;
                acc[d][j].1 += 1;
            }
            _ => skipped += 1,
        }
    }
    Grid {
        delta_buckets: nd,
        jaccard_buckets: nj,
        cells: acc
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|(s, n)| (n > 0).then(|| GridCell { mean: s / n as f64, count: n }))
                    .collect()
            })
            .collect(),
        skipped,
    }
}

/// Quartiles (type 7) with whiskers at the most extreme points inside
/// 1.5 IQR of the box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: usize,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = stats::quantile(&v, 0.25)?;
    let q3 = stats::quantile(&v, 0.75)?;
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|x| (lo..=hi).contains(x)).collect();
    Some(BoxStats {
        n: v.len(),
        min: v[0],
        q1,
        median: stats::quantile(&v, 0.5)?,
        q3,
        max: v[v.len() - 1],
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers: v.len() - inside.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotRow {
    pub system: String,
    pub metric: String,
    pub cluster_id: usize,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: usize,
}

impl BoxplotRow {
    pub fn new(system: &str, metric: &str, cluster_id: usize, s: BoxStats) -> Self {
        Self {
            system: system.into(),
            metric: metric.into(),
            cluster_id,
            n: s.n,
            min: s.min,
            q1: s.q1,
            median: s.median,
            q3: s.q3,
            max: s.max,
            whisker_low: s.whisker_low,
            whisker_high: s.whisker_high,
            outliers: s.outliers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScatterRow {
    pub system_a: String,
    pub system_b: String,
    pub metric: String,
    pub cluster_id: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub query_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateRow {
    pub system_a: String,
    pub system_b: String,
    pub metric: String,
    pub protocol: String,
    pub winrate_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub system: String,
    pub metric: String,
    pub delta_bucket: usize,
    pub jaccard_bucket: usize,
    pub mean: Option<f64>,
    pub count: usize,
}

pub fn grid_rows(system: &str, metric: &str, grid: &Grid) -> Vec<GridRow> {
    let mut rows = Vec::new();
    for (d, row) in grid.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            rows.push(GridRow {
                system: system.into(),
                metric: metric.into(),
                delta_bucket: d,
                jaccard_bucket: j,
                mean: cell.map(|c| c.mean),
                count: cell.map_or(0, |c| c.count),
            });
        }
    }
    rows
}

/// Per-cluster values of one system, keyed by primary cluster.
pub fn by_cluster(values: &BTreeMap<String, f64>, primary: &BTreeMap<String, usize>) -> BTreeMap<usize, Vec<f64>> {
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (q, v) in values {
        if let Some(&c) = primary.get(q) {
            out.entry(c).or_default().push(*v);
        }
    }
    out
}

/// Rows of the model-vs-model scatter: clusters where both systems have
/// scored queries.
pub fn model_scatter(
    names: (&str, &str),
    metric: &str,
    a: &BTreeMap<String, f64>,
    b: &BTreeMap<String, f64>,
    primary: &BTreeMap<String, usize>,
) -> Vec<ModelScatterRow> {
    let mut acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for (q, va) in a {
        if let (Some(vb), Some(&c)) = (b.get(q), primary.get(q)) {
            let e = acc.entry(c).or_default();
            e.0 += va;
            e.1 += vb;
            e.2 += 1;
        }
    }
    acc.into_iter()
        .map(|(c, (sa, sb, n))| ModelScatterRow {
            system_a: names.0.into(),
            system_b: names.1.into(),
            metric: metric.into(),
            cluster_id: c,
            mean_a: sa / n as f64,
            mean_b: sb / n as f64,
            query_count: n,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stratification::{BucketBoundaries, Signal};

    fn sig(d: f64, j: f64) -> StructuralSignals {
        StructuralSignals {
            delta: Some(d),
            jaccard: Some(j),
            n_rel: 1,
            unclustered_docs: 0,
        }
    }

    #[test]
    fn grid_reproduces_planted_means() {
        let regimes = Regimes::uniform(3);
        let centers = [1.0 / 6.0, 0.5, 5.0 / 6.0];
        let mut values = BTreeMap::new();
        let mut signals = BTreeMap::new();
        for d in 0..3 {
            for j in 0..3 {
                for r in 0..4 {
                    let id = format!("q{d}{j}{r}");
                    values.insert(id.clone(), 0.1 * j as f64 - 0.05 * d as f64 + 0.5);
                    signals.insert(id, sig(centers[d], centers[j]));
                }
            }
        }
        let g = structural_grid(&values, &signals, &regimes);
        for d in 0..3 {
            for j in 0..3 {
                let c = g.cells[d][j].unwrap();
                assert_eq!(c.count, 4);
                assert!((c.mean - (0.1 * j as f64 - 0.05 * d as f64 + 0.5)).abs() < 1e-12);
            }
        }
        assert_eq!(grid_rows("s", "m", &g).len(), 9);
    }

    #[test]
    fn single_bucket_grid_and_empty_cells() {
        let one = Regimes {
            delta: BucketBoundaries::uniform(Signal::Delta, 1),
            jaccard: BucketBoundaries::uniform(Signal::Jaccard, 1),
        };
        let values = BTreeMap::from([("a".to_string(), 0.3), ("b".to_string(), 0.5)]);
        let mut signals = BTreeMap::from([("a".to_string(), sig(0.2, 0.9))]);
        signals.insert("b".into(), StructuralSignals::default());
        let g = structural_grid(&values, &signals, &one);
        assert_eq!((g.delta_buckets, g.jaccard_buckets, g.skipped), (1, 1, 1));
        assert_eq!(g.cells[0][0].unwrap().count, 1);
        let g3 = structural_grid(&values, &signals, &Regimes::uniform(3));
        assert!(g3.cells[2][0].is_none());
    }

    #[test]
    fn box_whiskers_follow_iqr_rule() {
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        assert_eq!((b.whisker_low, b.whisker_high, b.outliers), (1.0, 4.0, 1));
        assert_eq!(b.max, 100.0);
        assert!(box_stats(&[]).is_none());
    }
}
