//! Per-query ranking metrics: nDCG@k, Recall@k and AP@k.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Qrels;
use crate::error::{Error, Result};
use crate::retrieval::Run;
use crate::stats;

pub type Grades = BTreeMap<String, u32>;

pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    /// gain(g) = g
    #[default]
    Linear,
    /// gain(g) = 2^g - 1
    Exponential,
}

impl Gain {
    fn of(self, g: u32) -> f64 {
        match self {
            Gain::Linear => g as f64,
            Gain::Exponential => 2f64.powi(g as i32) - 1.0,
        }
    }
}

fn discount(rank0: usize) -> f64 {
    (rank0 as f64 + 2.0).log2()
}

/// `None` when the ideal DCG is zero (no positive grade).
pub fn ndcg_at_k(ranked: &[&str], grades: &Grades, k: usize, gain: Gain) -> Option<f64> {
    let mut ideal: Vec<u32> = grades.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| gain.of(g) / discount(i)).sum();
    if idcg <= 0.0 {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain.of(grades.get(*d).copied().unwrap_or(0)) / discount(i))
        .sum();
    Some(dcg / idcg)
}

fn relevant_count(grades: &Grades) -> usize {
    grades.values().filter(|&&g| g > 0).count()
}

fn is_rel(grades: &Grades, d: &str) -> bool {
    grades.get(d).is_some_and(|&g| g > 0)
}

pub fn recall_at_k(ranked: &[&str], grades: &Grades, k: usize) -> Option<f64> {
    let total = relevant_count(grades);
    if total == 0 {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|d| is_rel(grades, d)).count();
    Some(hits as f64 / total as f64)
}

/// Precision summed at relevant ranks, over min(|D(q)|, k).
pub fn ap_at_k(ranked: &[&str], grades: &Grades, k: usize) -> Option<f64> {
    let total = relevant_count(grades);
    if total == 0 || k == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, d) in ranked.iter().take(k).enumerate() {
        if is_rel(grades, d) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total.min(k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Ndcg,
    Recall,
    Map,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub k: usize,
}

impl MetricSpec {
    pub fn eval(&self, ranked: &[&str], grades: &Grades, gain: Gain) -> Option<f64> {
        match self.kind {
            MetricKind::Ndcg => ndcg_at_k(ranked, grades, self.k, gain),
            MetricKind::Recall => recall_at_k(ranked, grades, self.k),
            MetricKind::Map => ap_at_k(ranked, grades, self.k),
        }
    }

    /// Parse a comma-separated list such as `ndcg@10,recall@100`.
    pub fn parse_list(s: &str) -> Result<Vec<MetricSpec>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            MetricKind::Ndcg => "ndcg",
            MetricKind::Recall => "recall",
            MetricKind::Map => "map",
        };
        write!(f, "{name}@{}", self.k)
    }
}

impl FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| Error::invalid(format!("metric {s:?} must look like name@k")))?;
        let kind = match name.to_ascii_lowercase().as_str() {
            "ndcg" => MetricKind::Ndcg,
            "recall" => MetricKind::Recall,
            "map" | "ap" => MetricKind::Map,
            other => return Err(Error::invalid(format!("unknown metric {other:?}"))),
        };
        let k: usize = k
            .parse()
            .map_err(|_| Error::invalid(format!("bad cutoff in {s:?}")))?;
        if k == 0 {
            return Err(Error::invalid("metric cutoff must be positive"));
        }
        Ok(Self { kind, k })
    }
}

impl Serialize for MetricSpecKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(&self.0)
    }
}

/// Map key wrapper so metric specs serialize as `ndcg@10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MetricSpecKey(pub MetricSpec);

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalTable {
    /// spec -> query id -> value, judged queries with a positive grade only.
    pub values: BTreeMap<MetricSpecKey, BTreeMap<String, f64>>,
    /// Judged queries without any positive grade.
    pub excluded: Vec<String>,
    /// Judged queries absent from the run; scored as an empty ranking.
    pub missing: Vec<String>,
    pub gain: Gain,
}

impl EvalTable {
    pub fn column(&self, spec: MetricSpec) -> Option<&BTreeMap<String, f64>> {
        self.values.get(&MetricSpecKey(spec))
    }
}

pub fn evaluate_run(run: &Run, qrels: &Qrels, specs: &[MetricSpec], gain: Gain) -> EvalTable {
    let mut table = EvalTable {
        gain,
        ..Default::default()
    };
    let empty = Vec::new();
    for q in qrels.query_ids() {
        let grades = qrels.grades(q).expect("judged query");
        if relevant_count(grades) == 0 {
            table.excluded.push(q.to_string());
            continue;
        }
        let ranking = run.get(q).unwrap_or_else(|| {
            table.missing.push(q.to_string());
            &empty
        });
        let ranked: Vec<&str> = ranking.iter().map(|(d, _)| d.as_str()).collect();
        for spec in specs {
            if let Some(v) = spec.eval(&ranked, grades, gain) {
                table
                    .values
                    .entry(MetricSpecKey(*spec))
                    .or_default()
                    .insert(q.to_string(), v);
            }
        }
    }
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Mean with a percentile bootstrap interval at `level` (e.g. 0.95).
pub fn bootstrap_mean(values: &[f64], resamples: usize, seed: u64, level: f64) -> Option<Summary> {
    let mean = stats::mean(values)?;
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Some(Summary {
        n,
        mean,
        ci_low: stats::quantile(&means, alpha).unwrap_or(mean),
        ci_high: stats::quantile(&means, 1.0 - alpha).unwrap_or(mean),
    })
}

/// `metrics.csv`: `query_id,metric,k,value`.
pub fn write_metrics_csv(path: &Path, table: &EvalTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["query_id", "metric", "k", "value"])
        .map_err(|e| Error::invalid(e.to_string()))?;
    for (spec, col) in &table.values {
        let name = spec.0.to_string();
        let metric = name.split('@').next().unwrap_or_default();
        for (q, v) in col {
            w.write_record([q.as_str(), metric, &spec.0.k.to_string(), &format!("{v:.6}")])
                .map_err(|e| Error::invalid(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    crate::io::write_string(path, &String::from_utf8_lossy(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grades(pairs: &[(&str, u32)]) -> Grades {
        pairs.iter().map(|(d, g)| (d.to_string(), *g)).collect()
    }

    #[test]
    fn ndcg_hand_example() {
        let g = grades(&[("a", 3), ("b", 0), ("c", 1)]);
        let v = ndcg_at_k(&["a", "b", "c"], &g, 10, Gain::Linear).unwrap();
        let expected = 3.5 / (3.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.9640).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&["a", "c"], &g, 10, Gain::Linear), Some(1.0));
        assert_eq!(ndcg_at_k(&["x"], &g, 10, Gain::Linear), Some(0.0));
        assert_eq!(ndcg_at_k(&["a"], &grades(&[("a", 0)]), 10, Gain::Linear), None);
    }

    #[test]
    fn exponential_gain() {
        let g = grades(&[("a", 1), ("b", 2)]);
        let v = ndcg_at_k(&["a", "b"], &g, 2, Gain::Exponential).unwrap();
        let expected = (1.0 + 3.0 / 3f64.log2()) / (3.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn recall_and_ap_examples() {
        let g = grades(&[("a", 1), ("b", 1), ("c", 1), ("d", 1)]);
        assert_eq!(recall_at_k(&["a", "x", "b"], &g, 10), Some(0.5));
        let g3 = grades(&[("a", 1), ("b", 1), ("c", 1)]);
        assert!((recall_at_k(&["a"], &g3, 100).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let g2 = grades(&[("a", 1), ("c", 1)]);
        assert!((ap_at_k(&["a", "b", "c"], &g2, 10).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(ap_at_k(&["a"], &grades(&[("a", 1)]), 10), Some(1.0));
        assert_eq!(ap_at_k(&["z"], &g2, 10), Some(0.0));
    }

    #[test]
    fn spec_parsing() {
        let specs = MetricSpec::parse_list("ndcg@10, recall@100,map@10").unwrap();
        assert_eq!(specs.len(), 3);
        assert_eq!(specs[1].to_string(), "recall@100");
        assert!("mrr@10".parse::<MetricSpec>().is_err());
        assert!("ndcg@0".parse::<MetricSpec>().is_err());
    }

    #[test]
    fn evaluate_and_bootstrap() {
        let mut qrels = Qrels::default();
        qrels.insert("q1", "a", 1);
        qrels.insert("q2", "b", 1);
        qrels.insert("q3", "c", 0);
        let run: Run = BTreeMap::from([("q1".to_string(), vec![("a".to_string(), 1.0)])]);
        let spec: MetricSpec = "ndcg@10".parse().unwrap();
        let t = evaluate_run(&run, &qrels, &[spec], Gain::Linear);
        let col = t.column(spec).unwrap();
        assert_eq!(col.values().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(t.excluded, vec!["q3".to_string()]);
        assert_eq!(t.missing, vec!["q2".to_string()]);
        let s = bootstrap_mean(&[1.0, 0.0], 200, 1, 0.95).unwrap();
        assert_eq!(s.mean, 0.5);
        assert_eq!(bootstrap_mean(&[1.0, 0.0], 200, 1, 0.95), Some(s));
        let c = bootstrap_mean(&[0.4; 7], 100, 3, 0.95).unwrap();
        assert_eq!(c.ci_high - c.ci_low, 0.0);
    }
}
