//! Small descriptive statistics shared by the analysis modules.

use std::collections::BTreeMap;

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Population variance (divides by n).
pub fn variance(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    Some(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64)
}

/// Nearest-rank quantile of ascending `sorted`: element at rank ceil(p * n).
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Linear-interpolated quantile (type 7), used for summaries and plots.
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Law-of-total-variance split of `values` by group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceSplit {
    pub total: f64,
    pub between: f64,
    /// Pooled within-group variance, sum_k (n_k / n) var_k.
    pub within: f64,
    pub groups: usize,
}

pub fn variance_split<K: Ord + Clone>(values: &[f64], groups: &[K]) -> Option<VarianceSplit> {
    assert_eq!(values.len(), groups.len(), "one group per value");
    let overall = mean(values)?;
    let n = values.len() as f64;
    let mut by: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for (v, g) in values.iter().zip(groups) {
        by.entry(g.clone()).or_default().push(*v);
    }
    let mut between = 0.0;
    let mut within = 0.0;
    for xs in by.values() {
        let w = xs.len() as f64 / n;
        let m = mean(xs).unwrap_or(0.0);
        between += w * (m - overall) * (m - overall);
        within += w * variance(xs).unwrap_or(0.0);
    }
    Some(VarianceSplit {
        total: variance(values)?,
        between,
        within,
        groups: by.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_by_hand() {
        let v: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 1.0 / 3.0), Some(3.0));
        assert_eq!(nearest_rank(&v, 2.0 / 3.0), Some(6.0));
        assert_eq!(nearest_rank(&v, 0.0), Some(1.0));
        assert_eq!(nearest_rank(&v, 1.0), Some(9.0));
    }

    #[test]
    fn interpolated_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), Some(2.5));
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    }

    #[test]
    fn split_matches_hand_computation() {
        let s = variance_split(&[0.0, 1.0, 1.0, 2.0], &['a', 'a', 'b', 'b']).unwrap();
        assert!((s.total - 0.5).abs() < 1e-12);
        assert!((s.between - 0.25).abs() < 1e-12);
        assert!((s.within - 0.25).abs() < 1e-12);
    }
}
