//! Regime-decomposed performance estimates, the naive-mean bias identity,
//! variance decomposition, synthetic populations and bootstrap comparisons.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

const WEIGHT_TOL: f64 = 1e-9;

pub fn naive_mean(values: &[f64]) -> Result<f64> {
    stats::mean(values).ok_or_else(|| Error::invalid("mean of an empty value list"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// Divide by n.
    #[default]
    Population,
    /// Divide by n - 1 (0 for singletons).
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeStats {
    pub n: usize,
    pub w_hat: f64,
    pub mu_hat: f64,
    pub sigma_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeProfile<K> {
    pub n: usize,
    pub variance: VarianceKind,
    pub regimes: Vec<(K, RegimeStats)>,
}

impl<K: Ord + Clone> RegimeProfile<K> {
    pub fn num_regimes(&self) -> usize {
        self.regimes.len()
    }

    pub fn get(&self, k: &K) -> Option<&RegimeStats> {
        self.regimes.iter().find(|(key, _)| key == k).map(|(_, s)| s)
    }

    /// Sum of w_hat * mu_hat; equals the naive mean.
    pub fn weighted_mean(&self) -> f64 {
        self.regimes.iter().map(|(_, s)| s.w_hat * s.mu_hat).sum()
    }

    pub fn weights(&self) -> BTreeMap<K, f64> {
        self.regimes.iter().map(|(k, s)| (k.clone(), s.w_hat)).collect()
    }
}

fn group<K: Ord + Clone>(values: &[f64], regimes: &[K]) -> Result<BTreeMap<K, Vec<f64>>> {
    if values.len() != regimes.len() {
        return Err(Error::invalid(format!(
            "{} values but {} regime labels",
            values.len(),
            regimes.len()
        )));
    }
    let mut by: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for (v, k) in values.iter().zip(regimes) {
        by.entry(k.clone()).or_default().push(*v);
    }
    Ok(by)
}

pub fn regime_profile<K: Ord + Clone>(values: &[f64], regimes: &[K]) -> Result<RegimeProfile<K>> {
    regime_profile_with(values, regimes, VarianceKind::Population)
}

pub fn regime_profile_with<K: Ord + Clone>(
    values: &[f64],
    regimes: &[K],
    variance: VarianceKind,
) -> Result<RegimeProfile<K>> {
    let n = values.len();
    let by = group(values, regimes)?;
    let regimes = by
        .into_iter()
        .map(|(k, xs)| {
            let var = stats::variance(&xs).unwrap_or(0.0);
            let var = match variance {
                VarianceKind::Population => var,
                VarianceKind::Sample if xs.len() > 1 => var * xs.len() as f64 / (xs.len() - 1) as f64,
                VarianceKind::Sample => 0.0,
            };
            let s = RegimeStats {
                n: xs.len(),
                w_hat: xs.len() as f64 / n as f64,
                mu_hat: stats::mean(&xs).unwrap_or(0.0),
                sigma_hat: var.sqrt(),
            };
            (k, s)
        })
        .collect();
    Ok(RegimeProfile {
        n,
        variance,
        regimes,
    })
}

fn check_weights<K>(name: &str, w: &BTreeMap<K, f64>) -> Result<()> {
    let sum: f64 = w.values().sum();
    if (sum - 1.0).abs() > WEIGHT_TOL || w.values().any(|&x| x < 0.0) {
        return Err(Error::invalid(format!("{name} must be non-negative and sum to 1 (sum {sum})")));
    }
    Ok(())
}

/// Sum over regimes of (w_hat - w) * mu. Regimes missing from `w_hat` count
/// as zero observed mass.
pub fn conditional_bias<K: Ord>(
    w_hat: &BTreeMap<K, f64>,
    w: &BTreeMap<K, f64>,
    mu: &BTreeMap<K, f64>,
) -> Result<f64> {
    check_weights("observed weights", w_hat)?;
    check_weights("population weights", w)?;
    let wk: BTreeSet<&K> = w.keys().collect();
    let mk: BTreeSet<&K> = mu.keys().collect();
    if wk != mk || w_hat.keys().any(|k| !wk.contains(k)) {
        return Err(Error::invalid("regime index sets do not match"));
    }
    Ok(w
        .iter()
        .map(|(k, &wk)| (w_hat.get(k).copied().unwrap_or(0.0) - wk) * mu[k])
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub total: f64,
    /// Expected within-regime variance, sum of w_hat * sigma_hat^2.
    pub within: f64,
    /// Variance of regime means around the overall mean.
    pub between: f64,
}

pub fn variance_decomposition<K: Ord + Clone>(values: &[f64], regimes: &[K]) -> Result<Decomposition> {
    group(values, regimes)?;
    let s = stats::variance_split(values, regimes)
        .ok_or_else(|| Error::invalid("variance of an empty value list"))?;
    Ok(Decomposition {
        total: s.total,
        within: s.within,
        between: s.between,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Regimes weighted by their query share.
    #[default]
    Query,
    /// Regimes weighted equally.
    Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    pub overall: f64,
    pub within: f64,
    pub pooling: Pooling,
}

pub fn sigma_report<K: Ord + Clone>(values: &[f64], regimes: &[K], pooling: Pooling) -> Result<SigmaReport> {
    let d = variance_decomposition(values, regimes)?;
    let within = match pooling {
        Pooling::Query => d.within,
        Pooling::Cluster => {
            let p = regime_profile(values, regimes)?;
            p.regimes.iter().map(|(_, s)| s.sigma_hat * s.sigma_hat).sum::<f64>() / p.num_regimes() as f64
        }
    };
    Ok(SigmaReport {
        overall: d.total.sqrt(),
        within: within.sqrt(),
        pooling,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Normal draws clamped to [0, 1]; the clamp biases the mean near the edges.
    Normal,
    /// Beta with the given mean and variance; mean is exact.
    Beta,
    /// Always the mean.
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub regimes: Vec<RegimeSpec>,
}

enum Sampler {
    Const(f64),
    Normal(Normal<f64>),
    Beta(Beta<f64>),
}

impl PopulationSpec {
    fn samplers(&self) -> Result<Vec<Sampler>> {
        let sum: f64 = self.regimes.iter().map(|r| r.weight).sum();
        if self.regimes.is_empty() || (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::invalid(format!("regime weights must sum to 1 (sum {sum})")));
        }
        self.regimes
            .iter()
            .map(|r| {
                if r.weight < 0.0 || r.variance < 0.0 || !(0.0..=1.0).contains(&r.mean) {
                    return Err(Error::invalid(format!("invalid regime {r:?}")));
                }
                if r.variance == 0.0 || r.family == Family::Point {
                    return Ok(Sampler::Const(r.mean));
                }
                match r.family {
                    Family::Normal => Normal::new(r.mean, r.variance.sqrt())
                        .map(Sampler::Normal)
                        .map_err(|e| Error::invalid(e.to_string())),
                    Family::Beta => {
                        let m = r.mean;
                        let limit = m * (1.0 - m);
                        if r.variance >= limit {
                            return Err(Error::invalid(format!(
                                "beta variance {} must be below mean*(1-mean) = {limit}",
                                r.variance
                            )));
                        }
                        let nu = limit / r.variance - 1.0;
                        Beta::new(m * nu, (1.0 - m) * nu)
                            .map(Sampler::Beta)
                            .map_err(|e| Error::invalid(e.to_string()))
                    }
                    Family::Point => unreachable!(),
                }
            })
            .collect()
    }

    pub fn true_mean(&self) -> f64 {
        self.regimes.iter().map(|r| r.weight * r.mean).sum()
    }
}

/// Draw `n` (value, regime index) pairs: regime by weight, then value from
/// the regime's distribution clamped to [0, 1].
pub fn synth_population(spec: &PopulationSpec, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    let samplers = spec.samplers()?;
    let pick = WeightedIndex::new(spec.regimes.iter().map(|r| r.weight))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n);
    let mut regimes = Vec::with_capacity(n);
    for _ in 0..n {
        let k = pick.sample(&mut rng);
        let v = match &samplers[k] {
            Sampler::Const(c) => *c,
            Sampler::Normal(d) => d.sample(&mut rng),
            Sampler::Beta(d) => d.sample(&mut rng),
        };
        values.push(v.clamp(0.0, 1.0));
        regimes.push(k);
    }
    Ok((values, regimes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    OverallMean,
    Macro,
    Median,
    WorstCase,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::OverallMean,
        Protocol::Macro,
        Protocol::Median,
        Protocol::WorstCase,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::OverallMean => "overall_mean",
            Protocol::Macro => "macro",
            Protocol::Median => "median",
            Protocol::WorstCase => "worst_case",
        }
    }

    /// Statistic over values at `idx`, using per-cluster means for the
    /// cluster protocols. Clusters absent from `idx` are skipped.
    pub fn statistic(&self, values: &[f64], clusters: &[usize], idx: &[usize]) -> f64 {
        if *self == Protocol::OverallMean {
            return idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64;
        }
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for &i in idx {
            let e = acc.entry(clusters[i]).or_default();
            e.0 += values[i];
            e.1 += 1;
        }
        let means: Vec<f64> = acc.values().map(|(s, n)| s / *n as f64).collect();
        match self {
            Protocol::Macro => means.iter().sum::<f64>() / means.len() as f64,
            Protocol::Median => stats::median(&means).unwrap_or(f64::NAN),
            Protocol::WorstCase => means.iter().copied().fold(f64::INFINITY, f64::min),
            Protocol::OverallMean => unreachable!(),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "overall_mean" | "overall" | "mean" => Ok(Protocol::OverallMean),
            "macro" | "macro_average" => Ok(Protocol::Macro),
            "median" => Ok(Protocol::Median),
            "worst_case" | "worst" => Ok(Protocol::WorstCase),
            other => Err(Error::invalid(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub protocol: Protocol,
    pub resamples: usize,
    pub seed: u64,
    /// (wins + ties / 2) / resamples for system A.
    pub win_rate: f64,
    pub wins: usize,
    pub ties: usize,
}

/// Paired bootstrap: each resample draws n query indices with replacement
/// and compares the protocol statistic of A and B. Resample i uses its own
/// stream derived from (seed, i), so results do not depend on scheduling.
pub fn bootstrap_winrate(
    a: &[f64],
    b: &[f64],
    clusters: &[usize],
    protocol: Protocol,
    resamples: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    let n = a.len();
    if n == 0 || b.len() != n || clusters.len() != n {
        return Err(Error::invalid("bootstrap needs aligned, non-empty value and cluster lists"));
    }
    if resamples == 0 {
        return Err(Error::invalid("resample count must be positive"));
    }
    let outcomes: Vec<std::cmp::Ordering> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sa = protocol.statistic(a, clusters, &idx);
            let sb = protocol.statistic(b, clusters, &idx);
            sa.total_cmp(&sb)
        })
        .collect();
    let wins = outcomes.iter().filter(|o| o.is_gt()).count();
    let ties = outcomes.iter().filter(|o| o.is_eq()).count();
    Ok(ComparisonReport {
        protocol,
        resamples,
        seed,
        win_rate: (wins as f64 + 0.5 * ties as f64) / resamples as f64,
        wins,
        ties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_mean_examples() {
        assert_eq!(naive_mean(&[0.2, 0.8]).unwrap(), 0.5);
        assert!(naive_mean(&[]).is_err());
        let mut v = vec![0.2; 90];
        v.extend([0.8; 10]);
        assert!((naive_mean(&v).unwrap() - 0.26).abs() < 1e-12);
    }

    #[test]
    fn profile_examples() {
        let p = regime_profile(&[0.0, 1.0, 1.0], &['a', 'a', 'b']).unwrap();
        let a = p.get(&'a').unwrap();
        let b = p.get(&'b').unwrap();
        assert_eq!((a.mu_hat, b.mu_hat), (0.5, 1.0));
        assert!((a.w_hat - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.sigma_hat, 0.5);
        let s = regime_profile_with(&[0.0, 1.0], &[0, 0], VarianceKind::Sample).unwrap();
        assert!((s.regimes[0].1.sigma_hat - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bias_examples() {
        let m = |xs: &[f64]| xs.iter().copied().enumerate().collect::<BTreeMap<usize, f64>>();
        let b = conditional_bias(&m(&[0.9, 0.1]), &m(&[0.5, 0.5]), &m(&[0.2, 0.8])).unwrap();
        assert!((b + 0.24).abs() < 1e-12);
        let missing = BTreeMap::from([(0, 1.0)]);
        let b = conditional_bias(&missing, &m(&[0.8, 0.2]), &m(&[0.5, 0.1])).unwrap();
        assert!((b - 0.08).abs() < 1e-12);
        assert_eq!(conditional_bias(&m(&[0.5, 0.5]), &m(&[0.5, 0.5]), &m(&[0.1, 0.9])).unwrap(), 0.0);
        assert!(conditional_bias(&m(&[0.5, 0.5]), &m(&[1.0]), &m(&[0.1])).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let d = variance_decomposition(&[0.0, 1.0], &[0, 1]).unwrap();
        assert_eq!((d.between, d.total, d.within), (0.25, 0.25, 0.0));
        let d = variance_decomposition(&[0.0, 1.0], &[0, 0]).unwrap();
        assert_eq!(d.between, 0.0);
        let s = sigma_report(&[0.0, 1.0, 0.0, 1.0], &[0, 0, 1, 1], Pooling::Query).unwrap();
        assert_eq!(s.overall, s.within);
        let s = sigma_report(&[0.0, 0.2, 0.8, 1.0], &[0, 0, 1, 1], Pooling::Query).unwrap();
        assert!(s.within < s.overall);
    }

    #[test]
    fn synth_point_masses_are_exact() {
        let spec = PopulationSpec {
            regimes: vec![
                RegimeSpec { weight: 0.3, mean: 0.2, variance: 0.0, family: Family::Normal },
                RegimeSpec { weight: 0.7, mean: 0.9, variance: 0.0, family: Family::Beta },
            ],
        };
        let (v, r) = synth_population(&spec, 500, 4).unwrap();
        for (x, k) in v.iter().zip(&r) {
            assert_eq!(*x, [0.2, 0.9][*k]);
        }
        assert_eq!(synth_population(&spec, 500, 4).unwrap(), (v, r));
    }

    #[test]
    fn winrate_dominance_and_ties() {
        let a = [0.5, 0.6, 0.7];
        let b = [0.4, 0.5, 0.6];
        let c = [0, 1, 1];
        for p in Protocol::ALL {
            assert_eq!(bootstrap_winrate(&a, &b, &c, p, 200, 1).unwrap().win_rate, 1.0);
            assert_eq!(bootstrap_winrate(&a, &a, &c, p, 200, 1).unwrap().win_rate, 0.5);
        }
    }
}
