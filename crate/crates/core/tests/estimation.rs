use std::collections::BTreeMap;

use proptest::prelude::*;
use strata_core::estimation::{
    bootstrap_winrate, conditional_bias, naive_mean, regime_profile, sigma_report, synth_population,
    variance_decomposition, Family, PopulationSpec, Pooling, Protocol, RegimeSpec,
};

fn values_and_regimes() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    prop::collection::vec((0.0f64..=1.0, 0usize..5), 1..80)
        .prop_map(|rows| rows.into_iter().unzip())
}

fn spec(rows: &[(f64, f64, f64)], family: Family) -> PopulationSpec {
    PopulationSpec {
        regimes: rows
            .iter()
            .map(|&(weight, mean, variance)| RegimeSpec {
                weight,
                mean,
                variance,
                family,
            })
            .collect(),
    }
}

proptest! {
    #[test]
    fn profile_reproduces_the_naive_mean((v, r) in values_and_regimes()) {
        let p = regime_profile(&v, &r).unwrap();
        prop_assert!((p.weighted_mean() - naive_mean(&v).unwrap()).abs() < 1e-12);
        prop_assert_eq!(p.regimes.iter().map(|(_, s)| s.n).sum::<usize>(), v.len());
        prop_assert!((p.regimes.iter().map(|(_, s)| s.w_hat).sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.regimes.iter().all(|(_, s)| (0.0..=1.0).contains(&s.mu_hat)));
    }

    #[test]
    fn variance_terms_sum_to_total((v, r) in values_and_regimes()) {
        let d = variance_decomposition(&v, &r).unwrap();
        prop_assert!(d.within >= 0.0 && d.between >= 0.0);
        prop_assert!((d.within + d.between - d.total).abs() < 1e-9);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let direct = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        prop_assert!((d.total - direct).abs() < 1e-12);
        let s = sigma_report(&v, &r, Pooling::Query).unwrap();
        prop_assert!(s.within <= s.overall + 1e-12);
    }

    #[test]
    fn winners_survive_common_transforms(
        rows in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0usize..4), 2..40),
        scale in 0.2f64..5.0,
        shift in -1.0f64..1.0,
    ) {
        let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let c: Vec<usize> = rows.iter().map(|r| r.2).collect();
        let idx: Vec<usize> = (0..a.len()).collect();
        let affine = |x: &[f64]| x.iter().map(|v| scale * v + shift).collect::<Vec<_>>();
        for p in [Protocol::OverallMean, Protocol::Macro] {
            let (sa, sb) = (p.statistic(&a, &c, &idx), p.statistic(&b, &c, &idx));
            prop_assume!((sa - sb).abs() > 1e-9);
            let (ta, tb) = (p.statistic(&affine(&a), &c, &idx), p.statistic(&affine(&b), &c, &idx));
            prop_assert_eq!(sa > sb, ta > tb);
        }
        // Order statistics of cluster means under a monotone map of those means.
        let means = |x: &[f64]| {
            let mut acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
            for (v, k) in x.iter().zip(&c) {
                let e = acc.entry(*k).or_default();
                e.0 += v;
                e.1 += 1.0;
            }
            acc.into_values().map(|(s, n)| s / n).collect::<Vec<_>>()
        };
        let ids: Vec<usize> = (0..means(&a).len()).collect();
        let (ma, mb) = (means(&a), means(&b));
        let cube = |x: &[f64]| x.iter().map(|v| v.powi(3) + 2.0 * v).collect::<Vec<_>>();
        // Even counts average two middle values, which a nonlinear map does
        // not commute with.
        let mut protocols = vec![Protocol::WorstCase];
        if ids.len() % 2 == 1 {
            protocols.push(Protocol::Median);
        }
        for p in protocols {
            let (sa, sb) = (p.statistic(&ma, &ids, &ids), p.statistic(&mb, &ids, &ids));
            prop_assume!(sa != sb);
            let (ta, tb) = (p.statistic(&cube(&ma), &ids, &ids), p.statistic(&cube(&mb), &ids, &ids));
            prop_assert_eq!(sa > sb, ta > tb);
        }
    }
}

#[test]
fn worked_estimation_values() {
    assert_eq!(naive_mean(&[0.2, 0.8]).unwrap(), 0.5);
    assert!(naive_mean(&[]).is_err());
    let mut v = vec![0.2; 90];
    v.extend([0.8; 10]);
    assert!((naive_mean(&v).unwrap() - 0.26).abs() < 1e-12);

    let p = regime_profile(&[0.0, 1.0, 1.0], &["a", "a", "b"]).unwrap();
    assert_eq!(p.get(&"a").unwrap().mu_hat, 0.5);
    assert_eq!(p.get(&"b").unwrap().mu_hat, 1.0);
    assert!((p.get(&"a").unwrap().w_hat - 2.0 / 3.0).abs() < 1e-15);

    let m = |xs: &[f64]| xs.iter().enumerate().map(|(i, &x)| (i, x)).collect::<BTreeMap<_, _>>();
    let bias = conditional_bias(&m(&[0.9, 0.1]), &m(&[0.5, 0.5]), &m(&[0.2, 0.8])).unwrap();
    assert!((bias + 0.24).abs() < 1e-15);
    let missing = conditional_bias(&m(&[1.0]), &m(&[0.8, 0.2]), &m(&[0.5, 0.1])).unwrap();
    assert!((missing - 0.08).abs() < 1e-15);
    assert_eq!(conditional_bias(&m(&[0.3, 0.7]), &m(&[0.3, 0.7]), &m(&[0.1, 0.9])).unwrap(), 0.0);
    assert!(conditional_bias(&m(&[0.5, 0.5]), &m(&[0.5, 0.5]), &m(&[0.1])).is_err());

    let d = variance_decomposition(&[0.0, 1.0], &[0, 1]).unwrap();
    assert_eq!((d.between, d.total, d.within), (0.25, 0.25, 0.0));
    assert_eq!(variance_decomposition(&[0.1, 0.7], &[0, 0]).unwrap().between, 0.0);
    let flat = sigma_report(&[0.1, 0.7, 0.1, 0.7], &[0, 0, 1, 1], Pooling::Query).unwrap();
    assert!((flat.within - flat.overall).abs() < 1e-15);
    let split = sigma_report(&[0.1, 0.2, 0.7, 0.8], &[0, 0, 1, 1], Pooling::Query).unwrap();
    assert!(split.within < split.overall);
}

#[test]
fn synthetic_populations() {
    let fixed = spec(&[(0.3, 0.2, 0.0), (0.7, 0.9, 0.0)], Family::Normal);
    let (v, r) = synth_population(&fixed, 500, 1).unwrap();
    assert!(v.iter().zip(&r).all(|(x, k)| *x == [0.2, 0.9][*k]));
    assert_eq!(synth_population(&fixed, 500, 1).unwrap(), (v, r));

    let n = 100_000;
    let s = spec(&[(0.2, 0.3, 0.01), (0.5, 0.5, 0.02), (0.3, 0.8, 0.01)], Family::Beta);
    let (_, r) = synth_population(&s, n, 5).unwrap();
    for (k, reg) in s.regimes.iter().enumerate() {
        let share = r.iter().filter(|&&x| x == k).count() as f64 / n as f64;
        let se = (reg.weight * (1.0 - reg.weight) / n as f64).sqrt();
        assert!((share - reg.weight).abs() < 3.0 * se, "regime {k}: {share}");
    }
    assert!(synth_population(&spec(&[(0.5, 0.2, 0.0)], Family::Point), 10, 0).is_err());
}

/// Over many seeded trials, the naive estimate minus the true mean, given
/// the realised shares, is Σ(ŵ - w)μ plus noise with mean zero.
#[test]
fn naive_bias_follows_realised_shares() {
    let s = spec(&[(0.5, 0.2, 0.01), (0.3, 0.5, 0.02), (0.2, 0.85, 0.005)], Family::Beta);
    let (trials, n) = (10_000u64, 200);
    let w: BTreeMap<usize, f64> = s.regimes.iter().enumerate().map(|(k, r)| (k, r.weight)).collect();
    let mu: BTreeMap<usize, f64> = s.regimes.iter().enumerate().map(|(k, r)| (k, r.mean)).collect();
    let mut resid = Vec::new();
    let mut per_regime: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in 0..trials {
        let (v, r) = synth_population(&s, n, 1000 + t).unwrap();
        let p = regime_profile(&v, &r).unwrap();
        let predicted = conditional_bias(&p.weights(), &w, &mu).unwrap();
        resid.push(naive_mean(&v).unwrap() - s.true_mean() - predicted);
        for (k, st) in &p.regimes {
            per_regime.entry(*k).or_default().push(st.mu_hat);
        }
    }
    let mean = resid.iter().sum::<f64>() / resid.len() as f64;
    let sd = (resid.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64).sqrt();
    assert!(mean.abs() < 3.0 * sd / (trials as f64).sqrt(), "residual {mean}, sd {sd}");
    for (k, xs) in per_regime {
        let avg = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - avg).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        assert!((avg - mu[&k]).abs() < 3.0 * sd / (xs.len() as f64).sqrt(), "regime {k}: {avg}");
    }
}

fn two_cluster_fixture() -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut a = vec![0.6; 90];
    let mut b = vec![0.5; 90];
    let mut c = vec![0; 90];
    a.extend([0.1; 10]);
    b.extend([0.9; 10]);
    c.extend([1; 10]);
    (a, b, c)
}

/// P(Binomial(n, p) <= k) by direct summation.
fn binom_cdf(n: u64, p: f64, k: u64) -> f64 {
    let mut total = 0.0;
    let mut coeff = 1.0f64;
    for i in 0..=k {
        if i > 0 {
            coeff *= (n - i + 1) as f64 / i as f64;
        }
        total += coeff * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32);
    }
    total
}

#[test]
fn protocol_choice_flips_the_winner() {
    let (a, b, c) = two_cluster_fixture();
    // A resample with y cluster-Y queries favours A iff 0.1(100 - y) > 0.8y,
    // that is y <= 11; y is Binomial(100, 0.1).
    let analytic = binom_cdf(100, 0.1, 11);
    assert!((analytic - 0.70).abs() < 0.01);
    // 20000 resamples put the binomial standard error near 0.0032.
    let overall = bootstrap_winrate(&a, &b, &c, Protocol::OverallMean, 20_000, 7).unwrap();
    assert!((overall.win_rate - analytic).abs() <= 0.01, "{} vs {analytic}", overall.win_rate);
    let macro_ = bootstrap_winrate(&a, &b, &c, Protocol::Macro, 1000, 7).unwrap();
    assert!(macro_.win_rate <= 0.01);
    assert_eq!(
        bootstrap_winrate(&a, &b, &c, Protocol::Macro, 1000, 7).unwrap(),
        macro_
    );
}

#[test]
fn dominance_and_ties() {
    let a: Vec<f64> = (0..30).map(|i| 0.5 + i as f64 / 100.0).collect();
    let b: Vec<f64> = a.iter().map(|x| x - 0.1).collect();
    let c: Vec<usize> = (0..30).map(|i| i % 3).collect();
    for p in Protocol::ALL {
        assert_eq!(bootstrap_winrate(&a, &b, &c, p, 200, 1).unwrap().win_rate, 1.0);
        assert_eq!(bootstrap_winrate(&a, &a, &c, p, 200, 1).unwrap().win_rate, 0.5);
    }
}
