use std::collections::BTreeMap;

use proptest::prelude::*;
use strata_core::corpus::Qrels;
use strata_core::coverage::{
    coverage_report, msc, relevant_doc_query_counts, scc, zqc, CoverageState, StateRecord,
};
use strata_core::semantic::{ClusterMaps, ClusterSet};
use strata_core::stratification::{Regimes, StructuralSignals};

/// K clusters, docs with up to three clusters each, queries with their own
/// cluster sets and relevant documents.
#[derive(Debug, Clone)]
struct World {
    k: usize,
    docs: Vec<Vec<usize>>,
    queries: Vec<(Vec<usize>, Vec<usize>)>,
}

fn world() -> impl Strategy<Value = World> {
    (1usize..9, 1usize..15).prop_flat_map(|(k, nd)| {
        let docs = prop::collection::vec(prop::collection::vec(0..k, 0..4), nd);
        let queries = prop::collection::vec(
            (prop::collection::vec(0..k, 0..4), prop::collection::vec(0..nd, 1..4)),
            0..25,
        );
        (Just(k), docs, queries).prop_map(|(k, docs, queries)| World { k, docs, queries })
    })
}

impl World {
    fn maps(&self, upto: usize) -> (ClusterMaps, Qrels) {
        let mut maps = ClusterMaps {
            num_clusters: self.k,
            ..Default::default()
        };
        for (i, cs) in self.docs.iter().enumerate() {
            maps.doc_clusters.insert(format!("d{i:02}"), cs.iter().copied().collect());
        }
        let mut qrels = Qrels::default();
        for (i, (qc, rel)) in self.queries[..upto].iter().enumerate() {
            let q = format!("q{i:02}");
            maps.query_clusters.insert(q.clone(), qc.iter().copied().collect());
            for d in rel {
                qrels.insert(&q, &format!("d{d:02}"), 1);
            }
        }
        (maps, qrels)
    }

    /// Brute force: for each document, count for each of its clusters the
    /// queries that have any relevant document sharing that cluster.
    fn scc_scan(&self, upto: usize, threshold: usize) -> f64 {
        let hits = self
            .docs
            .iter()
            .filter(|cs| {
                cs.iter().any(|&c| {
                    let n = self.queries[..upto]
                        .iter()
                        .filter(|(_, rel)| rel.iter().any(|&d| self.docs[d].contains(&c)))
                        .count();
                    n >= threshold
                })
            })
            .count();
        hits as f64 / self.docs.len() as f64
    }
}

fn sig(d: f64, j: f64) -> StructuralSignals {
    StructuralSignals {
        delta: Some(d),
        jaccard: Some(j),
        n_rel: 1,
        unclustered_docs: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn coverage_metrics_agree_with_scans(w in world(), threshold in 1usize..4) {
        let mut last_scc = 0.0;
        for upto in 0..=w.queries.len() {
            let (maps, qrels) = w.maps(upto);
            let qc: Vec<&ClusterSet> = maps.query_clusters.values().collect();
            let m = msc(qc.iter().copied(), w.k).unwrap();
            let z = zqc(qc.iter().copied(), w.k);
            prop_assert_eq!(m + z as f64 / w.k as f64, 1.0);

            let counts = relevant_doc_query_counts(&qrels, &maps, w.k);
            let s = scc(&counts, &maps.doc_clusters, threshold);
            prop_assert!((s - w.scc_scan(upto, threshold)).abs() < 1e-12);
            prop_assert!(s >= last_scc);
            last_scc = s;

            let r = coverage_report(&qrels, &maps, &[], threshold).unwrap();
            prop_assert_eq!(r.zqc, w.k - r.per_cluster.iter().filter(|c| c.touching_queries > 0).count());
        }
    }

    #[test]
    fn state_updates_are_monotone_and_order_free(
        recs in prop::collection::vec(
            (0.0f64..=1.0, 0.0f64..=1.0, prop::collection::btree_set(0usize..6, 0..4)),
            1..40,
        ),
        rot in 0usize..40,
    ) {
        let records: Vec<StateRecord> = recs
            .iter()
            .map(|(d, j, cs)| StateRecord { signals: sig(*d, *j), doc_clusters: cs.clone() })
            .collect();
        let mut a = CoverageState::new(6, Regimes::uniform(3));
        let mut prev = a.covered.clone();
        for r in &records {
            a.update(r.clone());
            prop_assert!(a.covered.is_superset(&prev));
            prev = a.covered.clone();
            prop_assert_eq!(a.n_delta.iter().sum::<usize>(), a.len());
            prop_assert_eq!(a.n_jaccard.iter().sum::<usize>(), a.len());
        }
        let mut shuffled = records.clone();
        shuffled.rotate_left(rot % records.len());
        shuffled.reverse();
        let mut b = CoverageState::new(6, Regimes::uniform(3));
        for r in shuffled {
            b.update(r);
        }
        prop_assert_eq!(&a.n_delta, &b.n_delta);
        prop_assert_eq!(&a.n_jaccard, &b.n_jaccard);
        prop_assert_eq!(&a.cluster_queries, &b.cluster_queries);
        prop_assert_eq!(&a.covered, &b.covered);
        let expect: ClusterSet = (0..6).filter(|&c| a.cluster_queries[c] > 0).collect();
        prop_assert_eq!(&a.covered, &expect);
    }
}

#[test]
fn worked_coverage_values() {
    let qc: Vec<ClusterSet> = vec![[0].into(), [2].into(), [0, 2].into()];
    assert_eq!(msc(&qc, 4).unwrap(), 0.5);
    assert_eq!(zqc(&qc, 4), 2);
    let all: Vec<ClusterSet> = vec![[0, 1, 2, 3].into()];
    assert_eq!((msc(&all, 4).unwrap(), zqc(&all, 4)), (1.0, 0));
    assert!(msc(&qc, 0).is_err());

    // One cluster with five queries holding 10 of 20 single-cluster docs.
    let docs: BTreeMap<String, ClusterSet> = (0..20)
        .map(|i| (format!("d{i}"), ClusterSet::from([usize::from(i >= 10)])))
        .collect();
    assert_eq!(scc(&[5, 4], &docs, 5), 0.5);
    assert_eq!(scc(&[4, 4], &docs, 5), 0.0);
    assert_eq!(scc(&[5, 5], &docs, 5), 1.0);
}

#[test]
fn single_update_fills_the_expected_counters() {
    let mut s = CoverageState::new(4, Regimes::uniform(3));
    s.update(StateRecord {
        signals: sig(0.1, 0.9),
        doc_clusters: [2].into(),
    });
    assert_eq!((s.n_delta.clone(), s.n_jaccard.clone()), (vec![1, 0, 0], vec![0, 0, 1]));
    assert_eq!(s.covered, ClusterSet::from([2]));
}

#[test]
fn rebin_recounts_from_raw_signals() {
    let mut s = CoverageState::new(2, Regimes::uniform(3));
    for i in 0..24 {
        let x = i as f64 / 30.0;
        s.update(StateRecord {
            signals: sig(x, x),
            doc_clusters: [i % 2].into(),
        });
    }
    let before = s.n_delta.clone();
    s.refresh(3);
    assert_ne!(before, s.n_delta);
    // Cuts land on the 8th and 16th values, which open the next bucket.
    assert_eq!(s.n_delta, vec![7, 8, 9]);
    assert_eq!(s.n_delta.iter().sum::<usize>(), 24);
}
