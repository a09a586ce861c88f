//! Coverage-aware query generation: pick a strategy from the coverage
//! deficits, generate candidates from seed documents, verify a relevant pool,
//! score against the deficits and accept the best candidate per iteration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, IteratorRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Collection, Corpus, Document, Qrels, Query, QuerySet};
use crate::coverage::{deficits, CoverageState, StateRecord};
use crate::error::{Error, Result};
use crate::providers::prompts::{self, Specificity, StyleCell};
use crate::providers::{EmbeddingProvider, LlmProvider, LlmRequest};
use crate::retrieval::{Bm25Index, DenseIndex, Ranking};
use crate::semantic::{map_query, ClusterMaps, ClusterSet, Clustering, EntityIndex};
use crate::stratification::{signals_from, Regimes, StructuralSignals};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub sigma: f64,
    pub jaccard: f64,
    pub coverage: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            jaccard: 1.0,
            coverage: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Target number of accepted queries.
    pub n: usize,
    /// Candidates generated per iteration.
    pub b: usize,
    /// Documents taken from each retriever when pooling.
    pub pool_depth: usize,
    /// Entity candidates shown to the assignment filter.
    pub entity_candidates: usize,
    /// Boundary refresh cadence in acceptances.
    pub refresh_every: usize,
    pub buckets: usize,
    pub weights: ScoreWeights,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n: 200,
            b: 5,
            pool_depth: 20,
            entity_candidates: 30,
            refresh_every: 25,
            buckets: 3,
            weights: ScoreWeights::default(),
            seed: 7,
            id_prefix: "gen".into(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.b == 0 {
            return Err(Error::invalid("generation needs n > 0 and b >= 1"));
        }
        if self.refresh_every == 0 || self.buckets == 0 || self.pool_depth == 0 {
            return Err(Error::invalid("refresh cadence, bucket count and pool depth must be positive"));
        }
        Ok(())
    }

    /// Candidate-attempt budget: 20 per requested query.
    pub fn attempt_guard(&self) -> usize {
        20 * self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    SingleCluster,
    MultiCluster,
}

impl StrategyKind {
    fn prompt_type(&self) -> (&'static str, &'static str) {
        match self {
            StrategyKind::SingleCluster => (
                "focused, single-topic query",
                "Ask about one specific subject that the document covers.",
            ),
            StrategyKind::MultiCluster => (
                "multi-topic query",
                "Ask for information that connects two or more distinct subjects covered by the document.",
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub target_cluster: Option<usize>,
    pub entity_mode: Specificity,
}

/// Multi-cluster when the high-dispersion bucket has the strictly largest
/// deficit; the target is a uniformly drawn least-queried cluster.
pub fn choose_strategy(state: &CoverageState, rng: &mut ChaCha8Rng) -> Strategy {
    let d = deficits(&state.n_delta);
    let high = d.len() - 1;
    let multi = d.len() > 1 && d[..high].iter().all(|&x| d[high] > x);
    let fewest = state.cluster_queries.iter().min().copied();
    let target = fewest.and_then(|m| {
        state
            .cluster_queries
            .iter()
            .enumerate()
            .filter(|&(_, &n)| n == m)
            .map(|(c, _)| c)
            .choose(rng)
    });
    Strategy {
        kind: if multi {
            StrategyKind::MultiCluster
        } else {
            StrategyKind::SingleCluster
        },
        target_cluster: target,
        entity_mode: *StyleCell::SPECIFICITIES.choose(rng).expect("non-empty"),
    }
}

/// Length drawn uniformly; together with a uniform entity mode the six
/// cells are uniform.
pub fn sample_cell(entity_mode: Specificity, rng: &mut ChaCha8Rng) -> StyleCell {
    StyleCell {
        length: *StyleCell::LENGTHS.choose(rng).expect("non-empty"),
        specificity: entity_mode,
    }
}

/// One query for `doc`; `None` if the model returns nothing usable.
pub fn generate_candidate(
    doc: &Document,
    cell: StyleCell,
    kind: StrategyKind,
    llm: &dyn LlmProvider,
) -> Result<Option<String>> {
    let (desc, instr) = kind.prompt_type();
    let (system, user) = prompts::query_generation(doc, cell, desc, instr);
    let reply = llm.complete(&LlmRequest::new(user).with_system(system))?;
    let text = crate::text::collapse_whitespace(reply.text.trim().trim_matches('"'));
    Ok((!text.is_empty()).then_some(text))
}

/// D_q: the seed plus every pooled document the judge accepts. The pool is
/// the top `depth` of each retriever, deduplicated, without the seed.
pub fn pool_relevant(
    query: &str,
    seed_doc: &str,
    corpus: &Corpus,
    bm25: &Bm25Index,
    dense: &DenseIndex,
    embedder: &dyn EmbeddingProvider,
    llm: &dyn LlmProvider,
    depth: usize,
) -> Result<BTreeSet<String>> {
    let sparse: Ranking = bm25.search(query, depth);
    let qv = dense.embed_query(query, embedder)?;
    let dense_hits: Ranking = dense.search(&qv, depth)?;
    let mut seen = BTreeSet::from([seed_doc.to_string()]);
    let mut pool: Vec<&Document> = Vec::new();
    for (d, _) in sparse.iter().chain(&dense_hits) {
        if seen.insert(d.clone()) {
            if let Some(doc) = corpus.get(d) {
                pool.push(doc);
            }
        }
    }
    let mut out = BTreeSet::from([seed_doc.to_string()]);
    if pool.is_empty() {
        return Ok(out);
    }
    let (system, user) = prompts::relevance(query, &pool);
    let reply = llm.complete(&LlmRequest::new(user).with_system(system))?;
    out.extend(
        prompts::parse_indices(&reply.text, pool.len())
            .into_iter()
            .map(|i| pool[i].id.clone()),
    );
    Ok(out)
}

/// Weighted bucket deficits plus the share of newly covered clusters.
pub fn score_candidate(
    signals: &StructuralSignals,
    doc_clusters: &ClusterSet,
    state: &CoverageState,
    weights: &ScoreWeights,
) -> f64 {
    let (db, jb) = state.regimes.buckets_of(signals);
    let ds = deficits(&state.n_delta);
    let dj = deficits(&state.n_jaccard);
    let new = doc_clusters.difference(&state.covered).count();
    weights.sigma * db.map_or(0.0, |b| ds[b])
        + weights.jaccard * jb.map_or(0.0, |b| dj[b])
        + weights.coverage * new as f64 / doc_clusters.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateQuery {
    pub text: String,
    pub seed_doc: String,
    pub cell: StyleCell,
    pub relevant: BTreeSet<String>,
    pub entities: Vec<String>,
    pub query_clusters: ClusterSet,
    pub doc_clusters: ClusterSet,
    pub signals: StructuralSignals,
    pub new_clusters: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedQuery {
    pub query_id: String,
    pub iteration: usize,
    pub strategy: Strategy,
    pub delta_bucket: Option<usize>,
    pub jaccard_bucket: Option<usize>,
    /// Clusters covered after this acceptance.
    pub covered_after: usize,
    pub candidates_scored: usize,
    #[serde(flatten)]
    pub candidate: CandidateQuery,
}

/// Everything generation reads.
pub struct GenerationContext<'a> {
    pub corpus: &'a Corpus,
    pub maps: &'a ClusterMaps,
    pub entities: EntityIndex<'a>,
    pub entity_names: Vec<&'a str>,
    pub clustering: &'a Clustering,
    pub bm25: &'a Bm25Index,
    pub dense: &'a DenseIndex,
    pub llm: &'a dyn LlmProvider,
    pub embedder: &'a dyn EmbeddingProvider,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationOutput {
    pub accepted: Vec<AcceptedQuery>,
    pub attempts: usize,
    pub iterations: usize,
    pub guard_tripped: bool,
    pub state: CoverageState,
    pub weights: ScoreWeights,
}

impl GenerationOutput {
    pub fn queries(&self) -> Result<QuerySet> {
        Collection::new(
            self.accepted
                .iter()
                .map(|a| Query {
                    id: a.query_id.clone(),
                    text: a.candidate.text.clone(),
                })
                .collect(),
        )
    }

    /// Grade 1 for every verified document.
    pub fn qrels(&self) -> Qrels {
        let mut q = Qrels::default();
        for a in &self.accepted {
            for d in &a.candidate.relevant {
                q.insert(&a.query_id, d, 1);
            }
        }
        q
    }

    /// `queries.jsonl`, `qrels.tsv` and `provenance.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::corpus::save_queries(dir.join("queries.jsonl"), &self.queries()?)?;
        crate::corpus::save_qrels(dir.join("qrels.tsv"), &self.qrels())?;
        crate::io::write_jsonl(&dir.join("provenance.jsonl"), &self.accepted)
    }
}

/// Initial coverage state from existing queries. Boundaries are fit on their
/// signals when possible, otherwise evenly spaced cuts are used.
pub fn initial_state(
    num_clusters: usize,
    existing: Vec<StateRecord>,
    buckets: usize,
) -> CoverageState {
    let regimes = Regimes::fit(existing.iter().map(|r| &r.signals), buckets)
        .unwrap_or_else(|_| Regimes::uniform(buckets));
    let mut state = CoverageState::new(num_clusters, regimes);
    for r in existing {
        state.update(r);
    }
    state
}

impl GenerationContext<'_> {
    fn seed_pool(&self, strategy: &Strategy, used: &BTreeSet<String>) -> Vec<&Document> {
        let unused = |d: &&Document| !used.contains(&d.id);
        let clusters = |d: &Document| self.maps.doc(&d.id);
        let tiers: Vec<Box<dyn Fn(&Document) -> bool>> = match (strategy.kind, strategy.target_cluster) {
            (StrategyKind::SingleCluster, Some(t)) => vec![
                Box::new(move |d| clusters(d).len() == 1 && clusters(d).contains(&t)),
                Box::new(move |d| clusters(d).contains(&t)),
                Box::new(move |d| !clusters(d).is_empty()),
            ],
            (StrategyKind::MultiCluster, Some(t)) => vec![
                Box::new(move |d| clusters(d).len() >= 2 && clusters(d).contains(&t)),
                Box::new(move |d| clusters(d).len() >= 2),
                Box::new(move |d| clusters(d).contains(&t)),
                Box::new(move |d| !clusters(d).is_empty()),
            ],
            (_, None) => vec![Box::new(move |d| !clusters(d).is_empty())],
        };
        for tier in tiers.iter().chain(std::iter::once(&(Box::new(|_: &Document| true) as Box<dyn Fn(&Document) -> bool>))) {
            let docs: Vec<&Document> = self.corpus.iter().filter(unused).filter(|d| tier(d)).collect();
            if !docs.is_empty() {
                return docs;
            }
        }
        Vec::new()
    }

    fn evaluate(&self, text: String, seed: &Document, cell: StyleCell, m: usize, depth: usize) -> Result<Option<CandidateQuery>> {
        let relevant = pool_relevant(&text, &seed.id, self.corpus, self.bm25, self.dense, self.embedder, self.llm, depth)?;
        let assignment = map_query(&text, &self.entities, self.clustering, self.embedder, self.llm, m)?;
        let docs: Vec<&str> = relevant.iter().map(String::as_str).collect();
        let signals = signals_from(&docs, &assignment.clusters, self.maps);
        if signals.delta.is_none() || signals.jaccard.is_none() {
            return Ok(None);
        }
        Ok(Some(CandidateQuery {
            doc_clusters: self.maps.docs_union(docs.iter().copied()),
            entities: assignment.entities.iter().map(|&i| self.entity_names[i].to_string()).collect(),
            query_clusters: assignment.clusters,
            text,
            seed_doc: seed.id.clone(),
            cell,
            relevant,
            signals,
            new_clusters: 0,
            score: 0.0,
        }))
    }
}

/// Run the loop until `cfg.n` queries are accepted or the attempt guard
/// trips.
pub fn run_generation(
    ctx: &GenerationContext<'_>,
    cfg: &GenerationConfig,
    mut state: CoverageState,
) -> Result<GenerationOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut accepted: Vec<AcceptedQuery> = Vec::new();
    let mut used_seeds: BTreeSet<String> = BTreeSet::new();
    let mut seen_texts: BTreeSet<String> = BTreeSet::new();
    let mut attempts = 0;
    let mut iterations = 0;
    let guard = cfg.attempt_guard();

    while accepted.len() < cfg.n && attempts < guard {
        iterations += 1;
        let strategy = choose_strategy(&state, &mut rng);
        let pool = ctx.seed_pool(&strategy, &used_seeds);
        if pool.is_empty() {
            log::warn!("every document has already seeded a query; stopping");
            break;
        }
        let take = cfg.b.min(pool.len()).min(guard - attempts);
        let seeds: Vec<&Document> = pool.choose_multiple(&mut rng, take).copied().collect();
        let cells: Vec<StyleCell> = seeds.iter().map(|_| sample_cell(strategy.entity_mode, &mut rng)).collect();
        attempts += seeds.len();

        let texts: Vec<Option<String>> = seeds
            .par_iter()
            .zip(&cells)
            .map(|(d, &c)| generate_candidate(d, c, strategy.kind, ctx.llm))
            .collect::<Result<_>>()?;
        let mut batch_texts = BTreeSet::new();
        let fresh: Vec<(String, &Document, StyleCell)> = texts
            .into_iter()
            .zip(seeds.iter().zip(&cells))
            .filter_map(|(t, (d, c))| t.map(|t| (t, *d, *c)))
            .filter(|(t, _, _)| !seen_texts.contains(t) && batch_texts.insert(t.clone()))
            .collect();
        let mut candidates: Vec<CandidateQuery> = fresh
            .into_par_iter()
            .map(|(t, d, c)| ctx.evaluate(t, d, c, cfg.entity_candidates, cfg.pool_depth))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        for c in &mut candidates {
            c.new_clusters = c.doc_clusters.difference(&state.covered).count();
            c.score = score_candidate(&c.signals, &c.doc_clusters, &state, &cfg.weights);
        }
        let scored = candidates.len();
        let Some(best) = candidates
            .into_iter()
            .reduce(|a, b| if b.score > a.score || (b.score == a.score && b.text < a.text) { b } else { a })
        else {
            continue;
        };

        let (db, jb) = state.regimes.buckets_of(&best.signals);
        state.update(StateRecord {
            signals: best.signals.clone(),
            doc_clusters: best.doc_clusters.clone(),
        });
        used_seeds.insert(best.seed_doc.clone());
        seen_texts.insert(best.text.clone());
        accepted.push(AcceptedQuery {
            query_id: format!("{}-{:05}", cfg.id_prefix, accepted.len() + 1),
            iteration: iterations,
            strategy,
            delta_bucket: db,
            jaccard_bucket: jb,
            covered_after: state.covered.len(),
            candidates_scored: scored,
            candidate: best,
        });
        if accepted.len() % cfg.refresh_every == 0 {
            state.refresh(cfg.buckets);
        }
    }

    let guard_tripped = accepted.len() < cfg.n;
    if guard_tripped {
        log::warn!(
            "generation stopped with {} of {} queries after {attempts} attempts",
            accepted.len(),
            cfg.n
        );
    }
    Ok(GenerationOutput {
        accepted,
        attempts,
        iterations,
        guard_tripped,
        state,
        weights: cfg.weights,
    })
}

/// Per-cell draw counts, for checking the style sampler.
pub fn cell_histogram(draws: usize, seed: u64) -> BTreeMap<usize, usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = BTreeMap::new();
    for _ in 0..draws {
        let mode = *StyleCell::SPECIFICITIES.choose(&mut rng).expect("non-empty");
        *counts.entry(sample_cell(mode, &mut rng).index()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stratification::Regimes;

    fn signals(delta: f64, jaccard: f64) -> StructuralSignals {
        StructuralSignals {
            delta: Some(delta),
            jaccard: Some(jaccard),
            n_rel: 1,
            unclustered_docs: 0,
        }
    }

    #[test]
    fn empty_state_score() {
        let state = CoverageState::new(4, Regimes::uniform(3));
        let s = score_candidate(&signals(0.5, 0.5), &ClusterSet::from([0, 1]), &state, &ScoreWeights::default());
        assert!((s - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn balanced_covered_state_scores_zero() {
        let mut state = CoverageState::new(2, Regimes::uniform(3));
        for (d, j) in [(0.1, 0.1), (0.5, 0.5), (0.9, 0.9)] {
            state.update(StateRecord {
                signals: signals(d, j),
                doc_clusters: ClusterSet::from([0]),
            });
        }
        let s = score_candidate(&signals(0.5, 0.5), &ClusterSet::from([0]), &state, &ScoreWeights::default());
        assert_eq!(s, 0.0);
    }

    #[test]
    fn strategy_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = CoverageState::new(6, Regimes::uniform(3));
        for c in 0..5 {
            state.cluster_queries[c] = 1;
        }
        let s = choose_strategy(&state, &mut rng);
        assert_eq!(s.kind, StrategyKind::SingleCluster);
        assert_eq!(s.target_cluster, Some(5));
        state.n_delta = vec![10, 10, 0];
        assert_eq!(choose_strategy(&state, &mut rng).kind, StrategyKind::MultiCluster);
        state.n_delta = vec![0, 10, 0];
        assert_eq!(choose_strategy(&state, &mut rng).kind, StrategyKind::SingleCluster);
    }

    #[test]
    fn style_cells_are_uniform() {
        let h = cell_histogram(6000, 3);
        assert_eq!(h.len(), 6);
        // binomial(6000, 1/6): sd ~ 28.9; allow 4 sd
        for &n in h.values() {
            assert!((n as f64 - 1000.0).abs() < 4.0 * 28.9, "{h:?}");
        }
    }
}
