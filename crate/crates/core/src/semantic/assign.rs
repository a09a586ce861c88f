//! Document and query to cluster mappings.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::entities::Entity;
use super::leiden::Clustering;
use crate::corpus::{Corpus, Query};
use crate::error::{Error, Result};
use crate::providers::{dot, prompts, EmbeddingProvider, EmbeddingRequest, LlmProvider, LlmRequest};

pub const DEFAULT_CANDIDATES: usize = 30;

pub type ClusterSet = BTreeSet<usize>;

/// C(d) for every corpus document. Documents without entities map to the
/// empty set.
pub fn map_documents(
    corpus: &Corpus,
    entities: &[Entity],
    clustering: &Clustering,
) -> Result<BTreeMap<String, ClusterSet>> {
    if entities.len() != clustering.assignment.len() {
        return Err(Error::invalid(format!(
            "{} entities but clustering covers {} nodes",
            entities.len(),
            clustering.assignment.len()
        )));
    }
    let mut out: BTreeMap<String, ClusterSet> =
        corpus.iter().map(|d| (d.id.clone(), ClusterSet::new())).collect();
    for (e, &c) in entities.iter().zip(&clustering.assignment) {
        for d in &e.doc_ids {
            if let Some(set) = out.get_mut(d) {
                set.insert(c);
            }
        }
    }
    Ok(out)
}

/// Brute-force cosine index over entity embeddings.
pub struct EntityIndex<'a> {
    entities: &'a [Entity],
}

impl<'a> EntityIndex<'a> {
    pub fn new(entities: &'a [Entity]) -> Result<Self> {
        if entities.iter().any(|e| e.embedding.is_empty()) {
            return Err(Error::invalid("entity index requires embedded entities"));
        }
        Ok(Self { entities })
    }

    pub fn dimensions(&self) -> usize {
        self.entities.first().map_or(0, |e| e.embedding.len())
    }

    /// Top-m entity indices by cosine, ties to the lower index.
    pub fn top(&self, query: &[f32], m: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| (i, dot(query, &e.embedding)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(m);
        scored
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryAssignment {
    pub clusters: ClusterSet,
    /// Indices of the entities the filter kept.
    pub entities: Vec<usize>,
    /// No entity survived retrieval plus filtering.
    pub empty: bool,
}

/// C(q): embed the query, take the top-m entities, keep those the LLM
/// judges relevant, and return their clusters.
pub fn map_query(
    query_text: &str,
    index: &EntityIndex<'_>,
    clustering: &Clustering,
    embedder: &dyn EmbeddingProvider,
    llm: &dyn LlmProvider,
    m: usize,
) -> Result<QueryAssignment> {
    if index.entities.is_empty() || m == 0 {
        return Ok(QueryAssignment {
            empty: true,
            ..Default::default()
        });
    }
    let qv = embedder
        .embed(&EmbeddingRequest {
            text: query_text.to_string(),
            dimensions: index.dimensions(),
        })?
        .vector;
    let candidates = index.top(&qv, m);
    let pairs: Vec<(&str, &str)> = candidates
        .iter()
        .map(|&(i, _)| {
            let e = &index.entities[i];
            (e.name.as_str(), e.description.as_str())
        })
        .collect();
    let (system, user) = prompts::entity_assignment(query_text, &pairs);
    let reply = llm.complete(&LlmRequest::new(user).with_system(system))?;
    let kept: Vec<usize> = prompts::parse_indices(&reply.text, candidates.len())
        .into_iter()
        .map(|k| candidates[k].0)
        .collect();
    let clusters: ClusterSet = kept.iter().map(|&i| clustering.assignment[i]).collect();
    Ok(QueryAssignment {
        empty: clusters.is_empty(),
        clusters,
        entities: kept,
    })
}

/// `map_query` over a query set, in parallel, keyed by query id.
pub fn map_queries<'q>(
    queries: impl IntoIterator<Item = &'q Query>,
    index: &EntityIndex<'_>,
    clustering: &Clustering,
    embedder: &dyn EmbeddingProvider,
    llm: &dyn LlmProvider,
    m: usize,
) -> Result<BTreeMap<String, QueryAssignment>> {
    let queries: Vec<&Query> = queries.into_iter().collect();
    queries
        .par_iter()
        .map(|q| {
            map_query(&q.text, index, clustering, embedder, llm, m).map(|a| (q.id.clone(), a))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Collection, Document};
    use crate::providers::{StubEmbedder, StubLlm};
    use crate::semantic::leiden::Objective;

    fn entity(name: &str, docs: &[&str]) -> Entity {
        let mut e = Entity {
            name: name.into(),
            description: format!("stub entity {name}"),
            doc_ids: docs.iter().map(|d| d.to_string()).collect(),
            embedding: Vec::new(),
        };
        e.embedding = StubEmbedder::new(0).vector(&e.embedding_text(), 64);
        e
    }

    fn clustering(assignment: Vec<usize>) -> Clustering {
        Clustering {
            gamma: 1.0,
            seed: 0,
            objective: Objective::Cpm,
            assignment,
            quality: 0.0,
            trace: Vec::new(),
        }
    }

    #[test]
    fn doc_clusters_are_set_unions() {
        let corpus = Collection::new(
            ["d1", "d2"]
                .iter()
                .map(|id| Document {
                    id: id.to_string(),
                    title: String::new(),
                    text: "x".into(),
                })
                .collect(),
        )
        .unwrap();
        let ents = vec![entity("a", &["d1"]), entity("b", &["d1"]), entity("c", &["d1"])];
        let maps = map_documents(&corpus, &ents, &clustering(vec![3, 3, 7])).unwrap();
        assert_eq!(maps["d1"], ClusterSet::from([3, 7]));
        assert!(maps["d2"].is_empty());
    }

    #[test]
    fn exact_text_ranks_first() {
        let ents = vec![entity("apple", &[]), entity("banana", &[]), entity("cherry", &[])];
        let index = EntityIndex::new(&ents).unwrap();
        let q = StubEmbedder::new(0).vector("banana: stub entity banana", 64);
        assert_eq!(index.top(&q, 3)[0].0, 1);
    }

    #[test]
    fn stub_filter_picks_clusters_of_named_entities() {
        let ents = vec![
            entity("apple", &[]),
            entity("banana", &[]),
            entity("cherry", &[]),
            entity("grape", &[]),
        ];
        let index = EntityIndex::new(&ents).unwrap();
        let c = clustering(vec![0, 1, 2, 4]);
        let (emb, llm) = (StubEmbedder::new(0), StubLlm::new(0));
        let a = map_query("banana and grape smoothie", &index, &c, &emb, &llm, 30).unwrap();
        assert_eq!(a.clusters, ClusterSet::from([1, 4]));
        let none = map_query("unrelated words entirely", &index, &c, &emb, &llm, 30).unwrap();
        assert!(none.clusters.is_empty() && none.empty);
    }
}
