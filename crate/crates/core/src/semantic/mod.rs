//! Corpus-level semantic structure: entities, similarity graph, clusters and
//! the document/query cluster maps.

pub mod assign;
pub mod entities;
pub mod knn;
pub mod leiden;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use assign::{
    map_documents, map_queries, map_query, ClusterSet, EntityIndex, QueryAssignment,
    DEFAULT_CANDIDATES,
};
pub use entities::{
    embed_entities, extract_entities, load_embeddings, load_entities, merge_similar,
    save_embeddings, save_entities, Entity, ExtractionReport, DEFAULT_DIMENSIONS,
};
pub use knn::{build_knn_graph, Backend, Edge, EntityGraph, KnnParams};
pub use leiden::{
    effective_resolution, leiden_cluster, quality, renumber, resolution_sweep, Clustering,
    LeidenParams, Objective, SweepRow,
};

/// C(d) and C(q) for one dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterMaps {
    pub num_clusters: usize,
    pub doc_clusters: BTreeMap<String, ClusterSet>,
    pub query_clusters: BTreeMap<String, ClusterSet>,
}

impl ClusterMaps {
    pub fn doc(&self, id: &str) -> &ClusterSet {
        static EMPTY: ClusterSet = ClusterSet::new();
        self.doc_clusters.get(id).unwrap_or(&EMPTY)
    }

    pub fn query(&self, id: &str) -> &ClusterSet {
        static EMPTY: ClusterSet = ClusterSet::new();
        self.query_clusters.get(id).unwrap_or(&EMPTY)
    }

    /// Union of C(d) over `docs`.
    pub fn docs_union<'a>(&self, docs: impl IntoIterator<Item = &'a str>) -> ClusterSet {
        docs.into_iter().flat_map(|d| self.doc(d).iter().copied()).collect()
    }

    pub fn docs_without_clusters(&self) -> Vec<&str> {
        self.doc_clusters
            .iter()
            .filter(|(_, c)| c.is_empty())
            .map(|(d, _)| d.as_str())
            .collect()
    }
}

/// Label per cluster: its three highest-degree entity names (ties by name).
pub fn cluster_labels(entities: &[Entity], graph: &EntityGraph, clustering: &Clustering) -> Vec<String> {
    let degrees = graph.degrees();
    clustering
        .clusters()
        .into_iter()
        .map(|members| {
            let mut m: Vec<usize> = members;
            m.sort_by(|&a, &b| degrees[b].cmp(&degrees[a]).then(entities[a].name.cmp(&entities[b].name)));
            m.iter()
                .take(3)
                .map(|&i| entities[i].name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ClusterFile {
    gamma: f64,
    seed: u64,
    #[serde(default)]
    objective: Objective,
    assignment: BTreeMap<String, usize>,
    #[serde(default)]
    quality: f64,
    #[serde(default)]
    trace: Vec<f64>,
}

/// `clusters.json`: gamma, seed and an entity-name to cluster-id map.
pub fn save_clusters(path: &Path, entities: &[Entity], clustering: &Clustering) -> Result<()> {
    let file = ClusterFile {
        gamma: clustering.gamma,
        seed: clustering.seed,
        objective: clustering.objective,
        assignment: entities
            .iter()
            .zip(&clustering.assignment)
            .map(|(e, &c)| (e.name.clone(), c))
            .collect(),
        quality: clustering.quality,
        trace: clustering.trace.clone(),
    };
    crate::io::write_json(path, &file)
}

pub fn load_clusters(path: &Path, entities: &[Entity]) -> Result<Clustering> {
    let file: ClusterFile = crate::io::read_json(path)?;
    let assignment = entities
        .iter()
        .map(|e| {
            file.assignment.get(&e.name).copied().ok_or_else(|| {
                Error::invalid(format!("{}: entity {:?} has no cluster", path.display(), e.name))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Clustering {
        gamma: file.gamma,
        seed: file.seed,
        objective: file.objective,
        assignment,
        quality: file.quality,
        trace: file.trace,
    })
}
