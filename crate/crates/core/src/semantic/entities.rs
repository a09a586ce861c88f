use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::providers::{
    dot, l2_normalize, prompts, EmbeddingProvider, EmbeddingRequest, LlmProvider, LlmRequest,
};
use crate::text::normalize_entity_name;

pub const DEFAULT_DIMENSIONS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub description: String,
    pub doc_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub embedding: Vec<f32>,
}

impl Entity {
    /// Text that gets embedded: `name: description`.
    pub fn embedding_text(&self) -> String {
        format!("{}: {}", self.name, self.description)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub documents: usize,
    pub raw_entities: usize,
    pub unique_entities: usize,
    /// Response lines that could not be parsed into an entity.
    pub unparsed_lines: usize,
    /// Documents that yielded no entity at all.
    pub documents_without_entities: Vec<String>,
}

/// Extract, normalize and exact-dedup entities for every document.
///
/// Documents are processed in parallel; results are merged in corpus order so
/// the first description seen for a name is kept. Output is sorted by name.
pub fn extract_entities(
    corpus: &Corpus,
    llm: &dyn LlmProvider,
) -> Result<(Vec<Entity>, ExtractionReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot extract entities from an empty corpus"));
    }
    let responses: Vec<Result<prompts::ParsedEntities>> = corpus
        .as_slice()
        .par_iter()
        .map(|doc| {
            let req = LlmRequest::new(prompts::extraction(&doc.full_text()));
            llm.complete(&req).map(|r| prompts::parse_entities(&r.text))
        })
        .collect();

    let mut report = ExtractionReport {
        documents: corpus.len(),
        ..Default::default()
    };
    let mut merged: BTreeMap<String, Entity> = BTreeMap::new();
    for (doc, parsed) in corpus.iter().zip(responses) {
        let parsed = parsed?;
        report.unparsed_lines += parsed.bad_lines;
        let mut any = false;
        for (raw_name, description) in parsed.entities {
            let name = normalize_entity_name(&raw_name);
            if name.is_empty() {
                report.unparsed_lines += 1;
                continue;
            }
            any = true;
            report.raw_entities += 1;
            merged
                .entry(name.clone())
                .or_insert_with(|| Entity {
                    name,
                    description: description.trim().to_string(),
                    doc_ids: BTreeSet::new(),
                    embedding: Vec::new(),
                })
                .doc_ids
                .insert(doc.id.clone());
        }
        if !any {
            report.documents_without_entities.push(doc.id.clone());
        }
    }
    report.unique_entities = merged.len();
    Ok((merged.into_values().collect(), report))
}

/// Embed every entity from `name: description` and L2-normalize.
pub fn embed_entities(
    entities: &mut [Entity],
    embedder: &dyn EmbeddingProvider,
    dimensions: usize,
) -> Result<()> {
    entities.par_iter_mut().try_for_each(|e| {
        let mut v = embedder
            .embed(&EmbeddingRequest {
                text: e.embedding_text(),
                dimensions,
            })?
            .vector;
        if v.len() != dimensions {
            return Err(Error::invalid(format!(
                "embedding for {:?} has {} dims, expected {dimensions}",
                e.name,
                v.len()
            )));
        }
        l2_normalize(&mut v);
        e.embedding = v;
        Ok(())
    })
}

/// Merge entity pairs whose embeddings have cosine >= `threshold` (transitively).
/// The lexicographically smallest name in a group survives and collects all
/// source documents. Requires embedded entities.
pub fn merge_similar(entities: Vec<Entity>, threshold: f64) -> Vec<Entity> {
    let n = entities.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if dot(&entities[i].embedding, &entities[j].embedding) >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // entities are name-sorted, so the root (smallest index) has the smallest name
    let mut groups: BTreeMap<usize, Entity> = BTreeMap::new();
    for (i, e) in entities.into_iter().enumerate() {
        let root = find(&mut parent, i);
        match groups.get_mut(&root) {
            Some(rep) => rep.doc_ids.extend(e.doc_ids),
            None => {
                groups.insert(root, e);
            }
        }
    }
    groups.into_values().collect()
}

#[derive(Serialize, Deserialize)]
struct EntityRecord<'a> {
    name: std::borrow::Cow<'a, str>,
    description: std::borrow::Cow<'a, str>,
    doc_ids: Vec<std::borrow::Cow<'a, str>>,
}

/// `entities.jsonl`: `{"name", "description", "doc_ids": [..]}` per line.
pub fn save_entities(path: &Path, entities: &[Entity]) -> Result<()> {
    let mut out = String::new();
    for e in entities {
        let rec = EntityRecord {
            name: e.name.as_str().into(),
            description: e.description.as_str().into(),
            doc_ids: e.doc_ids.iter().map(|d| d.as_str().into()).collect(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    crate::io::write_string(path, &out)
}

pub fn load_entities(path: &Path) -> Result<Vec<Entity>> {
    crate::io::read_jsonl::<EntityRecord<'static>>(path).map(|recs| {
        recs.into_iter()
            .map(|r| Entity {
                name: r.name.into_owned(),
                description: r.description.into_owned(),
                doc_ids: r.doc_ids.into_iter().map(|d| d.into_owned()).collect(),
                embedding: Vec::new(),
            })
            .collect()
    })
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    name: String,
    embedding: Vec<f32>,
}

pub fn save_embeddings(path: &Path, entities: &[Entity]) -> Result<()> {
    let mut out = String::new();
    for e in entities {
        out.push_str(&serde_json::to_string(&EmbeddingRecord {
            name: e.name.clone(),
            embedding: e.embedding.clone(),
        })?);
        out.push('\n');
    }
    crate::io::write_string(path, &out)
}

/// Attach saved embeddings to entities by name.
pub fn load_embeddings(path: &Path, entities: &mut [Entity]) -> Result<()> {
    let recs: Vec<EmbeddingRecord> = crate::io::read_jsonl(path)?;
    let by_name: BTreeMap<String, Vec<f32>> =
        recs.into_iter().map(|r| (r.name, r.embedding)).collect();
    for e in entities.iter_mut() {
        e.embedding = by_name.get(&e.name).cloned().ok_or_else(|| {
            Error::invalid(format!("no saved embedding for entity {:?}", e.name))
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Collection, Document};
    use crate::providers::{LlmResponse, StubEmbedder, StubLlm};

    struct Canned(&'static str);

    impl LlmProvider for Canned {
        fn model_name(&self) -> &str {
            "canned"
        }
        fn complete(&self, _: &LlmRequest) -> Result<LlmResponse> {
            Ok(LlmResponse {
                text: self.0.to_string(),
                cache_hit: false,
            })
        }
    }

    fn corpus(texts: &[&str]) -> Corpus {
        Collection::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document {
                    id: format!("d{i}"),
                    title: String::new(),
                    text: t.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn names_are_normalized_and_deduplicated_across_docs() {
        let llm = Canned("- name: Neural-Networks \n  description: models\n- name: ???\n  description: junk");
        let (ents, report) = extract_entities(&corpus(&["a", "b"]), &llm).unwrap();
        assert_eq!(ents.len(), 1);
        assert_eq!(ents[0].name, "neural networks");
        assert_eq!(
            ents[0].doc_ids.iter().map(String::as_str).collect::<Vec<_>>(),
            ["d0", "d1"]
        );
        assert_eq!(report.unparsed_lines, 2);
    }

    #[test]
    fn stub_extraction_and_embedding() {
        let c = corpus(&["cranberry juice study", "apple juice"]);
        let (mut ents, report) = extract_entities(&c, &StubLlm::new(1)).unwrap();
        let names: Vec<&str> = ents.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["apple", "cranberry", "juice", "study"]);
        assert!(report.documents_without_entities.is_empty());
        embed_entities(&mut ents, &StubEmbedder::new(1), DEFAULT_DIMENSIONS).unwrap();
        for e in &ents {
            assert_eq!(e.embedding.len(), 256);
            assert!((dot(&e.embedding, &e.embedding) - 1.0).abs() < 1e-6);
        }
        let expected = StubEmbedder::new(1).vector("juice: stub entity juice", 256);
        assert_eq!(ents[2].embedding, expected);
    }

    #[test]
    fn doc_without_entities_is_reported() {
        let (_, report) = extract_entities(&corpus(&["a b c", "word"]), &StubLlm::new(1)).unwrap();
        assert_eq!(report.documents_without_entities, vec!["d0".to_string()]);
    }

    #[test]
    fn semantic_merge_unions_docs() {
        let mk = |name: &str, doc: &str, v: Vec<f32>| Entity {
            name: name.into(),
            description: String::new(),
            doc_ids: [doc.to_string()].into(),
            embedding: v,
        };
        let ents = vec![
            mk("neural network", "d1", vec![1.0, 0.0]),
            mk("neural networks", "d2", vec![0.99, 0.141]),
            mk("zebra", "d3", vec![0.0, 1.0]),
        ];
        let merged = merge_similar(ents, 0.95);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].name, "neural network");
        assert_eq!(merged[0].doc_ids.len(), 2);
    }
}
