//! Deterministic offline stand-ins for the model services.
//!
//! The stub LLM recognises which prompt it was given from the template text
//! and answers with simple token rules:
//! - extraction: every unique token of length >= 4 becomes an entity with
//!   description `stub entity <token>`;
//! - query generation: the document's first content tokens (2 for SHORT,
//!   4 for MEDIUM, 5 otherwise);
//! - relevance: a document is relevant iff it shares >= 2 distinct
//!   non-stopword tokens with the query;
//! - entity assignment: an entity is relevant iff the query contains
//!   min(2, n) of the n content tokens of its name.
//!
//! The stub embedder is seeded feature hashing with +/-1 signs, L2-normalized.

use std::collections::BTreeSet;

use super::{
    l2_normalize, validate_embedding_request, validate_llm_request, EmbeddingProvider,
    EmbeddingRequest, EmbeddingVector, LlmProvider, LlmRequest, LlmResponse,
};
use crate::error::Result;
use crate::text::{content_tokens, raw_tokens};

#[derive(Debug, Clone)]
pub struct StubLlm {
    seed: u64,
}

impl StubLlm {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn after<'a>(haystack: &'a str, marker: &str) -> Option<&'a str> {
    haystack.find(marker).map(|i| &haystack[i + marker.len()..])
}

fn quoted_query(prompt: &str) -> Option<String> {
    let rest = after(prompt, "Search Query: \"")?;
    let line = rest.lines().next()?;
    Some(line.rsplit_once('"').map(|(q, _)| q).unwrap_or(line).to_string())
}

/// `[i] body` lines following `header`, up to the first blank line.
fn numbered_items(prompt: &str, header: &str) -> Vec<String> {
    let Some(rest) = after(prompt, header) else {
        return Vec::new();
    };
    rest.trim_start_matches('\n')
        .lines()
        .take_while(|l| !l.trim().is_empty())
        .filter_map(|l| l.split_once("] ").map(|(_, body)| body.to_string()))
        .collect()
}

fn answer_indices(indices: Vec<usize>) -> String {
    if indices.is_empty() {
        "NONE".to_string()
    } else {
        indices
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Entities for a document text: unique tokens with >= 4 chars, first-seen order.
pub(crate) fn stub_entities(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    raw_tokens(text)
        .into_iter()
        .filter(|t| t.chars().count() >= 4)
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

pub(crate) fn shares_two_tokens(a: &str, b: &str) -> bool {
    let ta: BTreeSet<String> = content_tokens(a).into_iter().collect();
    let tb: BTreeSet<String> = content_tokens(b).into_iter().collect();
    ta.intersection(&tb).count() >= 2
}

impl StubLlm {
    fn extraction(&self, prompt: &str) -> String {
        let doc = after(prompt, "\nDocument:\n").unwrap_or("");
        stub_entities(doc)
            .into_iter()
            .map(|t| format!("- name: {t}\n  description: stub entity {t}"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn query_generation(&self, prompt: &str) -> String {
        let limit = if prompt.contains("exactly 1-2 words") {
            2
        } else if prompt.contains("exactly 3-4 words") {
            4
        } else {
            5
        };
        let title = after(prompt, "\nTitle: ")
            .and_then(|r| r.lines().next())
            .unwrap_or("");
        let content = after(prompt, "\nContent: ")
            .map(|r| {
                r.split("\n\nGenerate ONE search query")
                    .next()
                    .unwrap_or(r)
            })
            .unwrap_or("");
        content_tokens(&format!("{title} {content}"))
            .into_iter()
            .take(limit)
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn relevance(&self, prompt: &str) -> String {
        let query = quoted_query(prompt).unwrap_or_default();
        let docs = numbered_items(prompt, "Candidate Documents:\n");
        let hits = docs
            .iter()
            .enumerate()
            .filter(|(_, d)| shares_two_tokens(&query, d))
            .map(|(i, _)| i)
            .collect();
        answer_indices(hits)
    }

    fn entity_assignment(&self, prompt: &str) -> String {
        let query = quoted_query(prompt).unwrap_or_default();
        let query_tokens: BTreeSet<String> = content_tokens(&query).into_iter().collect();
        let items = numbered_items(prompt, "Candidate Entities:\n");
        let hits = items
            .iter()
            .enumerate()
            .filter(|(_, item)| {
                let name = item.split_once(": ").map(|(n, _)| n).unwrap_or(item);
                let name_tokens: BTreeSet<String> = content_tokens(name).into_iter().collect();
                let need = name_tokens.len().min(2);
                need > 0 && name_tokens.intersection(&query_tokens).count() >= need
            })
            .map(|(i, _)| i)
            .collect();
        answer_indices(hits)
    }
}

impl LlmProvider for StubLlm {
    fn model_name(&self) -> &str {
        "stub"
    }

    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        validate_llm_request(req)?;
        let p = &req.prompt;
        let text = if p.starts_with("Extract key entities from this document.") {
            self.extraction(p)
        } else if p.starts_with("Generate a search query that this document would answer.") {
            self.query_generation(p)
        } else if p.starts_with("Judge which documents are RELEVANT") {
            self.relevance(p)
        } else if p.starts_with("Identify which entities from the candidate list") {
            self.entity_assignment(p)
        } else {
            String::new()
        };
        Ok(LlmResponse {
            text,
            cache_hit: false,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StubEmbedder {
    seed: u64,
}

impl StubEmbedder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded 64-bit token hash (FNV-1a folded through splitmix64).
fn token_hash(seed: u64, token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ splitmix64(seed);
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

impl StubEmbedder {
    pub fn vector(&self, text: &str, dims: usize) -> Vec<f32> {
        let mut v = vec![0f32; dims];
        let mut tokens = raw_tokens(text);
        if tokens.is_empty() {
            tokens.push(text.to_string());
        }
        for t in &tokens {
            let h = token_hash(self.seed, t);
            let bucket = (h % dims as u64) as usize;
            v[bucket] += if h >> 63 == 1 { 1.0 } else { -1.0 };
        }
        if l2_normalize(&mut v) == 0.0 {
            // every token cancelled out; fall back to the whole-text feature
            let h = token_hash(self.seed, text);
            v[(h % dims as u64) as usize] = 1.0;
        }
        v
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn model_name(&self) -> &str {
        "stub"
    }

    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingVector> {
        validate_embedding_request(req)?;
        Ok(EmbeddingVector {
            vector: self.vector(&req.text, req.dimensions),
            cache_hit: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::providers::{dot, prompts};

    fn embed(e: &StubEmbedder, text: &str, dims: usize) -> Vec<f32> {
        e.embed(&EmbeddingRequest {
            text: text.into(),
            dimensions: dims,
        })
        .unwrap()
        .vector
    }

    #[test]
    fn embedding_is_deterministic_and_sized() {
        let e = StubEmbedder::new(7);
        assert_eq!(embed(&e, "cat", 8), embed(&e, "cat", 8));
        assert_eq!(embed(&e, "cat", 256).len(), 256);
        let v = embed(&e, "the cat sat", 256);
        assert!((dot(&v, &v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn distinct_tokens_not_collinear() {
        let e = StubEmbedder::new(7);
        let c = dot(&embed(&e, "cat", 8), &embed(&e, "dog", 8));
        assert!(c < 1.0 - 1e-9, "cosine {c}");
    }

    #[test]
    fn embedding_rejects_bad_requests() {
        let e = StubEmbedder::new(7);
        let zero = EmbeddingRequest {
            text: "x".into(),
            dimensions: 0,
        };
        assert!(e.embed(&zero).is_err());
        let empty = EmbeddingRequest {
            text: " ".into(),
            dimensions: 4,
        };
        assert!(e.embed(&empty).is_err());
    }

    #[test]
    fn punctuation_only_text_still_has_norm() {
        let e = StubEmbedder::new(3);
        let v = embed(&e, "!!!", 16);
        assert!((dot(&v, &v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn extraction_follows_token_rule() {
        let llm = StubLlm::new(1);
        let out = llm
            .complete(&LlmRequest::new(prompts::extraction("The cat sat on the mat, then the Cats sat")))
            .unwrap()
            .text;
        let parsed = prompts::parse_entities(&out);
        let names: Vec<&str> = parsed.entities.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["then", "cats"]);
        assert_eq!(parsed.entities[1].1, "stub entity cats");
    }

    #[test]
    fn query_generation_honors_length_cell() {
        use prompts::{QueryLength, Specificity, StyleCell};
        let llm = StubLlm::new(1);
        let doc = Document {
            id: "d".into(),
            title: "Cranberry juice".into(),
            text: "Cranberry juice may reduce bladder infection recurrence in adult women.".into(),
        };
        let run = |length| {
            let cell = StyleCell {
                length,
                specificity: Specificity::ProperNouns,
            };
            let (sys, user) = prompts::query_generation(&doc, cell, "d", "i");
            llm.complete(&LlmRequest::new(user).with_system(sys))
                .unwrap()
                .text
        };
        assert_eq!(run(QueryLength::Short), "cranberry juice");
        assert_eq!(run(QueryLength::Medium), "cranberry juice cranberry juice");
        assert_eq!(
            run(QueryLength::Unrestricted),
            "cranberry juice cranberry juice reduce"
        );
    }

    #[test]
    fn relevance_needs_two_shared_tokens() {
        let llm = StubLlm::new(1);
        let d = |t: &str| Document {
            id: t.into(),
            title: String::new(),
            text: t.into(),
        };
        let docs = [d("cranberry juice helps"), d("juice only"), d("nothing here")];
        let refs: Vec<&Document> = docs.iter().collect();
        let (sys, user) = prompts::relevance("cranberry juice", &refs);
        let out = llm.complete(&LlmRequest::new(user).with_system(sys)).unwrap();
        assert_eq!(out.text, "0");
        let (sys, user) = prompts::relevance("zebra", &refs);
        let out = llm.complete(&LlmRequest::new(user).with_system(sys)).unwrap();
        assert_eq!(out.text, "NONE");
    }

    #[test]
    fn entity_assignment_rule() {
        let llm = StubLlm::new(1);
        let cands = [
            ("cranberry", "stub entity cranberry"),
            ("juice", "stub entity juice"),
            ("apple juice", "a drink"),
            ("zebra", "stub entity zebra"),
        ];
        let (sys, user) = prompts::entity_assignment("cranberry juice benefits", &cands);
        let out = llm.complete(&LlmRequest::new(user).with_system(sys)).unwrap();
        assert_eq!(prompts::parse_indices(&out.text, 4), vec![0, 1]);
    }
}
