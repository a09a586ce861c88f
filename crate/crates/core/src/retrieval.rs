//! Sparse (BM25), dense and reciprocal-rank-fusion retrieval, plus TREC run
//! files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Query};
use crate::error::{Error, Result};
use crate::providers::{dot, l2_normalize, EmbeddingProvider, EmbeddingRequest};
use crate::text::tokenize;

/// Ranked `(doc id, score)` pairs, best first.
pub type Ranking = Vec<(String, f64)>;
/// Rankings keyed by query id.
pub type Run = BTreeMap<String, Ranking>;

pub const RRF_K: f64 = 60.0;

fn sort_ranking(r: &mut Ranking) {
    r.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

pub struct Bm25Index {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avg_len: f64,
    postings: HashMap<String, Vec<(u32, u32)>>,
}

impl Bm25Index {
    /// Index `title + " " + text` of every document.
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot index an empty corpus"));
        }
        let tokenized: Vec<Vec<String>> = corpus
            .as_slice()
            .par_iter()
            .map(|d| tokenize(&d.full_text()))
            .collect();
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(tokenized.len());
        for (i, toks) in tokenized.iter().enumerate() {
            doc_len.push(toks.len() as u32);
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t.to_string()).or_default().push((i as u32, n));
            }
        }
        let avg_len = doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64;
        Ok(Self {
            params,
            doc_ids: corpus.iter().map(|d| d.id.clone()).collect(),
            doc_len,
            avg_len,
            postings,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.num_docs() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Documents with a positive score, best first. An empty tokenized
    /// query yields an empty ranking.
    pub fn search(&self, query: &str, depth: usize) -> Ranking {
        let mut terms = tokenize(query);
        terms.sort();
        terms.dedup();
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for t in &terms {
            let Some(list) = self.postings.get(t) else {
                continue;
            };
            let idf = self.idf(list.len());
            for &(d, tf) in list {
                let tf = tf as f64;
                let norm = k1 * (1.0 - b + b * self.doc_len[d as usize] as f64 / self.avg_len);
                *scores.entry(d).or_default() += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        let mut out: Ranking = scores
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(d, s)| (self.doc_ids[d as usize].clone(), s))
            .collect();
        sort_ranking(&mut out);
        out.truncate(depth);
        out
    }
}

pub struct DenseIndex {
    doc_ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    dimensions: usize,
}

impl DenseIndex {
    pub fn build(corpus: &Corpus, embedder: &dyn EmbeddingProvider, dimensions: usize) -> Result<Self> {
        let vectors = corpus
            .as_slice()
            .par_iter()
            .map(|d| {
                let mut v = embedder
                    .embed(&EmbeddingRequest {
                        text: d.full_text(),
                        dimensions,
                    })?
                    .vector;
                l2_normalize(&mut v);
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_vectors(corpus.iter().map(|d| d.id.clone()).collect(), vectors)
    }

    pub fn from_vectors(doc_ids: Vec<String>, vectors: Vec<Vec<f32>>) -> Result<Self> {
        if doc_ids.len() != vectors.len() {
            return Err(Error::invalid("one vector per document required"));
        }
        let dimensions = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dimensions) {
            return Err(Error::invalid("document vectors have mixed dimensions"));
        }
        Ok(Self {
            doc_ids,
            vectors,
            dimensions,
        })
    }

    pub fn dimensions(&self) -> usize {
        self.dimensions
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    /// Top documents by dot product; zero-score documents are kept.
    pub fn search(&self, query: &[f32], depth: usize) -> Result<Ranking> {
        if query.len() != self.dimensions {
            return Err(Error::invalid(format!(
                "query has {} dimensions, index has {}",
                query.len(),
                self.dimensions
            )));
        }
        let mut out: Ranking = self
            .doc_ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.clone(), dot(query, v)))
            .collect();
        sort_ranking(&mut out);
        out.truncate(depth);
        Ok(out)
    }

    pub fn embed_query(&self, text: &str, embedder: &dyn EmbeddingProvider) -> Result<Vec<f32>> {
        let mut v = embedder
            .embed(&EmbeddingRequest {
                text: text.to_string(),
                dimensions: self.dimensions,
            })?
            .vector;
        l2_normalize(&mut v);
        Ok(v)
    }
}

/// Reciprocal rank fusion: sum of 1 / (k + rank) over the lists holding a
/// document, ranks starting at 1.
pub fn rrf_fuse(lists: &[&Ranking], k: f64, depth: usize) -> Result<Ranking> {
    if k <= 0.0 {
        return Err(Error::invalid("rrf k must be positive"));
    }
    let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
    for list in lists {
        for (rank, (doc, _)) in list.iter().enumerate() {
            *scores.entry(doc).or_default() += 1.0 / (k + rank as f64 + 1.0);
        }
    }
    let mut out: Ranking = scores.into_iter().map(|(d, s)| (d.to_string(), s)).collect();
    sort_ranking(&mut out);
    out.truncate(depth);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Bm25,
    Dense,
    Hybrid,
}

impl System {
    pub const ALL: [System; 3] = [System::Bm25, System::Dense, System::Hybrid];

    pub fn name(&self) -> &'static str {
        match self {
            System::Bm25 => "bm25",
            System::Dense => "dense",
            System::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25" => Ok(System::Bm25),
            "dense" => Ok(System::Dense),
            "hybrid" => Ok(System::Hybrid),
            other => Err(Error::invalid(format!("unknown retrieval system {other:?}"))),
        }
    }
}

/// Both indexes plus the embedder used for queries.
pub struct Retriever<'a> {
    pub bm25: &'a Bm25Index,
    pub dense: &'a DenseIndex,
    pub embedder: &'a dyn EmbeddingProvider,
    pub rrf_k: f64,
}

impl Retriever<'_> {
    pub fn search(&self, system: System, text: &str, depth: usize) -> Result<Ranking> {
        match system {
            System::Bm25 => Ok(self.bm25.search(text, depth)),
            System::Dense => self.dense.search(&self.dense.embed_query(text, self.embedder)?, depth),
            System::Hybrid => {
                let sparse = self.bm25.search(text, depth);
                let dense = self.dense.search(&self.dense.embed_query(text, self.embedder)?, depth)?;
                rrf_fuse(&[&sparse, &dense], self.rrf_k, depth)
            }
        }
    }

    pub fn run<'q>(&self, system: System, queries: impl IntoIterator<Item = &'q Query>, depth: usize) -> Result<Run> {
        let queries: Vec<&Query> = queries.into_iter().collect();
        queries
            .par_iter()
            .map(|q| {
                let r = self.search(system, &q.text, depth)?;
                if r.is_empty() {
                    log::debug!("{}: empty ranking for query {:?}", system.name(), q.id);
                }
                Ok((q.id.clone(), r))
            })
            .collect()
    }
}

/// `qid Q0 doc rank score tag` per line.
pub fn write_trec(path: &Path, run: &Run, tag: &str) -> Result<()> {
    let mut out = String::new();
    for (q, ranking) in run {
        for (i, (d, s)) in ranking.iter().enumerate() {
            writeln!(out, "{q} Q0 {d} {} {s:.6} {tag}", i + 1).expect("string write");
        }
    }
    crate::io::write_string(path, &out)
}

pub fn read_trec(path: &Path) -> Result<Run> {
    let body = crate::io::read_string(path)?;
    let mut run: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(parse_err(format!("expected 6 fields, found {}", f.len())));
        }
        let rank: usize = f[3].parse().map_err(|_| parse_err(format!("bad rank {:?}", f[3])))?;
        let score: f64 = f[4].parse().map_err(|_| parse_err(format!("bad score {:?}", f[4])))?;
        run.entry(f[0].to_string()).or_default().push((rank, f[2].to_string(), score));
    }
    Ok(run
        .into_iter()
        .map(|(q, mut rows)| {
            rows.sort_by_key(|r| r.0);
            (q, rows.into_iter().map(|(_, d, s)| (d, s)).collect())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Collection, Document};

    fn corpus(docs: &[(&str, &str)]) -> Corpus {
        Collection::new(
            docs.iter()
                .map(|(id, t)| Document {
                    id: id.to_string(),
                    title: String::new(),
                    text: t.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn ids(r: &Ranking) -> Vec<&str> {
        r.iter().map(|(d, _)| d.as_str()).collect()
    }

    #[test]
    fn bm25_hand_example() {
        let idx = Bm25Index::build(&corpus(&[("d1", "cat"), ("d2", "dog"), ("d3", "cat cat")]), Bm25Params::default()).unwrap();
        let r = idx.search("cat", 10);
        assert_eq!(ids(&r), ["d3", "d1"]);
        // avglen 4/3: d1 norm = 1.2 * (0.25 + 0.75 * 0.75) = 0.975
        let idf = (1.0f64 + 1.5 / 2.5).ln();
        assert!((r[1].1 - idf * 2.2 / 1.975).abs() < 1e-12);
        assert!(idx.search("bird", 10).is_empty());
        assert!(idx.search("a", 10).is_empty());
    }

    #[test]
    fn bm25_ties_by_id() {
        let idx = Bm25Index::build(&corpus(&[("b", "same text"), ("a", "same text")]), Bm25Params::default()).unwrap();
        assert_eq!(ids(&idx.search("text", 5)), ["a", "b"]);
    }

    #[test]
    fn dense_orders_and_checks_dims() {
        let idx = DenseIndex::from_vectors(
            vec!["x".into(), "y".into(), "z".into()],
            vec![vec![0.1, 0.0], vec![0.9, 0.0], vec![0.5, 0.0]],
        )
        .unwrap();
        let r = idx.search(&[1.0, 0.0], 2).unwrap();
        assert_eq!(ids(&r), ["y", "z"]);
        let zero = idx.search(&[0.0, 1.0], 3).unwrap();
        assert_eq!(ids(&zero), ["x", "y", "z"]);
        assert!(idx.search(&[1.0], 1).is_err());
    }

    #[test]
    fn rrf_hand_example() {
        let r1: Ranking = vec![("a".into(), 3.0), ("b".into(), 2.0), ("c".into(), 1.0)];
        let r2: Ranking = vec![("b".into(), 3.0), ("a".into(), 2.0), ("c".into(), 1.0)];
        let f = rrf_fuse(&[&r1, &r2], 60.0, 10).unwrap();
        assert_eq!(ids(&f), ["a", "b", "c"]);
        assert!((f[0].1 - (1.0 / 61.0 + 1.0 / 62.0)).abs() < 1e-15);
        assert!((f[2].1 - 2.0 / 63.0).abs() < 1e-15);
        assert!(rrf_fuse(&[&r1], 0.0, 10).is_err());
    }

    #[test]
    fn trec_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.trec");
        let run: Run = BTreeMap::from([("q1".to_string(), vec![("d2".to_string(), 2.5), ("d1".to_string(), 1.0)])]);
        write_trec(&path, &run, "bm25").unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body.lines().next().unwrap(), "q1 Q0 d2 1 2.500000 bm25");
        assert_eq!(read_trec(&path).unwrap(), run);
    }
}
