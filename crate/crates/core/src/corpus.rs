//! BEIR-format corpora, query sets and relevance judgments.
//!
//! `corpus.jsonl` and `queries.jsonl` hold one JSON object per line
//! (`_id`, `title`, `text` / `_id`, `text`); qrels are tab-separated with a
//! `query-id	corpus-id	score` header. Iteration order always equals file
//! order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::nfc_trim;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "_id")]
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    /// Text used for indexing and embedding: `title + " " + text`.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    #[serde(rename = "_id")]
    pub id: String,
    pub text: String,
}

/// Ordered collection with id lookup. Shared by documents and queries.
#[derive(Debug, Clone, Default)]
pub struct Collection<T> {
    items: Vec<T>,
    index: HashMap<String, usize>,
}

pub type Corpus = Collection<Document>;
pub type QuerySet = Collection<Query>;

pub trait HasId {
    fn id(&self) -> &str;
}

impl HasId for Document {
    fn id(&self) -> &str {
        &self.id
    }
}

impl HasId for Query {
    fn id(&self) -> &str {
        &self.id
    }
}

impl<T: HasId> Collection<T> {
    /// Build a collection, rejecting duplicate ids.
    pub fn new(items: Vec<T>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if index.insert(item.id().to_string(), i).is_some() {
                return Err(Error::DuplicateId {
                    path: PathBuf::from("<memory>"),
                    id: item.id().to_string(),
                });
            }
        }
        Ok(Self { items, index })
    }

    pub fn get(&self, id: &str) -> Option<&T> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.items.iter()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Append an item; fails on duplicate id.
    pub fn push(&mut self, item: T) -> Result<()> {
        if self.index.contains_key(item.id()) {
            return Err(Error::DuplicateId {
                path: PathBuf::from("<memory>"),
                id: item.id().to_string(),
            });
        }
        self.index.insert(item.id().to_string(), self.items.len());
        self.items.push(item);
        Ok(())
    }
}

impl<'a, T> IntoIterator for &'a Collection<T> {
    type Item = &'a T;
    type IntoIter = std::slice::Iter<'a, T>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

/// Graded relevance judgments. Zero grades are kept but are not part of D(q).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    pub judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) {
        self.judgments
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }

    pub fn grades(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    /// D(q): documents with grade > 0.
    pub fn relevant(&self, query_id: &str) -> BTreeSet<&str> {
        self.judgments
            .get(query_id)
            .map(|m| {
                m.iter()
                    .filter(|(_, &g)| g > 0)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// Mean |D(q)| over queries with at least one positive judgment.
    pub fn mean_relevant(&self) -> f64 {
        let sizes: Vec<usize> = self
            .judgments
            .keys()
            .map(|q| self.relevant(q).len())
            .filter(|&n| n > 0)
            .collect();
        if sizes.is_empty() {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn parse_jsonl<T, F>(path: &Path, mut validate: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de> + HasId,
    F: FnMut(T) -> std::result::Result<T, String>,
{
    let reader = open(path)?;
    let mut items = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let item: T = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let item = validate(item).map_err(parse_err)?;
        if seen.insert(item.id().to_string(), i + 1).is_some() {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id: item.id().to_string(),
            });
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    Ok(items)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let docs = parse_jsonl(path.as_ref(), |d: Document| {
        let doc = Document {
            id: d.id,
            title: nfc_trim(&d.title),
            text: nfc_trim(&d.text),
        };
        if doc.text.is_empty() {
            return Err(format!("document {:?} has empty text", doc.id));
        }
        Ok(doc)
    })?;
    Collection::new(docs)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<QuerySet> {
    let queries = parse_jsonl(path.as_ref(), |q: Query| {
        let query = Query {
            id: q.id,
            text: nfc_trim(&q.text),
        };
        if query.text.is_empty() {
            return Err(format!("query {:?} has empty text", query.id));
        }
        Ok(query)
    })?;
    Collection::new(queries)
}

const QRELS_HEADER: [&str; 3] = ["query-id", "corpus-id", "score"];

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let mut lines = open(path)?.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    match lines.next() {
        None => {
            return Err(Error::EmptyFile {
                path: path.to_path_buf(),
            })
        }
        Some((_, header)) => {
            let header = header.map_err(|e| Error::io(path, e))?;
            let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
            if cols != QRELS_HEADER {
                return Err(parse_err(
                    1,
                    format!("expected header `query-id\\tcorpus-id\\tscore`, got {header:?}"),
                ));
            }
        }
    }
    let mut qrels = Qrels::default();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(i + 1, format!("expected 3 columns, got {}", cols.len())));
        }
        let grade: i64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(i + 1, format!("non-integer score {:?}", cols[2])))?;
        if grade < 0 {
            return Err(parse_err(i + 1, format!("negative score {grade}")));
        }
        qrels.insert(cols[0].trim(), cols[1].trim(), grade as u32);
    }
    Ok(qrels)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_jsonl(path.as_ref(), corpus.iter())
}

pub fn save_queries(path: impl AsRef<Path>, queries: &QuerySet) -> Result<()> {
    write_jsonl(path.as_ref(), queries.iter())
}

pub fn save_qrels(path: impl AsRef<Path>, qrels: &Qrels) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", QRELS_HEADER.join("\t")).map_err(io)?;
    for (q, docs) in &qrels.judgments {
        for (d, g) in docs {
            writeln!(w, "{q}\t{d}\t{g}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Counts of qrels rows dropped during cross-reference validation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub dropped_unknown_query: usize,
    pub dropped_unknown_doc: usize,
    /// Judged queries left with no positive judgment after validation.
    pub queries_without_relevant: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub name: String,
    pub corpus: Corpus,
    pub queries: QuerySet,
    pub qrels: Qrels,
    pub validation: ValidationReport,
}

impl DatasetBundle {
    /// Cross-validate qrels against corpus and queries. Dangling references
    /// are dropped with a warning and counted.
    pub fn new(name: impl Into<String>, corpus: Corpus, queries: QuerySet, qrels: Qrels) -> Self {
        let mut report = ValidationReport::default();
        let mut clean = Qrels::default();
        for (q, docs) in qrels.judgments {
            if !queries.contains(&q) {
                report.dropped_unknown_query += docs.len();
                continue;
            }
            for (d, g) in docs {
                if corpus.contains(&d) {
                    clean.insert(&q, &d, g);
                } else {
                    report.dropped_unknown_doc += 1;
                }
            }
        }
        report.queries_without_relevant = clean
            .judgments
            .keys()
            .filter(|q| clean.relevant(q).is_empty())
            .count();
        if report.dropped_unknown_query + report.dropped_unknown_doc > 0 {
            log::warn!(
                "dropped {} qrels rows with unknown query ids and {} with unknown doc ids",
                report.dropped_unknown_query,
                report.dropped_unknown_doc
            );
        }
        Self {
            name: name.into(),
            corpus,
            queries,
            qrels: clean,
            validation: report,
        }
    }

    /// Load `<dir>/corpus.jsonl`, `<dir>/queries.jsonl` and `<dir>/qrels/<split>.tsv`.
    pub fn load(dir: impl AsRef<Path>, split: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string());
        let corpus = load_corpus(dir.join("corpus.jsonl"))?;
        let queries = load_queries(dir.join("queries.jsonl"))?;
        let qrels = load_qrels(dir.join("qrels").join(format!("{split}.tsv")))?;
        Ok(Self::new(name, corpus, queries, qrels))
    }

    /// Queries that carry at least one positive judgment, in query-file order.
    pub fn judged_queries(&self) -> Vec<&Query> {
        self.queries
            .iter()
            .filter(|q| !self.qrels.relevant(&q.id).is_empty())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_document_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "{\"_id\":\"d1\",\"title\":\"\",\"text\":\"cat\"}\n");
        let c = load_corpus(&p).unwrap();
        assert_eq!(
            c.get("d1").unwrap(),
            &Document {
                id: "d1".into(),
                title: String::new(),
                text: "cat".into()
            }
        );
    }

    #[test]
    fn duplicate_document_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"_id\":\"d1\",\"title\":\"\",\"text\":\"a\"}\n{\"_id\":\"d1\",\"title\":\"\",\"text\":\"b\"}\n",
        );
        let err = load_corpus(&p).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { ref id, .. } if id == "d1"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"_id\":\"d1\",\"title\":\"\",\"text\":\"a\"}\nnot json\n",
        );
        assert!(matches!(load_corpus(&p).unwrap_err(), Error::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_corpus_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "");
        assert!(matches!(load_corpus(&p).unwrap_err(), Error::EmptyFile { .. }));
    }

    #[test]
    fn query_with_empty_text_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(dir.path(), "q.jsonl", "{\"_id\":\"q1\",\"text\":\"cat\"}\n");
        assert_eq!(load_queries(&ok).unwrap().get("q1").unwrap().text, "cat");
        let bad = write(dir.path(), "q2.jsonl", "{\"_id\":\"q1\",\"text\":\"  \"}\n");
        assert!(matches!(load_queries(&bad).unwrap_err(), Error::Parse { line: 1, .. }));
    }

    #[test]
    fn qrels_zero_grade_kept_but_not_relevant() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "t.tsv",
            "query-id\tcorpus-id\tscore\nq1\td1\t2\nq1\td2\t0\n",
        );
        let qrels = load_qrels(&p).unwrap();
        assert_eq!(qrels.grades("q1").unwrap()["d1"], 2);
        assert_eq!(qrels.grades("q1").unwrap()["d2"], 0);
        assert_eq!(qrels.relevant("q1").into_iter().collect::<Vec<_>>(), vec!["d1"]);
    }

    #[test]
    fn qrels_header_and_score_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.tsv", "q1\td1\t1\n");
        assert!(matches!(load_qrels(&p).unwrap_err(), Error::Parse { line: 1, .. }));
        let p = write(dir.path(), "b.tsv", "query-id\tcorpus-id\tscore\nq1\td1\thigh\n");
        assert!(matches!(load_qrels(&p).unwrap_err(), Error::Parse { line: 2, .. }));
    }

    #[test]
    fn dangling_qrels_are_dropped_and_counted() {
        let corpus = Corpus::new(vec![Document {
            id: "d1".into(),
            title: String::new(),
            text: "x".into(),
        }])
        .unwrap();
        let queries = QuerySet::new(vec![Query {
            id: "q1".into(),
            text: "x".into(),
        }])
        .unwrap();
        let mut qrels = Qrels::default();
        qrels.insert("q1", "d1", 1);
        qrels.insert("q1", "d9", 1);
        qrels.insert("q9", "d1", 1);
        let bundle = DatasetBundle::new("t", corpus, queries, qrels);
        assert_eq!(bundle.validation.dropped_unknown_doc, 1);
        assert_eq!(bundle.validation.dropped_unknown_query, 1);
        assert_eq!(bundle.qrels.relevant("q1").len(), 1);
        for q in bundle.qrels.query_ids() {
            for d in bundle.qrels.relevant(q) {
                assert!(bundle.corpus.contains(d));
            }
        }
    }

    #[test]
    fn corpus_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"_id\":\"d2\",\"title\":\"T\",\"text\":\"b b\"}\n{\"_id\":\"d1\",\"title\":\"\",\"text\":\"a\"}\n";
        let p = write(dir.path(), "c.jsonl", body);
        let c = load_corpus(&p).unwrap();
        assert_eq!(c.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["d2", "d1"]);
        let out = dir.path().join("out.jsonl");
        save_corpus(&out, &c).unwrap();
        assert_eq!(fs::read_to_string(out).unwrap(), body);
    }
}
