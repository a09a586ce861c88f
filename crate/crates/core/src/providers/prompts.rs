//! Prompt templates and response parsers.
//!
//! Templates ship as text assets and are rendered by plain `{placeholder}`
//! substitution.

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::text::collapse_whitespace;

pub const EXTRACTION: &str = include_str!("../../assets/prompts/extraction.txt");
pub const QUERY_GENERATION_SYSTEM: &str =
    include_str!("../../assets/prompts/query_generation_system.txt");
pub const QUERY_GENERATION_USER: &str =
    include_str!("../../assets/prompts/query_generation_user.txt");
pub const ENTITY_ASSIGNMENT_SYSTEM: &str =
    include_str!("../../assets/prompts/entity_assignment_system.txt");
pub const ENTITY_ASSIGNMENT_USER: &str =
    include_str!("../../assets/prompts/entity_assignment_user.txt");
pub const RELEVANCE_SYSTEM: &str = include_str!("../../assets/prompts/relevance_system.txt");
pub const RELEVANCE_USER: &str = include_str!("../../assets/prompts/relevance_user.txt");

/// Max characters of a document shown to the relevance judge.
const JUDGE_DOC_CHARS: usize = 1500;

fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryLength {
    Short,
    Medium,
    Unrestricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Specificity {
    ProperNouns,
    GenericTerms,
}

/// One cell of the 3x2 (length, specificity) query diversity grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StyleCell {
    pub length: QueryLength,
    pub specificity: Specificity,
}

impl StyleCell {
    pub const LENGTHS: [QueryLength; 3] = [
        QueryLength::Short,
        QueryLength::Medium,
        QueryLength::Unrestricted,
    ];
    pub const SPECIFICITIES: [Specificity; 2] =
        [Specificity::ProperNouns, Specificity::GenericTerms];

    pub fn all() -> impl Iterator<Item = StyleCell> {
        Self::LENGTHS.into_iter().flat_map(|length| {
            Self::SPECIFICITIES
                .into_iter()
                .map(move |specificity| StyleCell {
                    length,
                    specificity,
                })
        })
    }

    /// Index in 0..6, row-major over (length, specificity).
    pub fn index(&self) -> usize {
        let l = Self::LENGTHS.iter().position(|&x| x == self.length).unwrap();
        let s = Self::SPECIFICITIES
            .iter()
            .position(|&x| x == self.specificity)
            .unwrap();
        l * 2 + s
    }

    /// The instruction lines injected as `{style_constraints}`.
    pub fn constraints(&self) -> String {
        let mut lines = Vec::new();
        match self.length {
            QueryLength::Short => lines.push("LENGTH: Your query MUST be exactly 1-2 words only."),
            QueryLength::Medium => lines.push("LENGTH: Your query MUST be exactly 3-4 words only."),
            QueryLength::Unrestricted => {}
        }
        lines.push(match self.specificity {
            Specificity::ProperNouns => "ENTITY STYLE: Use SPECIFIC proper nouns and named entities.",
            Specificity::GenericTerms => {
                "ENTITY STYLE: Use GENERIC category terms, NOT specific names."
            }
        });
        lines.join("\n")
    }
}

pub fn extraction(doc_text: &str) -> String {
    render(EXTRACTION, &[("text", doc_text)])
}

/// (system, user) for query generation.
pub fn query_generation(
    doc: &Document,
    cell: StyleCell,
    type_description: &str,
    type_instructions: &str,
) -> (String, String) {
    let user = render(
        QUERY_GENERATION_USER,
        &[
            ("query_type_description", type_description),
            ("query_type_instructions", type_instructions),
            ("style_constraints", &cell.constraints()),
            ("doc_title", &doc.title),
            ("doc_text", &doc.text),
        ],
    );
    (QUERY_GENERATION_SYSTEM.to_string(), user)
}

/// (system, user) for entity assignment; candidates are `(name, description)`.
pub fn entity_assignment(query: &str, candidates: &[(&str, &str)]) -> (String, String) {
    let list = candidates
        .iter()
        .enumerate()
        .map(|(i, (name, desc))| format!("[{i}] {name}: {}", collapse_whitespace(desc)))
        .collect::<Vec<_>>()
        .join("\n");
    let user = render(
        ENTITY_ASSIGNMENT_USER,
        &[("query_text", query), ("entity_list", &list)],
    );
    (ENTITY_ASSIGNMENT_SYSTEM.to_string(), user)
}

/// (system, user) for relevance filtering of a candidate pool.
pub fn relevance(query: &str, docs: &[&Document]) -> (String, String) {
    let list = docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let body: String = collapse_whitespace(&d.full_text())
                .chars()
                .take(JUDGE_DOC_CHARS)
                .collect();
            format!("[{i}] {body}")
        })
        .collect::<Vec<_>>()
        .join("\n");
    let user = render(
        RELEVANCE_USER,
        &[("query_text", query), ("documents_text", &list)],
    );
    (RELEVANCE_SYSTEM.to_string(), user)
}

/// Parsed `(name, description)` pairs plus the number of lines that could not
/// be interpreted.
#[derive(Debug, Default, PartialEq)]
pub struct ParsedEntities {
    pub entities: Vec<(String, String)>,
    pub bad_lines: usize,
}

#[derive(Deserialize)]
struct JsonEntity {
    name: String,
    #[serde(default)]
    description: String,
}

fn strip_key<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let l = line.trim_start_matches(['-', '*', ' ', '\t']);
    let lower = l.to_ascii_lowercase();
    if lower.starts_with(key) {
        let rest = l[key.len()..].trim_start();
        rest.strip_prefix(':').map(|r| r.trim().trim_matches('"'))
    } else {
        None
    }
}

/// Parse an extraction response. Accepts a JSON array of `{name, description}`,
/// one JSON object per line, `name:` / `description:` line pairs, or
/// `name: description` / `name - description` single lines.
pub fn parse_entities(text: &str) -> ParsedEntities {
    let trimmed = text
        .trim()
        .trim_start_matches("```json")
        .trim_start_matches("```")
        .trim_end_matches("```")
        .trim();
    if trimmed.starts_with('[') {
        if let Ok(list) = serde_json::from_str::<Vec<JsonEntity>>(trimmed) {
            return ParsedEntities {
                entities: list.into_iter().map(|e| (e.name, e.description)).collect(),
                bad_lines: 0,
            };
        }
    }
    let mut out = ParsedEntities::default();
    let mut pending: Option<String> = None;
    for line in trimmed.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            match serde_json::from_str::<JsonEntity>(line.trim_end_matches(',')) {
                Ok(e) => out.entities.push((e.name, e.description)),
                Err(_) => out.bad_lines += 1,
            }
            continue;
        }
        if let Some(name) = strip_key(line, "name") {
            if let Some(prev) = pending.take() {
                out.entities.push((prev, String::new()));
            }
            pending = Some(name.to_string());
            continue;
        }
        if let Some(desc) = strip_key(line, "description") {
            match pending.take() {
                Some(name) => out.entities.push((name, desc.to_string())),
                None => out.bad_lines += 1,
            }
            continue;
        }
        if let Some(prev) = pending.take() {
            out.entities.push((prev, String::new()));
        }
        let body = line.trim_start_matches(['-', '*', ' ', '\t']);
        let body = body
            .split_once(". ")
            .filter(|(n, _)| n.chars().all(|c| c.is_ascii_digit()))
            .map(|(_, rest)| rest)
            .unwrap_or(body);
        if let Some((name, desc)) = body.split_once(": ").or_else(|| body.split_once(" - ")) {
            out.entities
                .push((name.trim().to_string(), desc.trim().to_string()));
        } else {
            out.bad_lines += 1;
        }
    }
    if let Some(prev) = pending {
        out.entities.push((prev, String::new()));
    }
    out
}

/// Parse "0, 2, 5" / "NONE" style index answers, ignoring out-of-range values.
pub fn parse_indices(text: &str, len: usize) -> Vec<usize> {
    if text.trim().eq_ignore_ascii_case("none") {
        return Vec::new();
    }
    let mut out: Vec<usize> = text
        .split(|c: char| !c.is_ascii_digit())
        .filter_map(|t| t.parse::<usize>().ok())
        .filter(|&i| i < len)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}
