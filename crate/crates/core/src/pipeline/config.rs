use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::estimation::Protocol;
use crate::generation::GenerationConfig;
use crate::metrics::{Gain, MetricSpec};
use crate::providers::ProviderConfig;
use crate::retrieval::{Bm25Params, System, RRF_K};
use crate::semantic::{KnnParams, LeidenParams, Objective, DEFAULT_CANDIDATES, DEFAULT_DIMENSIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// BEIR directory with corpus.jsonl, queries.jsonl and qrels/.
    pub dir: PathBuf,
    pub split: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/mini"),
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub llm: ProviderConfig,
    pub embedding: ProviderConfig,
    pub dimensions: usize,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            llm: ProviderConfig::stub(7),
            embedding: ProviderConfig::stub(7),
            dimensions: DEFAULT_DIMENSIONS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Merge entities whose embeddings reach this cosine; off when unset.
    pub merge_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub gamma: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            seed: 7,
            objective: Objective::Cpm,
        }
    }
}

impl ClusteringConfig {
    pub fn params(&self) -> LeidenParams {
        LeidenParams {
            gamma: self.gamma,
            seed: self.seed,
            objective: self.objective,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            gammas: vec![0.5, 1.0, 1.5, 2.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignmentConfig {
    /// Entity candidates retrieved per query before the filter.
    pub candidates: usize,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self {
            candidates: DEFAULT_CANDIDATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StratificationConfig {
    pub buckets: usize,
}

impl Default for StratificationConfig {
    fn default() -> Self {
        Self {
            buckets: crate::stratification::DEFAULT_BUCKETS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub scc_threshold: usize,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            scc_threshold: crate::coverage::DEFAULT_SCC_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub systems: Vec<System>,
    pub depth: usize,
    pub bm25: Bm25Params,
    pub rrf_k: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            systems: System::ALL.to_vec(),
            depth: 1000,
            bm25: Bm25Params::default(),
            rrf_k: RRF_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Specs such as `ndcg@10`.
    pub specs: Vec<String>,
    pub gain: Gain,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            specs: vec!["ndcg@10".into(), "recall@100".into(), "map@10".into()],
            gain: Gain::default(),
            bootstrap_resamples: crate::metrics::DEFAULT_RESAMPLES,
            bootstrap_seed: 7,
        }
    }
}

impl MetricsConfig {
    pub fn parsed(&self) -> Result<Vec<MetricSpec>> {
        self.specs.iter().map(|s| s.parse()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonConfig {
    pub protocols: Vec<Protocol>,
    pub resamples: usize,
    pub seed: u64,
    /// Metric compared across systems; must be one of the evaluated specs.
    pub metric: String,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            protocols: Protocol::ALL.to_vec(),
            resamples: 1000,
            seed: 7,
            metric: "ndcg@10".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Include the generation stage in `pipeline` and the report.
    pub generate: bool,
    /// Metric used for the cluster scatter and boxplot figures.
    pub figure_metric: String,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            generate: true,
            figure_metric: "ndcg@10".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Root of the stage cache; relative paths resolve against the config file.
    pub workspace: PathBuf,
    pub providers: ProvidersConfig,
    pub extraction: ExtractionConfig,
    pub graph: KnnParams,
    pub clustering: ClusteringConfig,
    pub sweep: SweepConfig,
    pub assignment: AssignmentConfig,
    pub stratification: StratificationConfig,
    pub coverage: CoverageConfig,
    pub retrieval: RetrievalConfig,
    pub metrics: MetricsConfig,
    pub comparison: ComparisonConfig,
    pub generation: GenerationConfig,
    pub report: ReportConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// Read a JSON config, apply `key=value` overrides and validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let body = crate::io::read_string(path)?;
        let mut value: Value = serde_json::from_str(&body).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_value_with(&mut value, overrides, base)
    }

    pub fn from_value_with(value: &mut Value, overrides: &[String], base_dir: PathBuf) -> Result<Self> {
        for o in overrides {
            apply_override(value, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value.clone()).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.resolve(&self.dataset.dir)
    }

    pub fn workspace_dir(&self) -> PathBuf {
        let w = if self.workspace.as_os_str().is_empty() {
            Path::new("work")
        } else {
            &self.workspace
        };
        self.resolve(w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        self.providers.llm.validate()?;
        self.providers.embedding.validate()?;
        if self.providers.dimensions == 0 {
            return bad("providers.dimensions must be positive".into());
        }
        if let Some(t) = self.extraction.merge_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("extraction.merge_threshold must be in (0, 1], got {t}"));
            }
        }
        if self.graph.k == 0 || !(-1.0..=1.0).contains(&self.graph.tau) {
            return bad("graph.k must be positive and graph.tau in [-1, 1]".into());
        }
        if !(self.clustering.gamma > 0.0) {
            return bad(format!("clustering.gamma must be positive, got {}", self.clustering.gamma));
        }
        if self.sweep.gammas.iter().any(|g| !(*g > 0.0)) {
            return bad("sweep.gammas must all be positive".into());
        }
        if self.assignment.candidates == 0 || self.stratification.buckets == 0 {
            return bad("assignment.candidates and stratification.buckets must be positive".into());
        }
        if self.retrieval.systems.is_empty() || self.retrieval.depth == 0 {
            return bad("retrieval needs at least one system and a positive depth".into());
        }
        if !(self.retrieval.rrf_k > 0.0) || self.retrieval.bm25.k1 < 0.0 || !(0.0..=1.0).contains(&self.retrieval.bm25.b) {
            return bad("retrieval parameters out of range (rrf_k > 0, k1 >= 0, 0 <= b <= 1)".into());
        }
        let specs = self.metrics.parsed()?;
        if specs.is_empty() {
            return bad("metrics.specs must not be empty".into());
        }
        for (field, m) in [("comparison.metric", &self.comparison.metric), ("report.figure_metric", &self.report.figure_metric)] {
            let spec: MetricSpec = m.parse()?;
            if !specs.contains(&spec) {
                return bad(format!("{field} {m:?} is not among metrics.specs"));
            }
        }
        if self.comparison.resamples == 0 || self.metrics.bootstrap_resamples == 0 {
            return bad("resample counts must be positive".into());
        }
        self.generation.validate()
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid(format!("bad override key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::invalid(format!("override {key:?} descends into a non-object")));
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::invalid(format!("override {key:?} descends into a non-object"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_parse_json_then_strings() {
        let mut v = json!({"clustering": {"gamma": 1.0}});
        apply_override(&mut v, "clustering.gamma=2.5").unwrap();
        apply_override(&mut v, "dataset.dir=/tmp/x").unwrap();
        apply_override(&mut v, "retrieval.systems=[\"bm25\"]").unwrap();
        assert_eq!(v["clustering"]["gamma"], json!(2.5));
        assert_eq!(v["dataset"]["dir"], json!("/tmp/x"));
        let cfg = RunConfig::from_value_with(&mut v, &[], PathBuf::new()).unwrap();
        assert_eq!(cfg.retrieval.systems, vec![System::Bm25]);
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "clustering.gamma.x=1").is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_fail_validation() {
        let mut v = json!({"clustering": {"gama": 1.0}});
        assert!(RunConfig::from_value_with(&mut v, &[], PathBuf::new()).is_err());
        let mut v = json!({});
        assert!(RunConfig::from_value_with(&mut v, &["clustering.gamma=0".into()], PathBuf::new()).is_err());
        assert!(RunConfig::from_value_with(&mut v, &["comparison.metric=\"ndcg@5\"".into()], PathBuf::new()).is_err());
        assert!(RunConfig::from_value_with(&mut json!({}), &[], PathBuf::new()).is_ok());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
    }
}
