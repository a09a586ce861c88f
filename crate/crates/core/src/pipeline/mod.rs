//! Stage orchestration over a content-addressed workspace.
//!
//! Every stage writes into `<workspace>/<stage>/<key>/`, where the key hashes
//! the config slice the stage reads plus the keys of its upstream stages, so
//! runs with different settings never overwrite each other. A `.done` marker
//! is written last; a stage directory without one is treated as absent.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{DatasetBundle, Qrels};
use crate::coverage::{self, CoverageReport, StateRecord};
use crate::error::{Error, Result};
use crate::estimation::{self, bootstrap_winrate, regime_profile, sigma_report, variance_decomposition, Pooling};
use crate::generation::{self, GenerationContext};
use crate::io::{read_json, write_csv, write_json};
use crate::metrics::{self, bootstrap_mean, evaluate_run, MetricSpec};
use crate::providers::{
    build_embedder, build_llm, EmbeddingProvider, EmbeddingRequest, EmbeddingVector, LlmProvider, LlmRequest,
    LlmResponse, ProviderConfig, ProviderMode,
};
use crate::retrieval::{read_trec, write_trec, Bm25Index, DenseIndex, Retriever, System};
use crate::semantic::{
    self, build_knn_graph, cluster_labels, embed_entities, extract_entities, leiden_cluster, map_documents,
    map_queries, merge_similar, resolution_sweep, ClusterMaps, Clustering, Entity, EntityGraph, EntityIndex,
};
use crate::stratification::{compute_signals, vrr, write_signals_csv, Regimes, StratumKey, StructuralSignals};

pub use config::RunConfig;
pub use report::{box_stats, structural_grid, BoxStats, Grid, GridCell};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Extract,
    Graph,
    Cluster,
    Sweep,
    Assign,
    Stratify,
    Coverage,
    Retrieve,
    Evaluate,
    Profile,
    Grid,
    Compare,
    Generate,
    Report,
}

impl Stage {
    /// Dependency order.
    pub const ALL: [Stage; 15] = [
        Stage::Ingest,
        Stage::Extract,
        Stage::Graph,
        Stage::Cluster,
        Stage::Sweep,
        Stage::Assign,
        Stage::Stratify,
        Stage::Coverage,
        Stage::Retrieve,
        Stage::Evaluate,
        Stage::Profile,
        Stage::Grid,
        Stage::Compare,
        Stage::Generate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Extract => "extract",
            Stage::Graph => "graph",
            Stage::Cluster => "cluster",
            Stage::Sweep => "sweep",
            Stage::Assign => "assign",
            Stage::Stratify => "stratify",
            Stage::Coverage => "coverage",
            Stage::Retrieve => "retrieve",
            Stage::Evaluate => "evaluate",
            Stage::Profile => "profile",
            Stage::Grid => "grid",
            Stage::Compare => "compare",
            Stage::Generate => "generate",
            Stage::Report => "report",
        }
    }

    fn base_deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Ingest => &[],
            Extract => &[Ingest],
            Graph => &[Extract],
            Cluster | Sweep => &[Graph],
            Assign => &[Cluster],
            Stratify | Coverage => &[Assign],
            Retrieve => &[Ingest],
            Evaluate => &[Retrieve],
            Profile | Grid => &[Evaluate, Stratify],
            Compare => &[Evaluate, Assign],
            Generate => &[Stratify],
            Report => &[Sweep, Coverage, Profile, Grid, Compare],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Built,
    Reused,
}

struct Counting<T: ?Sized> {
    inner: Arc<T>,
    calls: Arc<AtomicUsize>,
}

impl LlmProvider for Counting<dyn LlmProvider> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(req)
    }
}

impl EmbeddingProvider for Counting<dyn EmbeddingProvider> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingVector> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.embed(req)
    }
}

/// Evaluation output as stored on disk: metric -> query -> value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoredEval {
    pub values: BTreeMap<String, BTreeMap<String, f64>>,
    pub excluded: Vec<String>,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricProfile {
    pub n: usize,
    pub naive_mean: f64,
    pub by_cluster: estimation::RegimeProfile<usize>,
    /// Scored queries without a primary cluster, left out of `by_cluster`.
    pub without_cluster: usize,
    pub by_buckets: estimation::RegimeProfile<(usize, usize)>,
    pub by_stratum: estimation::RegimeProfile<StratumKey>,
    pub decomposition: Option<estimation::Decomposition>,
    pub sigma_query: Option<estimation::SigmaReport>,
    pub sigma_cluster: Option<estimation::SigmaReport>,
    pub vrr_delta: Option<f64>,
    pub vrr_jaccard: Option<f64>,
    pub vrr_buckets: Option<f64>,
    pub vrr_cluster: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub system_a: System,
    pub system_b: System,
    pub metric: String,
    /// Queries scored by both systems and carrying a primary cluster.
    pub n: usize,
    pub clusters: usize,
    pub result: estimation::ComparisonReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub msc: f64,
    pub scc: f64,
    pub zqc: usize,
    /// Clusters holding a relevant document of some query.
    pub relevant_doc_clusters: usize,
    pub n_delta: Vec<usize>,
    pub n_jaccard: Vec<usize>,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub requested: usize,
    pub accepted: usize,
    pub attempts: usize,
    pub iterations: usize,
    pub guard_tripped: bool,
    pub multi_cluster_acceptances: usize,
    pub weights: generation::ScoreWeights,
    pub before: CoverageSummary,
    pub after: CoverageSummary,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    root: PathBuf,
    keys: BTreeMap<Stage, String>,
    bundle: Option<Arc<DatasetBundle>>,
    llm: Option<Arc<dyn LlmProvider>>,
    embedder: Option<Arc<dyn EmbeddingProvider>>,
    calls: Arc<AtomicUsize>,
}

fn provider_fingerprint(p: &ProviderConfig) -> Value {
    json!({"mode": p.mode, "model": p.model, "base_url": p.base_url, "seed": p.seed})
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(sha_hex(&bytes))
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.workspace_dir();
        let mut p = Self {
            cfg,
            root,
            keys: BTreeMap::new(),
            bundle: None,
            llm: None,
            embedder: None,
            calls: Arc::new(AtomicUsize::new(0)),
        };
        p.compute_keys()?;
        Ok(p)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(&self, stage: Stage) -> &str {
        &self.keys[&stage]
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name()).join(self.key(stage))
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.stage_dir(stage).join(".done").is_file()
    }

    /// Provider requests issued by this pipeline so far.
    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn deps(&self, stage: Stage) -> Vec<Stage> {
        let mut d = stage.base_deps().to_vec();
        if stage == Stage::Report && self.cfg.report.generate {
            d.push(Stage::Generate);
        }
        d
    }

    fn stage_config(&self, stage: Stage) -> Result<Value> {
        let c = &self.cfg;
        let prov = json!({
            "llm": provider_fingerprint(&c.providers.llm),
            "embedding": provider_fingerprint(&c.providers.embedding),
            "dimensions": c.providers.dimensions,
        });
        Ok(match stage {
            Stage::Ingest => {
                let dir = c.dataset_dir();
                let qrels = dir.join("qrels").join(format!("{}.tsv", c.dataset.split));
                json!({
                    "corpus": file_hash(&dir.join("corpus.jsonl"))?,
                    "queries": file_hash(&dir.join("queries.jsonl"))?,
                    "qrels": file_hash(&qrels)?,
                })
            }
            Stage::Extract => json!({"providers": prov, "extraction": c.extraction}),
            Stage::Graph => json!(c.graph),
            Stage::Cluster => json!(c.clustering),
            Stage::Sweep => json!({"sweep": c.sweep, "seed": c.clustering.seed, "objective": c.clustering.objective}),
            Stage::Assign => json!({"providers": prov, "assignment": c.assignment}),
            Stage::Stratify => json!(c.stratification),
            Stage::Coverage => json!(c.coverage),
            Stage::Retrieve => json!({"providers": prov, "retrieval": c.retrieval}),
            Stage::Evaluate => json!({"metrics": c.metrics}),
            Stage::Profile | Stage::Grid => Value::Null,
            Stage::Compare => json!(c.comparison),
            Stage::Generate => json!({
                "providers": prov,
                "generation": c.generation,
                "bm25": c.retrieval.bm25,
                "assignment": c.assignment,
            }),
            Stage::Report => json!({"report": c.report, "coverage": c.coverage}),
        })
    }

    fn compute_keys(&mut self) -> Result<()> {
        for stage in Stage::ALL {
            let deps: Vec<&str> = self.deps(stage).iter().map(|d| self.keys[d].as_str()).collect();
            let body = json!({"stage": stage.name(), "config": self.stage_config(stage)?, "deps": deps});
            let key = sha_hex(serde_json::to_string(&body)?.as_bytes())[..16].to_string();
            self.keys.insert(stage, key);
        }
        Ok(())
    }

    fn artifact(&self, stage: Stage, name: &str) -> Result<PathBuf> {
        if !self.is_done(stage) {
            return Err(Error::MissingArtifact {
                artifact: self.stage_dir(stage),
                producer: stage.name().to_string(),
            });
        }
        Ok(self.stage_dir(stage).join(name))
    }

    /// Run one stage; upstream stages must already be complete.
    pub fn run_stage(&mut self, stage: Stage, force: bool) -> Result<Outcome> {
        for d in self.deps(stage) {
            if !self.is_done(d) {
                return Err(Error::MissingArtifact {
                    artifact: self.stage_dir(d),
                    producer: d.name().to_string(),
                });
            }
        }
        if self.is_done(stage) && !force {
            log::info!("{stage}: reusing {}", self.stage_dir(stage).display());
            return Ok(Outcome::Reused);
        }
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        let started = Instant::now();
        self.build(stage, &dir)?;
        let secs = started.elapsed().as_secs_f64();
        write_json(&dir.join(".done"), &json!({"stage": stage.name(), "key": self.key(stage)}))?;
        self.record_timing(stage, secs)?;
        log::info!("{stage}: built in {secs:.2}s -> {}", dir.display());
        Ok(Outcome::Built)
    }

    /// Run `target` and whatever it needs, in dependency order.
    pub fn run_through(&mut self, target: Stage, force: bool) -> Result<Vec<(Stage, Outcome)>> {
        let mut order = Vec::new();
        self.closure(target, &mut order);
        let mut out = Vec::new();
        for s in order {
            out.push((s, self.run_stage(s, force)?));
        }
        Ok(out)
    }

    fn closure(&self, stage: Stage, order: &mut Vec<Stage>) {
        for d in self.deps(stage) {
            self.closure(d, order);
        }
        if !order.contains(&stage) {
            order.push(stage);
        }
    }

    /// Wall-clock seconds per stage, kept apart from the report so the
    /// report stays byte-stable.
    fn record_timing(&self, stage: Stage, secs: f64) -> Result<()> {
        let path = self.root.join("timings.json");
        let mut t: BTreeMap<String, f64> = if path.is_file() { read_json(&path).unwrap_or_default() } else { BTreeMap::new() };
        t.insert(format!("{}/{}", stage.name(), self.key(stage)), secs);
        write_json(&path, &t)
    }

    pub fn report_path(&self) -> PathBuf {
        self.stage_dir(Stage::Report).join("report.json")
    }

    // ---- shared inputs ----

    fn bundle(&mut self) -> Result<Arc<DatasetBundle>> {
        if self.bundle.is_none() {
            let b = DatasetBundle::load(self.cfg.dataset_dir(), &self.cfg.dataset.split)?;
            self.bundle = Some(Arc::new(b));
        }
        Ok(self.bundle.clone().expect("loaded"))
    }

    fn with_cache_dir(&self, p: &ProviderConfig) -> ProviderConfig {
        let mut p = p.clone();
        if p.mode == ProviderMode::Remote && p.cache_dir.is_none() {
            p.cache_dir = Some(self.root.join("cache"));
        }
        p
    }

    fn llm(&mut self) -> Result<Arc<dyn LlmProvider>> {
        if self.llm.is_none() {
            let inner = build_llm(&self.with_cache_dir(&self.cfg.providers.llm))?;
            self.llm = Some(Arc::new(Counting {
                inner,
                calls: self.calls.clone(),
            }));
        }
        Ok(self.llm.clone().expect("built"))
    }

    fn embedder(&mut self) -> Result<Arc<dyn EmbeddingProvider>> {
        if self.embedder.is_none() {
            let inner = build_embedder(&self.with_cache_dir(&self.cfg.providers.embedding))?;
            self.embedder = Some(Arc::new(Counting {
                inner,
                calls: self.calls.clone(),
            }));
        }
        Ok(self.embedder.clone().expect("built"))
    }

    pub fn load_entities(&self) -> Result<Vec<Entity>> {
        let mut e = semantic::load_entities(&self.artifact(Stage::Extract, "entities.jsonl")?)?;
        semantic::load_embeddings(&self.artifact(Stage::Extract, "embeddings.jsonl")?, &mut e)?;
        Ok(e)
    }

    pub fn load_graph(&self, nodes: usize) -> Result<EntityGraph> {
        EntityGraph::load_edges(&self.artifact(Stage::Graph, "edges.jsonl")?, nodes)
    }

    pub fn load_clustering(&self, entities: &[Entity]) -> Result<Clustering> {
        semantic::load_clusters(&self.artifact(Stage::Cluster, "clusters.json")?, entities)
    }

    pub fn load_labels(&self) -> Result<Vec<String>> {
        read_json(&self.artifact(Stage::Cluster, "labels.json")?)
    }

    pub fn load_maps(&self) -> Result<ClusterMaps> {
        read_json(&self.artifact(Stage::Assign, "maps.json")?)
    }

    pub fn load_signals(&self) -> Result<(BTreeMap<String, StructuralSignals>, Regimes)> {
        Ok((
            read_json(&self.artifact(Stage::Stratify, "signals.json")?)?,
            read_json(&self.artifact(Stage::Stratify, "regimes.json")?)?,
        ))
    }

    pub fn load_eval(&self, system: System) -> Result<StoredEval> {
        read_json(&self.artifact(Stage::Evaluate, &format!("eval/{}.json", system.name()))?)
    }

    fn build(&mut self, stage: Stage, dir: &Path) -> Result<()> {
        match stage {
            Stage::Ingest => self.build_ingest(dir),
            Stage::Extract => self.build_extract(dir),
            Stage::Graph => self.build_graph(dir),
            Stage::Cluster => self.build_cluster(dir),
            Stage::Sweep => self.build_sweep(dir),
            Stage::Assign => self.build_assign(dir),
            Stage::Stratify => self.build_stratify(dir),
            Stage::Coverage => self.build_coverage(dir),
            Stage::Retrieve => self.build_retrieve(dir),
            Stage::Evaluate => self.build_evaluate(dir),
            Stage::Profile => self.build_profile(dir),
            Stage::Grid => self.build_grid(dir),
            Stage::Compare => self.build_compare(dir),
            Stage::Generate => self.build_generate(dir),
            Stage::Report => self.build_report(dir),
        }
    }

    fn build_ingest(&mut self, dir: &Path) -> Result<()> {
        let b = self.bundle()?;
        write_json(
            &dir.join("dataset.json"),
            &json!({
                "name": b.name,
                "documents": b.corpus.len(),
                "queries": b.queries.len(),
                "judged_queries": b.judged_queries().len(),
                "mean_relevant": b.qrels.mean_relevant(),
                "validation": b.validation,
            }),
        )
    }

    fn build_extract(&mut self, dir: &Path) -> Result<()> {
        let b = self.bundle()?;
        let llm = self.llm()?;
        let embedder = self.embedder()?;
        let (mut entities, report) = extract_entities(&b.corpus, llm.as_ref())?;
        embed_entities(&mut entities, embedder.as_ref(), self.cfg.providers.dimensions)?;
        if let Some(t) = self.cfg.extraction.merge_threshold {
            entities = merge_similar(entities, t);
        }
        semantic::save_entities(&dir.join("entities.jsonl"), &entities)?;
        semantic::save_embeddings(&dir.join("embeddings.jsonl"), &entities)?;
        write_json(&dir.join("extraction.json"), &json!({"report": report, "entities_after_merge": entities.len()}))
    }

    fn build_graph(&mut self, dir: &Path) -> Result<()> {
        let entities = self.load_entities()?;
        let vectors: Vec<Vec<f32>> = entities.iter().map(|e| e.embedding.clone()).collect();
        let g = build_knn_graph(&vectors, &self.cfg.graph)?;
        g.save_edges(&dir.join("edges.jsonl"))?;
        let names: Vec<&str> = entities.iter().map(|e| e.name.as_str()).collect();
        write_json(&dir.join("nodes.json"), &names)?;
        write_json(
            &dir.join("graph.json"),
            &json!({"nodes": g.nodes, "edges": g.edges.len(), "mean_weight": g.mean_weight(), "isolated": g.degrees().iter().filter(|&&d| d == 0).count()}),
        )
    }

    fn build_cluster(&mut self, dir: &Path) -> Result<()> {
        let entities = self.load_entities()?;
        let g = self.load_graph(entities.len())?;
        let c = leiden_cluster(&g, &self.cfg.clustering.params())?;
        semantic::save_clusters(&dir.join("clusters.json"), &entities, &c)?;
        write_json(&dir.join("labels.json"), &cluster_labels(&entities, &g, &c))
    }

    fn build_sweep(&mut self, dir: &Path) -> Result<()> {
        let entities = self.load_entities()?;
        let g = self.load_graph(entities.len())?;
        let c = &self.cfg.clustering;
        let rows = resolution_sweep(&g, &self.cfg.sweep.gammas, c.seed, c.objective)?;
        write_csv(&dir.join("sweep.csv"), &rows)?;
        write_json(&dir.join("sweep.json"), &rows)
    }

    fn build_assign(&mut self, dir: &Path) -> Result<()> {
        let b = self.bundle()?;
        let entities = self.load_entities()?;
        let clustering = self.load_clustering(&entities)?;
        let llm = self.llm()?;
        let embedder = self.embedder()?;
        let index = EntityIndex::new(&entities)?;
        let assignments = map_queries(
            b.queries.iter(),
            &index,
            &clustering,
            embedder.as_ref(),
            llm.as_ref(),
            self.cfg.assignment.candidates,
        )?;
        let maps = ClusterMaps {
            num_clusters: clustering.num_clusters(),
            doc_clusters: map_documents(&b.corpus, &entities, &clustering)?,
            query_clusters: assignments.iter().map(|(q, a)| (q.clone(), a.clusters.clone())).collect(),
        };
        let query_entities: BTreeMap<&str, Vec<&str>> = assignments
            .iter()
            .map(|(q, a)| (q.as_str(), a.entities.iter().map(|&i| entities[i].name.as_str()).collect()))
            .collect();
        write_json(&dir.join("maps.json"), &maps)?;
        write_json(&dir.join("query_entities.json"), &query_entities)
    }

    fn build_stratify(&mut self, dir: &Path) -> Result<()> {
        let b = self.bundle()?;
        let maps = self.load_maps()?;
        let signals = compute_signals(&b.qrels, &maps);
        let buckets = self.cfg.stratification.buckets;
        let regimes = Regimes::fit(signals.values(), buckets).unwrap_or_else(|e| {
            log::warn!("falling back to evenly spaced boundaries: {e}");
            Regimes::uniform(buckets)
        });
        for b in [&regimes.delta, &regimes.jaccard] {
            if b.buckets() < buckets {
                log::warn!("{:?}: tied values leave {} of {buckets} buckets", b.signal, b.buckets());
            }
        }
        write_signals_csv(&dir.join("signals.csv"), &signals, &regimes)?;
        write_json(&dir.join("signals.json"), &signals)?;
        write_json(&dir.join("regimes.json"), &regimes)
    }

    fn build_coverage(&mut self, dir: &Path) -> Result<()> {
        let b = self.bundle()?;
        let maps = self.load_maps()?;
        let labels = self.load_labels()?;
        let report = coverage::coverage_report(&b.qrels, &maps, &labels, self.cfg.coverage.scc_threshold)?;
        write_json(&dir.join("coverage.json"), &report)
    }

    fn indexes(&mut self) -> Result<(Bm25Index, DenseIndex)> {
        let b = self.bundle()?;
        let embedder = self.embedder()?;
        Ok((
            Bm25Index::build(&b.corpus, self.cfg.retrieval.bm25)?,
            DenseIndex::build(&b.corpus, embedder.as_ref(), self.cfg.providers.dimensions)?,
        ))
    }

    fn build_retrieve(&mut self, dir: &Path) -> Result<()> {
        let b = self.bundle()?;
        let (bm25, dense) = self.indexes()?;
        let embedder = self.embedder()?;
        let r = Retriever {
            bm25: &bm25,
            dense: &dense,
            embedder: embedder.as_ref(),
            rrf_k: self.cfg.retrieval.rrf_k,
        };
        for &system in &self.cfg.retrieval.systems {
            let run = r.run(system, b.judged_queries(), self.cfg.retrieval.depth)?;
            write_trec(&dir.join("runs").join(format!("{}.trec", system.name())), &run, system.name())?;
        }
        Ok(())
    }

    fn build_evaluate(&mut self, dir: &Path) -> Result<()> {
        let b = self.bundle()?;
        let specs = self.cfg.metrics.parsed()?;
        let m = &self.cfg.metrics;
        let mut summary: BTreeMap<&str, BTreeMap<String, Option<metrics::Summary>>> = BTreeMap::new();
        for &system in &self.cfg.retrieval.systems {
            let run = read_trec(&self.artifact(Stage::Retrieve, &format!("runs/{}.trec", system.name()))?)?;
            let table = evaluate_run(&run, &b.qrels, &specs, m.gain);
            metrics::write_metrics_csv(&dir.join("metrics").join(format!("{}.csv", system.name())), &table)?;
            let stored = StoredEval {
                values: table.values.iter().map(|(k, v)| (k.0.to_string(), v.clone())).collect(),
                excluded: table.excluded.clone(),
                missing: table.missing.clone(),
            };
            let s = summary.entry(system.name()).or_default();
            for (spec, col) in &stored.values {
                let values: Vec<f64> = col.values().copied().collect();
                s.insert(spec.clone(), bootstrap_mean(&values, m.bootstrap_resamples, m.bootstrap_seed, 0.95));
            }
            write_json(&dir.join("eval").join(format!("{}.json", system.name())), &stored)?;
        }
        write_json(&dir.join("summary.json"), &summary)
    }

    fn build_profile(&mut self, dir: &Path) -> Result<()> {
        let b = self.bundle()?;
        let maps = self.load_maps()?;
        let (signals, regimes) = self.load_signals()?;
        let primary = coverage::primary_clusters(&b.qrels, &maps);
        let mut out: BTreeMap<&str, BTreeMap<String, MetricProfile>> = BTreeMap::new();
        for &system in &self.cfg.retrieval.systems {
            let eval = self.load_eval(system)?;
            for (metric, col) in &eval.values {
                if let Some(p) = metric_profile(col, &primary, &signals, &regimes)? {
                    out.entry(system.name()).or_default().insert(metric.clone(), p);
                }
            }
        }
        write_json(&dir.join("profile.json"), &out)
    }

    fn build_grid(&mut self, dir: &Path) -> Result<()> {
        let (signals, regimes) = self.load_signals()?;
        let mut grids: BTreeMap<&str, BTreeMap<String, Grid>> = BTreeMap::new();
        let mut rows = Vec::new();
        for &system in &self.cfg.retrieval.systems {
            let eval = self.load_eval(system)?;
            for (metric, col) in &eval.values {
                let g = structural_grid(col, &signals, &regimes);
                rows.extend(report::grid_rows(system.name(), metric, &g));
                grids.entry(system.name()).or_default().insert(metric.clone(), g);
            }
        }
        write_csv(&dir.join("grid.csv"), &rows)?;
        write_json(&dir.join("grid.json"), &grids)
    }

    fn build_compare(&mut self, dir: &Path) -> Result<()> {
        let b = self.bundle()?;
        let maps = self.load_maps()?;
        let primary = coverage::primary_clusters(&b.qrels, &maps);
        let c = self.cfg.comparison.clone();
        let metric = c.metric.parse::<MetricSpec>()?.to_string();
        let systems = self.cfg.retrieval.systems.clone();
        let mut rows = Vec::new();
        for (i, &sa) in systems.iter().enumerate() {
            for &sb in &systems[i + 1..] {
                let (ea, eb) = (self.load_eval(sa)?, self.load_eval(sb)?);
                let empty = BTreeMap::new();
                let ca = ea.values.get(&metric).unwrap_or(&empty);
                let cb = eb.values.get(&metric).unwrap_or(&empty);
                let (mut a, mut bv, mut cl) = (Vec::new(), Vec::new(), Vec::new());
                for (q, va) in ca {
                    if let (Some(vb), Some(&k)) = (cb.get(q), primary.get(q)) {
                        a.push(*va);
                        bv.push(*vb);
                        cl.push(k);
                    }
                }
                if a.is_empty() {
                    log::warn!("{} vs {}: no common clustered queries, skipping", sa.name(), sb.name());
                    continue;
                }
                let clusters = cl.iter().collect::<std::collections::BTreeSet<_>>().len();
                for &protocol in &c.protocols {
                    rows.push(ComparisonRow {
                        system_a: sa,
                        system_b: sb,
                        metric: metric.clone(),
                        n: a.len(),
                        clusters,
                        result: bootstrap_winrate(&a, &bv, &cl, protocol, c.resamples, c.seed)?,
                    });
                }
            }
        }
        write_json(&dir.join("comparison.json"), &rows)
    }

    fn build_generate(&mut self, dir: &Path) -> Result<()> {
        let b = self.bundle()?;
        let entities = self.load_entities()?;
        let clustering = self.load_clustering(&entities)?;
        let maps = self.load_maps()?;
        let (signals, _) = self.load_signals()?;
        let (bm25, dense) = self.indexes()?;
        let llm = self.llm()?;
        let embedder = self.embedder()?;
        let gcfg = self.cfg.generation.clone();
        let threshold = self.cfg.coverage.scc_threshold;

        let records: Vec<StateRecord> = b
            .qrels
            .query_ids()
            .filter_map(|q| {
                let docs = b.qrels.relevant(q);
                (!docs.is_empty()).then(|| StateRecord {
                    signals: signals.get(q).cloned().unwrap_or_default(),
                    doc_clusters: maps.docs_union(docs),
                })
            })
            .collect();
        let state = generation::initial_state(maps.num_clusters, records, gcfg.buckets);
        let before = coverage_summary(&b.qrels, &maps, &state, threshold)?;

        let ctx = GenerationContext {
            corpus: &b.corpus,
            maps: &maps,
            entities: EntityIndex::new(&entities)?,
            entity_names: entities.iter().map(|e| e.name.as_str()).collect(),
            clustering: &clustering,
            bm25: &bm25,
            dense: &dense,
            llm: llm.as_ref(),
            embedder: embedder.as_ref(),
        };
        let mut gen_cfg = gcfg.clone();
        gen_cfg.entity_candidates = self.cfg.assignment.candidates;
        let out = generation::run_generation(&ctx, &gen_cfg, state)?;
        out.save(&dir.join("generated"))?;

        let mut qrels = b.qrels.clone();
        let mut augmented = maps.clone();
        for a in &out.accepted {
            for d in &a.candidate.relevant {
                qrels.insert(&a.query_id, d, 1);
            }
            augmented.query_clusters.insert(a.query_id.clone(), a.candidate.query_clusters.clone());
        }
        let after = coverage_summary(&qrels, &augmented, &out.state, threshold)?;
        let summary = GenerationSummary {
            requested: gcfg.n,
            accepted: out.accepted.len(),
            attempts: out.attempts,
            iterations: out.iterations,
            guard_tripped: out.guard_tripped,
            multi_cluster_acceptances: out
                .accepted
                .iter()
                .filter(|a| a.strategy.kind == generation::StrategyKind::MultiCluster)
                .count(),
            weights: out.weights,
            before,
            after,
        };
        write_json(&dir.join("summary.json"), &summary)
    }

    fn build_report(&mut self, dir: &Path) -> Result<()> {
        let b = self.bundle()?;
        let maps = self.load_maps()?;
        let labels = self.load_labels()?;
        let primary = coverage::primary_clusters(&b.qrels, &maps);
        let systems = self.cfg.retrieval.systems.clone();
        let fig_metric = self.cfg.report.figure_metric.parse::<MetricSpec>()?.to_string();
        let cmp_metric = self.cfg.comparison.metric.parse::<MetricSpec>()?.to_string();
        let figs = dir.join("figures");

        let mut evals = BTreeMap::new();
        for &s in &systems {
            evals.insert(s, self.load_eval(s)?);
        }
        let empty = BTreeMap::new();
        let column = |s: System, m: &str| evals[&s].values.get(m).unwrap_or(&empty);

        let scatter = coverage::cluster_scatter(&maps, &primary, column(systems[0], &fig_metric), &labels);
        write_csv(&figs.join("cluster_scatter.csv"), &scatter)?;

        let mut boxes = Vec::new();
        for &s in &systems {
            for (c, vals) in report::by_cluster(column(s, &fig_metric), &primary) {
                if let Some(stats) = box_stats(&vals) {
                    boxes.push(report::BoxplotRow::new(s.name(), &fig_metric, c, stats));
                }
            }
        }
        write_csv(&figs.join("cluster_boxplot.csv"), &boxes)?;

        let mut pairs = Vec::new();
        for (i, &sa) in systems.iter().enumerate() {
            for &sb in &systems[i + 1..] {
                pairs.extend(report::model_scatter(
                    (sa.name(), sb.name()),
                    &cmp_metric,
                    column(sa, &cmp_metric),
                    column(sb, &cmp_metric),
                    &primary,
                ));
            }
        }
        write_csv(&figs.join("model_vs_model.csv"), &pairs)?;

        let comparisons: Vec<ComparisonRow> = read_json(&self.artifact(Stage::Compare, "comparison.json")?)?;
        let bars: Vec<report::WinRateRow> = comparisons
            .iter()
            .map(|r| report::WinRateRow {
                system_a: r.system_a.name().into(),
                system_b: r.system_b.name().into(),
                metric: r.metric.clone(),
                protocol: r.result.protocol.name().into(),
                winrate_a: r.result.win_rate,
            })
            .collect();
        write_csv(&figs.join("winrate_bars.csv"), &bars)?;
        std::fs::copy(self.artifact(Stage::Grid, "grid.csv")?, figs.join("structural_grid.csv"))
            .map_err(|e| Error::Io { path: figs.join("structural_grid.csv"), source: e })?;
        std::fs::copy(self.artifact(Stage::Sweep, "sweep.csv")?, figs.join("sweep.csv"))
            .map_err(|e| Error::Io { path: figs.join("sweep.csv"), source: e })?;

        let (_, regimes) = self.load_signals()?;
        let clusters: Value = read_json(&self.artifact(Stage::Cluster, "clusters.json")?)?;
        let cov: CoverageReport = read_json(&self.artifact(Stage::Coverage, "coverage.json")?)?;
        let keys: BTreeMap<&str, &str> = self.keys.iter().map(|(s, k)| (s.name(), k.as_str())).collect();
        let generation = if self.cfg.report.generate {
            read_json::<Value>(&self.artifact(Stage::Generate, "summary.json")?)?
        } else {
            Value::Null
        };
        let signals_csv = crate::io::read_string(&self.artifact(Stage::Stratify, "signals.csv")?)?;
        // The workspace is a location, not a parameter; leaving it out keeps
        // reports from different checkouts comparable byte for byte.
        let mut config = serde_json::to_value(&self.cfg).map_err(|e| Error::invalid(e.to_string()))?;
        if let Some(o) = config.as_object_mut() {
            o.remove("workspace");
        }
        let report = json!({
            "tool": {"name": "strata", "version": env!("CARGO_PKG_VERSION")},
            "config": config,
            "stage_keys": keys,
            "dataset": read_json::<Value>(&self.artifact(Stage::Ingest, "dataset.json")?)?,
            "extraction": read_json::<Value>(&self.artifact(Stage::Extract, "extraction.json")?)?,
            "graph": read_json::<Value>(&self.artifact(Stage::Graph, "graph.json")?)?,
            "clustering": {
                "gamma": clusters["gamma"],
                "seed": clusters["seed"],
                "objective": clusters["objective"],
                "clusters": maps.num_clusters,
                "quality": clusters["quality"],
                "trace": clusters["trace"],
                "labels": labels,
            },
            "sweep": read_json::<Value>(&self.artifact(Stage::Sweep, "sweep.json")?)?,
            "coverage": cov,
            "stratification": {
                "regimes": regimes,
                "queries": signals_csv.lines().count().saturating_sub(1),
                "signals_csv": "stratify/signals.csv",
            },
            "evaluation": read_json::<Value>(&self.artifact(Stage::Evaluate, "summary.json")?)?,
            "profiles": read_json::<Value>(&self.artifact(Stage::Profile, "profile.json")?)?,
            "grids": read_json::<Value>(&self.artifact(Stage::Grid, "grid.json")?)?,
            "comparisons": comparisons,
            "scatter": scatter,
            "generation": generation,
            "figures": ["cluster_scatter.csv", "cluster_boxplot.csv", "model_vs_model.csv", "winrate_bars.csv", "structural_grid.csv", "sweep.csv"],
        });
        write_json(&dir.join("report.json"), &report)
    }
}

fn coverage_summary(
    qrels: &Qrels,
    maps: &ClusterMaps,
    state: &coverage::CoverageState,
    threshold: usize,
) -> Result<CoverageSummary> {
    let r = coverage::coverage_report(qrels, maps, &[], threshold)?;
    Ok(CoverageSummary {
        msc: r.msc,
        scc: r.scc,
        zqc: r.zqc,
        relevant_doc_clusters: state.covered.len(),
        n_delta: state.n_delta.clone(),
        n_jaccard: state.n_jaccard.clone(),
        queries: qrels.query_ids().count(),
    })
}

/// Regime views of one metric column. `None` when the column is empty.
pub fn metric_profile(
    col: &BTreeMap<String, f64>,
    primary: &BTreeMap<String, usize>,
    signals: &BTreeMap<String, StructuralSignals>,
    regimes: &Regimes,
) -> Result<Option<MetricProfile>> {
    if col.is_empty() {
        return Ok(None);
    }
    let values: Vec<f64> = col.values().copied().collect();
    let (mut cv, mut ck) = (Vec::new(), Vec::new());
    let (mut bv, mut bk, mut sk, mut dk, mut jk) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (q, &v) in col {
        let cluster = primary.get(q).copied();
        if let Some(c) = cluster {
            cv.push(v);
            ck.push(c);
        }
        if let Some((Some(d), Some(j))) = signals.get(q).map(|s| regimes.buckets_of(s)) {
            bv.push(v);
            bk.push((d, j));
            dk.push(d);
            jk.push(j);
            sk.push(StratumKey {
                cluster,
                delta_bucket: d,
                jaccard_bucket: j,
            });
        }
    }
    Ok(Some(MetricProfile {
        n: values.len(),
        naive_mean: estimation::naive_mean(&values)?,
        by_cluster: regime_profile(&cv, &ck)?,
        without_cluster: values.len() - cv.len(),
        by_buckets: regime_profile(&bv, &bk)?,
        by_stratum: regime_profile(&bv, &sk)?,
        decomposition: (!cv.is_empty()).then(|| variance_decomposition(&cv, &ck)).transpose()?,
        sigma_query: (!cv.is_empty()).then(|| sigma_report(&cv, &ck, Pooling::Query)).transpose()?,
        sigma_cluster: (!cv.is_empty()).then(|| sigma_report(&cv, &ck, Pooling::Cluster)).transpose()?,
        vrr_delta: vrr(&bv, &dk).ok(),
        vrr_jaccard: vrr(&bv, &jk).ok(),
        vrr_buckets: vrr(&bv, &bk).ok(),
        vrr_cluster: vrr(&cv, &ck).ok(),
    }))
}
