use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use strata_core::pipeline::{Outcome, Pipeline, RunConfig, Stage};

/// Semantic strata, coverage audits and stratified evaluation for retrieval benchmarks.
#[derive(Parser, Debug)]
#[command(name = "strata", version)]
struct Cli {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set clustering.gamma=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Recompute even when a cached artifact exists.
    #[arg(long, global = true)]
    force: bool,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and validate the dataset.
    Ingest,
    /// Extract and embed entities.
    Extract {
        #[arg(long)]
        merge_threshold: Option<f64>,
    },
    /// Build the entity kNN graph.
    Graph {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Leiden clustering of the entity graph.
    Cluster {
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// cpm or modularity
        #[arg(long)]
        objective: Option<String>,
    },
    /// Cluster counts over a list of resolutions.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Map documents and queries to clusters.
    Assign {
        #[arg(long)]
        candidates: Option<usize>,
    },
    /// Dispersion and alignment signals with bucket boundaries.
    Stratify {
        #[arg(long)]
        buckets: Option<usize>,
    },
    /// MSC, SCC and ZQC of the query set.
    Coverage {
        #[arg(long)]
        scc_threshold: Option<usize>,
    },
    /// Produce TREC runs.
    Retrieve {
        #[arg(long = "system", value_delimiter = ',')]
        systems: Option<Vec<String>>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Per-query metrics.
    Evaluate {
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
    },
    /// Regime profiles, variance decomposition and VRR.
    Profile,
    /// Mean metric per dispersion/alignment cell.
    Grid,
    /// Paired bootstrap win rates under each protocol.
    Compare {
        #[arg(long = "protocol", value_delimiter = ',')]
        protocols: Option<Vec<String>>,
        #[arg(long)]
        resamples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        metric: Option<String>,
    },
    /// Coverage-aware query generation.
    Generate(GenerateArgs),
    /// Assemble report.json and the figure tables.
    Report {
        /// Also copy report.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage needed for the report (or for `--until`).
    Pipeline {
        #[arg(long)]
        until: Option<String>,
        /// Copy report.json here when the report stage ran.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// stub or remote, applied to both providers.
    #[arg(long)]
    providers: Option<String>,
}

fn set<T: ToString>(out: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={}", v.to_string()));
    }
}

fn json_list(items: &[String]) -> String {
    serde_json::to_string(items).expect("string list")
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string")
}

/// Flag values become config overrides so they feed the stage keys.
fn flag_overrides(cmd: &Command) -> Vec<String> {
    let mut o = Vec::new();
    match cmd {
        Command::Extract { merge_threshold } => set(&mut o, "extraction.merge_threshold", *merge_threshold),
        Command::Graph { k, tau } => {
            set(&mut o, "graph.k", *k);
            set(&mut o, "graph.tau", *tau);
        }
        Command::Cluster { gamma, seed, objective } => {
            set(&mut o, "clustering.gamma", *gamma);
            set(&mut o, "clustering.seed", *seed);
            set(&mut o, "clustering.objective", objective.as_deref().map(json_str));
        }
        Command::Sweep { gammas } => set(
            &mut o,
            "sweep.gammas",
            gammas.as_ref().map(|g| serde_json::to_string(g).expect("floats")),
        ),
        Command::Assign { candidates } => set(&mut o, "assignment.candidates", *candidates),
        Command::Stratify { buckets } => set(&mut o, "stratification.buckets", *buckets),
        Command::Coverage { scc_threshold } => set(&mut o, "coverage.scc_threshold", *scc_threshold),
        Command::Retrieve { systems, depth } => {
            set(&mut o, "retrieval.systems", systems.as_deref().map(json_list));
            set(&mut o, "retrieval.depth", *depth);
        }
        Command::Evaluate { metrics } => set(&mut o, "metrics.specs", metrics.as_deref().map(json_list)),
        Command::Compare { protocols, resamples, seed, metric } => {
            let protocols = protocols
                .as_ref()
                .map(|p| p.iter().map(|s| s.replace('-', "_")).collect::<Vec<_>>());
            set(&mut o, "comparison.protocols", protocols.as_deref().map(json_list));
            set(&mut o, "comparison.resamples", *resamples);
            set(&mut o, "comparison.seed", *seed);
            set(&mut o, "comparison.metric", metric.as_deref().map(json_str));
        }
        Command::Generate(g) => {
            set(&mut o, "generation.n", g.n);
            set(&mut o, "generation.b", g.b);
            set(&mut o, "generation.seed", g.seed);
            if let Some(p) = &g.providers {
                o.push(format!("providers.llm.mode={}", json_str(p)));
                o.push(format!("providers.embedding.mode={}", json_str(p)));
            }
        }
        _ => {}
    }
    o
}

fn stage_of(cmd: &Command) -> anyhow::Result<(Stage, bool)> {
    Ok(match cmd {
        Command::Ingest => (Stage::Ingest, false),
        Command::Extract { .. } => (Stage::Extract, false),
        Command::Graph { .. } => (Stage::Graph, false),
        Command::Cluster { .. } => (Stage::Cluster, false),
        Command::Sweep { .. } => (Stage::Sweep, false),
        Command::Assign { .. } => (Stage::Assign, false),
        Command::Stratify { .. } => (Stage::Stratify, false),
        Command::Coverage { .. } => (Stage::Coverage, false),
        Command::Retrieve { .. } => (Stage::Retrieve, false),
        Command::Evaluate { .. } => (Stage::Evaluate, false),
        Command::Profile => (Stage::Profile, false),
        Command::Grid => (Stage::Grid, false),
        Command::Compare { .. } => (Stage::Compare, false),
        Command::Generate(_) => (Stage::Generate, false),
        Command::Report { .. } => (Stage::Report, false),
        Command::Pipeline { until, .. } => (until.as_deref().unwrap_or("report").parse()?, true),
    })
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(flag_overrides(&cli.command));
    Ok(match &cli.config {
        Some(path) => RunConfig::load(path, &overrides)?,
        None => {
            let cwd = std::env::current_dir().context("reading the working directory")?;
            RunConfig::from_value_with(&mut serde_json::json!({}), &overrides, cwd)?
        }
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let (stage, whole) = stage_of(&cli.command)?;
    let mut p = Pipeline::new(cfg)?;
    let done = if whole {
        p.run_through(stage, cli.force)?
    } else {
        vec![(stage, p.run_stage(stage, cli.force)?)]
    };
    for (s, outcome) in &done {
        let what = match outcome {
            Outcome::Built => "built",
            Outcome::Reused => "cached",
        };
        println!("{s:<9} {what:<6} {}", p.stage_dir(*s).display());
    }
    let out = match &cli.command {
        Command::Report { out } | Command::Pipeline { out, .. } => out.as_ref(),
        _ => None,
    };
    if stage == Stage::Report {
        println!("report    {}", p.report_path().display());
        if let Some(out) = out {
            std::fs::copy(p.report_path(), out).with_context(|| format!("copying report to {}", out.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<strata_core::Error>())
                .map_or(1, |c| c.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
