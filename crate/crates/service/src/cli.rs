//! Command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use concept_probe::analytics::class_accuracies;
use concept_probe::fixture::planted::{build_planted_fixture, PROBE_LAYER};
use concept_probe::pipeline::{run_pipeline, PipelineConfig, PipelineOutput, RunObserver, Stage};
use concept_probe::snapshot::{export_json, load_snapshot, ConceptSpaceSnapshot};

use crate::state::AppState;

#[derive(Debug, Parser)]
#[command(name = "concept-probe", version, about = "Discover, score and explore visual concepts of an image classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline and write a snapshot.
    Run {
        /// Pipeline config (JSON). Relative paths resolve against its directory.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Snapshot root; defaults to `snapshots/` beside the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a snapshot over HTTP.
    Serve {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Print a summary of a snapshot.
    Inspect {
        #[arg(long)]
        snapshot: PathBuf,
        /// Show the concepts of one class.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Write a snapshot as one document to stdout.
    Export {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
    },
    /// Generate the planted-motif demo dataset, model and a config for it.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Json,
}

pub const FIXTURE_CONFIG: &str = "cfg.json";

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let out = run(&config, seed, out.as_deref(), &StderrProgress)?;
            println!("{}", out.path.display());
            println!("snapshot_id {}", out.snapshot.snapshot_id);
        }
        Command::Serve { snapshot, addr } => {
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let state = AppState::open(&snapshot).with_context(|| format!("cannot load snapshot {}", snapshot.display()))?;
                let listener = crate::bind(&addr).await?;
                eprintln!("serving {} on http://{}", state.current().snapshot.snapshot_id, listener.local_addr()?);
                crate::serve(listener, state).await
            })?;
        }
        Command::Inspect { snapshot, class } => print!("{}", inspect(&load_snapshot(&snapshot)?, class)?),
        Command::Export { snapshot, format } => println!("{}", export(&load_snapshot(&snapshot)?, format)?),
        Command::Fixture { out, seed } => println!("{}", write_fixture(&out, seed)?.display()),
    }
    Ok(())
}

struct StderrProgress;

impl RunObserver for StderrProgress {
    fn stage(&self, stage: Stage) {
        eprintln!("stage {stage}");
    }

    fn warning(&self, message: &str) {
        eprintln!("warning: {message}");
    }
}

/// Reads a config file, resolving relative paths against its directory.
pub fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<PipelineConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut config: PipelineConfig = serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    let base = path.canonicalize()?.parent().map(Path::to_path_buf).unwrap_or_default();
    config.resolve_paths(&base);
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

pub fn run(config_path: &Path, seed: Option<u64>, out: Option<&Path>, observer: &dyn RunObserver) -> anyhow::Result<PipelineOutput> {
    let config = load_config(config_path, seed)?;
    let out = match out {
        Some(o) => o.to_path_buf(),
        None => config_path.canonicalize()?.parent().map(Path::to_path_buf).unwrap_or_default().join("snapshots"),
    };
    Ok(run_pipeline(&config, &out, observer)?)
}

pub fn inspect(s: &ConceptSpaceSnapshot, class: Option<usize>) -> anyhow::Result<String> {
    let mut out = String::new();
    let accuracy = class_accuracies(&s.predictions, s.class_names.len());
    let fmt_acc = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    if let Some(k) = class {
        let Some(name) = s.class_names.get(k) else {
            bail!("class {k} out of range (snapshot has {} classes)", s.class_names.len());
        };
        writeln!(out, "class {k} {name}  accuracy {}", fmt_acc(accuracy[k]))?;
        writeln!(out, "{:<12} {:<24} {:>6} {:>10} {:>5}  cluster", "concept", "name", "score", "p", "size")?;
        for c in s.concepts.iter().chain(&s.discarded).filter(|c| c.record.class_k == k) {
            let r = &c.record;
            let (score, p) = r.tcav.as_ref().map_or(("-".into(), "-".into()), |t| (format!("{:.3}", t.mean_score), format!("{:.2e}", t.p_value)));
            writeln!(
                out,
                "{:<12} {:<24} {:>6} {:>10} {:>5}  {}",
                r.concept_id,
                r.display_name,
                score,
                p,
                r.member_segment_ids.len(),
                r.cluster_id.as_deref().unwrap_or("(filtered)")
            )?;
        }
        return Ok(out);
    }
    writeln!(out, "snapshot {}  created {}", s.snapshot_id, s.created_at)?;
    writeln!(out, "layer {} ({}-d), seed {}", s.config.layer, s.embedding_dim, s.config.seed)?;
    writeln!(out, "concepts {} retained, {} filtered", s.concepts.len(), s.discarded.len())?;
    writeln!(out, "classes")?;
    for (k, name) in s.class_names.iter().enumerate() {
        let n = s.concepts.iter().filter(|c| c.record.class_k == k).count();
        writeln!(out, "  {k:>3} {name:<20} accuracy {:>5}  concepts {n}", fmt_acc(accuracy[k]))?;
    }
    match &s.cluster_selection {
        Some(sel) => writeln!(out, "clusters {} ({:?}, {})", sel.k, sel.method, if sel.automatic { "silhouette" } else { "fixed" })?,
        None => writeln!(out, "clusters {}", s.clusters.len())?,
    }
    for c in &s.clusters {
        writeln!(out, "  {:<6} {} concepts  medoid {}", c.cluster_id, c.member_concept_ids.len(), c.medoid_concept_id)?;
    }
    for w in &s.warnings {
        writeln!(out, "warning: {w}")?;
    }
    Ok(out)
}

pub fn export(s: &ConceptSpaceSnapshot, format: ExportFormat) -> anyhow::Result<String> {
    match format {
        ExportFormat::Json => Ok(serde_json::to_string_pretty(&export_json(s)?)?),
    }
}

/// Writes the demo fixture under `out` with a config using the default
/// pipeline parameters; returns the config path.
pub fn write_fixture(out: &Path, seed: u64) -> anyhow::Result<PathBuf> {
    let fx = build_planted_fixture(out, seed)?;
    let config = PipelineConfig {
        dataset_path: "dataset.json".into(),
        model_path: fx.model_path().strip_prefix(&fx.dir)?.to_path_buf(),
        layer: PROBE_LAYER.into(),
        ..PipelineConfig::default()
    };
    let path = out.join(FIXTURE_CONFIG);
    fs::write(&path, serde_json::to_vec_pretty(&config)?)?;
    Ok(path)
}
