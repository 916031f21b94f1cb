use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use chronophoto::artifact::{run_pipeline, validate_artifact, write_atomic, GroupingMode, PipelineConfig, PipelineOutput};
use chronophoto::graph_io::{parse_metadata, parse_sequence, write_sequence_csv, EdgeFormat};
use chronophoto::grouping::{import_partition, write_partitions};
use chronophoto::lineage::write_links_csv;
use chronophoto::synthgen::{default_scenario, generate, Scenario};

#[derive(Parser)]
#[command(name = "chronophoto", version, about = "Lay out a sequence of graphs in one shared space")]
struct Cli {
    /// Log level filter, e.g. `warn`, `info`, `debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph sequence with ground-truth groups.
    Generate(GenerateArgs),
    /// Run the layout pipeline and write the JSON artifact.
    Run(Box<RunArgs>),
    /// Check an artifact's invariants.
    Validate {
        path: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    /// Scenario JSON; the built-in core/periphery scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Multiply all group sizes and the label pool by this factor.
    #[arg(long)]
    scale: Option<f64>,
    /// Output edge list (`phase,src,dst,weight`).
    #[arg(long)]
    edges: PathBuf,
    /// Output ground-truth partition (`phase,node,group`, groups named).
    #[arg(long)]
    partitions: Option<PathBuf>,
    /// Output metadata (`phase,node,label`) labeling nodes by group name.
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Write the effective scenario as JSON.
    #[arg(long)]
    write_scenario: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Stage {
    Partitions,
    Similarity,
    Walks,
    Embedding,
    Layout,
    Links,
}

impl Stage {
    fn file_name(self) -> &'static str {
        match self {
            Stage::Partitions => "partitions.csv",
            Stage::Similarity => "similarity.csv",
            Stage::Walks => "walks.txt",
            Stage::Embedding => "embedding.csv",
            Stage::Layout => "layout.csv",
            Stage::Links => "links.csv",
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Edge list, CSV or JSON lines (chosen by extension).
    #[arg(long)]
    edges: PathBuf,
    /// Node labels per phase (`phase,node,label`).
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Precomputed groups (`phase,node,group`); implies `--grouping import`
    /// unless a grouping is given.
    #[arg(long)]
    partitions: Option<PathBuf>,
    #[arg(long, value_enum)]
    grouping: Option<Grouping>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding dimension.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long, default_value = "artifact.json")]
    out: PathBuf,
    /// Single-threaded training so that identical inputs give identical bytes.
    #[arg(long)]
    deterministic: bool,
    /// Lock-free multi-threaded embedding training (ignored with `--deterministic`).
    #[arg(long)]
    parallel: bool,
    /// Pipeline config JSON; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Intermediate results to write next to the artifact (or to `--dump-dir`).
    #[arg(long, value_enum, value_delimiter = ',')]
    dump: Vec<Stage>,
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Grouping {
    Louvain,
    Import,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Validate { path } => cmd_validate(&path),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_generate(args: &GenerateArgs) -> Result<ExitCode> {
    let mut scenario: Scenario = match &args.scenario {
        Some(path) => serde_json::from_reader(open(path)?)
            .with_context(|| format!("invalid scenario {}", path.display()))?,
        None => default_scenario(),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(scale) = args.scale {
        if !(scale > 0.0) {
            bail!("--scale must be positive");
        }
        scenario = scenario.scaled(scale);
    }
    let g = generate(&scenario)?;
    log::info!(
        "generated {} phases, {}..{} nodes per phase",
        g.sequence.len(),
        g.sequence.phases().iter().map(|p| p.node_count()).min().unwrap_or(0),
        g.sequence.phases().iter().map(|p| p.node_count()).max().unwrap_or(0),
    );

    let mut written = Written::default();
    let result = (|| -> Result<()> {
        written.write(&args.edges, |w| write_sequence_csv(&g.sequence, w))?;
        if let Some(path) = &args.partitions {
            written.write(path, |w| write_partitions(&g.sequence, &g.partitions, Some(&g.group_names), w))?;
        }
        if let Some(path) = &args.metadata {
            written.write(path, |w| {
                let mut out = csv::Writer::from_writer(w);
                out.write_record(["phase", "node", "label"])?;
                for (t, part) in g.partitions.iter().enumerate() {
                    let label = g.sequence.phases()[t].label();
                    for (node, &grp) in part.assignment() {
                        out.write_record([label, node.as_str(), &g.group_names[t][grp]])?;
                    }
                }
                out.flush()?;
                Ok(())
            })?;
        }
        if let Some(path) = &args.write_scenario {
            written.write(path, |w| {
                serde_json::to_writer_pretty(&mut *w, &scenario)?;
                Ok(w.write_all(b"\n")?)
            })?;
        }
        Ok(())
    })();
    written.finish(result)?;
    Ok(ExitCode::SUCCESS)
}

fn load_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &args.config {
        Some(path) => serde_json::from_reader(open(path)?)
            .with_context(|| format!("invalid config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    match args.grouping {
        Some(Grouping::Louvain) => cfg.grouping = GroupingMode::Louvain,
        Some(Grouping::Import) => cfg.grouping = GroupingMode::Import,
        None if args.partitions.is_some() => cfg.grouping = GroupingMode::Import,
        None => {}
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dims) = args.dims {
        cfg.skipgram.dim = dims;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    if args.parallel {
        cfg.skipgram.parallel = true;
    }
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let seq = parse_sequence(open(&args.edges)?, EdgeFormat::from_path(&args.edges))
        .with_context(|| format!("stage `ingest` failed on {}", args.edges.display()))?;
    log::info!("loaded {} phases", seq.len());

    let metadata = match &args.metadata {
        Some(path) => {
            let load = parse_metadata(open(path)?, &seq)
                .with_context(|| format!("stage `ingest` failed on {}", path.display()))?;
            if load.skipped > 0 {
                log::warn!("{} metadata rows did not match any phase/node", load.skipped);
            }
            Some(load.table)
        }
        None => None,
    };
    let partitions = match (&args.partitions, cfg.grouping) {
        (Some(path), GroupingMode::Import) => Some(
            import_partition(open(path)?, &seq)
                .with_context(|| format!("stage `group` failed on {}", path.display()))?,
        ),
        (Some(_), GroupingMode::Louvain) => {
            log::warn!("--partitions ignored with louvain grouping");
            None
        }
        (None, _) => None,
    };

    let out = run_pipeline(&seq, partitions.as_deref(), metadata.as_ref(), &cfg)?;
    if let Some(notice) = &out.projection.notice {
        log::warn!("{notice}");
    }

    let mut written = Written::default();
    let result = (|| -> Result<()> {
        write_dumps(args, &seq, &out, &mut written)?;
        let bytes = out.artifact.to_json_bytes()?;
        written.write(&args.out, |w| Ok(w.write_all(&bytes)?))?;
        Ok(())
    })();
    written.finish(result)?;
    log::info!(
        "wrote {} ({} groups, {} lineages)",
        args.out.display(),
        out.artifact.groups.len(),
        out.lineage.n_lineages()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_dumps(
    args: &RunArgs,
    seq: &chronophoto::GraphSequence,
    out: &PipelineOutput,
    written: &mut Written,
) -> Result<()> {
    if args.dump.is_empty() {
        return Ok(());
    }
    let dir = match &args.dump_dir {
        Some(d) => d.clone(),
        None => args
            .out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut stages = args.dump.clone();
    stages.sort_by_key(|s| *s as u8);
    stages.dedup();
    for stage in stages {
        let path = dir.join(stage.file_name());
        match stage {
            Stage::Partitions => written.write(&path, |w| write_partitions(seq, &out.partitions, None, w))?,
            Stage::Similarity => written.write(&path, |w| out.similarity.write_csv(w))?,
            Stage::Walks => written.write(&path, |w| out.corpus.write_text(w))?,
            Stage::Embedding => written.write(&path, |w| out.embedding.write_csv(w))?,
            Stage::Layout => written.write(&path, |w| out.layout.write_csv(w))?,
            Stage::Links => written.write(&path, |w| write_links_csv(&out.links, &out.kept, w))?,
        }
    }
    Ok(())
}

/// Files written by the current command, removed again if a later write
/// fails so no partial set of outputs is left behind.
#[derive(Default)]
struct Written(Vec<PathBuf>);

impl Written {
    fn write(
        &mut self,
        path: &Path,
        fill: impl FnOnce(&mut dyn std::io::Write) -> chronophoto::Result<()>,
    ) -> Result<()> {
        write_atomic(path, fill).with_context(|| format!("cannot write {}", path.display()))?;
        self.0.push(path.to_path_buf());
        Ok(())
    }

    fn finish(self, result: Result<()>) -> Result<()> {
        if result.is_err() {
            for path in &self.0 {
                let _ = std::fs::remove_file(path);
            }
        }
        result
    }
}

fn cmd_validate(path: &Path) -> Result<ExitCode> {
    let report = validate_artifact(path)?;
    if report.is_valid() {
        println!("{}: ok", path.display());
        return Ok(ExitCode::SUCCESS);
    }
    for f in &report.findings {
        println!("{f}");
    }
    println!("{}: {} finding(s)", path.display(), report.findings.len());
    Ok(ExitCode::FAILURE)
}
