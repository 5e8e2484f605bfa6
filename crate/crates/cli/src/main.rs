//! Command-line pipeline: synthesize a TAHG, ingest and validate graph
//! files, pretrain, export frozen embeddings, evaluate link prediction and
//! node classification, and drive ablation sweeps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tahg_core::ablation::{Sweep, SweepRun, run_sweep};
use tahg_core::checkpoint;
use tahg_core::downstream::{
    EmbeddingTable, HeaderConfig, HeaderKind, export_embeddings, load_labels, make_label_split,
    make_link_split, mean_report, run_link_prediction, run_node_classification_seeds,
};
use tahg_core::graph::load_dir;
use tahg_core::pretrain::{PretrainConfig, pretrain};
use tahg_core::synth::{SynthConfig, generate, write_dataset};
use tahg_core::text::Vocab;

#[derive(Parser)]
#[command(name = "tahg", version, about = "Pretraining and evaluation on text-attributed heterogeneous graphs")]
struct Cli {
    /// Fix every random stream; identical invocations produce
    /// byte-identical artifacts.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-partition TAHG dataset.
    Synth(SynthArgs),
    /// Load and validate graph files; print the validation report.
    Ingest(IngestArgs),
    /// Pretrain on a graph directory; write checkpoint, vocabulary, trace.
    Pretrain(PretrainArgs),
    /// Export frozen node embeddings from a checkpoint.
    Embed(EmbedArgs),
    /// Train a header on frozen embeddings for link prediction.
    EvalLink(EvalLinkArgs),
    /// Train a header on frozen embeddings for node classification.
    EvalClass(EvalClassArgs),
    /// Sweep one pretraining knob and evaluate each value.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for nodes.jsonl / edges.jsonl / labels.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with SynthConfig fields (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    communities: Option<usize>,
    #[arg(long)]
    rich: Option<usize>,
    #[arg(long)]
    textless_a: Option<usize>,
    #[arg(long)]
    textless_b: Option<usize>,
    #[arg(long)]
    p_in: Option<f64>,
    #[arg(long)]
    p_out: Option<f64>,
    #[arg(long)]
    empty_text_fraction: Option<f64>,
}

#[derive(Args)]
struct IngestArgs {
    /// Graph directory (nodes.jsonl, edges.jsonl, meta.json).
    #[arg(long)]
    dir: PathBuf,
    /// Override the rich-text type list from meta.json.
    #[arg(long, value_delimiter = ',')]
    rich_types: Option<Vec<String>>,
    /// Write the validation report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    dir: PathBuf,
    /// Output directory for checkpoint.bin, vocab.txt, trace.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with PretrainConfig fields (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    k_order: Option<u32>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    neg_ratio: Option<usize>,
    /// Drop the context-graph prediction task.
    #[arg(long)]
    no_cgp: bool,
    /// Drop the masked language modeling task.
    #[arg(long)]
    no_mlm: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Augmentation neighbors per textless node.
    #[arg(long, default_value_t = 3)]
    neighbors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalLinkArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    dir: PathBuf,
    /// Target relation name.
    #[arg(long)]
    relation: String,
    #[arg(long, default_value = "mlp")]
    header: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalClassArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    dir: PathBuf,
    /// JSONL label file ({"id", "labels"} records).
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "mlp")]
    header: String,
    /// Header seeds; several seeds add a mean report.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// One of: K, k, neg-ratio, tasks, tas.
    #[arg(long)]
    sweep: String,
    /// Comma-separated sweep values.
    #[arg(long)]
    values: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .downcast_ref::<tahg_core::Error>()
                .map(|ce| ce.is_config())
                .unwrap_or(false);
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .map_err(|e| tahg_core::Error::Config(format!("cannot read {}: {e}", p.display())))?;
            let cfg = serde_json::from_str(&raw)
                .map_err(|e| tahg_core::Error::Config(format!("bad config {}: {e}", p.display())))?;
            Ok(cfg)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Ingest(args) => cmd_ingest(args),
        Command::Pretrain(args) => cmd_pretrain(args, cli.deterministic),
        Command::Embed(args) => cmd_embed(args),
        Command::EvalLink(args) => cmd_eval_link(args),
        Command::EvalClass(args) => cmd_eval_class(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut cfg: SynthConfig = read_json_config(args.config.as_deref())?;
    cfg.seed = args.seed;
    if let Some(v) = args.communities {
        cfg.communities = v;
    }
    if let Some(v) = args.rich {
        cfg.n_rich = v;
    }
    if let Some(v) = args.textless_a {
        cfg.n_textless_a = v;
    }
    if let Some(v) = args.textless_b {
        cfg.n_textless_b = v;
    }
    if let Some(v) = args.p_in {
        cfg.p_in = v;
    }
    if let Some(v) = args.p_out {
        cfg.p_out = v;
    }
    if let Some(v) = args.empty_text_fraction {
        cfg.empty_text_fraction = v;
    }
    let out = generate(&cfg)?;
    write_dataset(&out, &cfg, &args.out)?;
    let report = out.graph.validate();
    println!(
        "wrote {} nodes, {} edges to {} ({} rich-text nodes)",
        report.node_count,
        report.edge_count,
        args.out.display(),
        out.graph
            .node_ids()
            .filter(|&u| out.graph.is_rich_node(u))
            .count(),
    );
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> anyhow::Result<()> {
    let g = load_dir(&args.dir, args.rich_types.as_deref())?;
    let report = g.validate();
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(p) => std::fs::write(p, &json)?,
        None => println!("{json}"),
    }
    if !report.is_clean() {
        eprintln!("warning: {} validation finding(s)", report.violations.len());
        for v in &report.violations {
            eprintln!("  - {v}");
        }
    }
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs, deterministic: bool) -> anyhow::Result<()> {
    let mut cfg: PretrainConfig = read_json_config(args.config.as_deref())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    } else if !deterministic {
        cfg.seed = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
    }
    if let Some(v) = args.steps {
        cfg.total_steps = v;
        cfg.warmup_steps = cfg.warmup_steps.min(v / 2);
    }
    if let Some(v) = args.k_order {
        cfg.k_order = v;
    }
    if let Some(v) = args.neighbors {
        cfg.k_neighbors = v;
    }
    if let Some(v) = args.neg_ratio {
        cfg.negative_ratio = v;
    }
    if args.no_cgp {
        cfg.use_cgp = false;
    }
    if args.no_mlm {
        cfg.use_mlm = false;
    }
    cfg.validate()?;

    let g = load_dir(&args.dir, None)?;
    let out = pretrain(&cfg, &g)?;
    std::fs::create_dir_all(&args.out)?;
    checkpoint::save_model(&out.model, args.out.join("checkpoint.bin"))?;
    out.vocab.save(args.out.join("vocab.txt"))?;
    out.trace.write_jsonl(&args.out.join("trace.jsonl"))?;
    std::fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    let last = out.trace.records.last();
    println!(
        "pretrained {} steps (mlm {:?}, cgp {:?}); checkpoint {} [{}]",
        out.trace.records.len(),
        last.and_then(|r| r.mlm_loss).map(|v| (v * 1e4).round() / 1e4),
        last.and_then(|r| r.cgp_loss).map(|v| (v * 1e4).round() / 1e4),
        args.out.join("checkpoint.bin").display(),
        out.trace.final_checksum,
    );
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> anyhow::Result<()> {
    let state = checkpoint::load_model(&args.checkpoint)?;
    let vocab = Vocab::load(&args.vocab)?;
    if vocab.len() != state.hyper.vocab_size {
        return Err(tahg_core::Error::Checkpoint(format!(
            "vocabulary size {} does not match checkpoint ({})",
            vocab.len(),
            state.hyper.vocab_size
        ))
        .into());
    }
    let g = load_dir(&args.dir, None)?;
    let emb = export_embeddings(&state, &g, &vocab, args.neighbors, args.seed)?;
    checkpoint::save_embeddings(&emb.table, &emb.checkpoint_id, &args.out)?;
    println!(
        "wrote {} x {} embedding table to {} (checkpoint {})",
        emb.table.rows,
        emb.table.cols,
        args.out.display(),
        emb.checkpoint_id
    );
    Ok(())
}

fn load_embedding_table(path: &Path) -> anyhow::Result<EmbeddingTable> {
    let (table, header) = checkpoint::load_embeddings(path)?;
    Ok(EmbeddingTable {
        table,
        checkpoint_id: header.checkpoint_id,
    })
}

fn header_config(kind: &str, seed: u64) -> anyhow::Result<HeaderConfig> {
    let kind: HeaderKind = kind.parse::<HeaderKind>()?;
    Ok(HeaderConfig {
        kind,
        seed,
        ..Default::default()
    })
}

fn cmd_eval_link(args: EvalLinkArgs) -> anyhow::Result<()> {
    let emb = load_embedding_table(&args.embeddings)?;
    let g = load_dir(&args.dir, None)?;
    let rel = g
        .rel_by_name(&args.relation)
        .ok_or_else(|| tahg_core::Error::UnknownRelation(args.relation.clone()))?;
    let split = make_link_split(&g, rel, (0.3, 0.1, 0.1), (5, 1, 1), args.seed)?;
    let report = run_link_prediction(&emb, &g, &split, &header_config(&args.header, args.seed)?)?;
    report.save_json(&args.out)?;
    println!(
        "link prediction ({}): rmse {:.4}, mae {:.4} -> {}",
        report.header,
        report.metrics["rmse"],
        report.metrics["mae"],
        args.out.display()
    );
    Ok(())
}

fn cmd_eval_class(args: EvalClassArgs) -> anyhow::Result<()> {
    let emb = load_embedding_table(&args.embeddings)?;
    let g = load_dir(&args.dir, None)?;
    let labeled = load_labels(&args.labels, &g)?;
    let split = make_label_split(&labeled, (0.6, 0.2), args.seeds[0])?;
    let base = header_config(&args.header, args.seeds[0])?;
    let (reports, mean) =
        run_node_classification_seeds(&emb, &g, &split, &base, &args.seeds)?;
    let payload = serde_json::json!({
        "per_seed": reports,
        "mean": mean,
    });
    std::fs::write(&args.out, serde_json::to_string_pretty(&payload)?)?;
    println!(
        "node classification ({}, {} seed(s)): mean micro-P@1 {:.4} -> {}",
        mean.header,
        reports.len(),
        mean.metrics["micro_p@1"],
        args.out.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let mut base: PretrainConfig = read_json_config(args.config.as_deref())?;
    if let Some(v) = args.seed {
        base.seed = v;
    }
    if let Some(v) = args.steps {
        base.total_steps = v;
        base.warmup_steps = base.warmup_steps.min(v / 2);
    }
    base.validate()?;
    let sweep = Sweep::parse(&args.sweep, &args.values)?;

    let g = load_dir(&args.dir, None)?;
    let labeled = load_labels(&args.labels, &g)?;
    let split = make_label_split(&labeled, (0.6, 0.2), base.seed)?;
    let header = HeaderConfig {
        seed: base.seed,
        ..Default::default()
    };

    std::fs::create_dir_all(&args.out)?;
    let runs: Vec<SweepRun> = run_sweep(&sweep, &base, &g, &split, &header)?;
    for run in &runs {
        let dir = args.out.join(run.value.replace('=', "-"));
        std::fs::create_dir_all(&dir)?;
        run.report.save_json(&dir.join("report.json"))?;
    }
    let mean = mean_report(&runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>());
    let summary = serde_json::json!({
        "sweep": sweep.label(),
        "runs": runs,
        "mean": mean,
    });
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!("{} report(s) under {}:", runs.len(), args.out.display());
    for run in &runs {
        println!(
            "  {}: micro-P@1 {:.4}",
            run.value, run.report.metrics["micro_p@1"]
        );
    }
    Ok(())
}
