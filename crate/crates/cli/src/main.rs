use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use graphreason::backbone::Model;
use graphreason::data::{generate_synthetic, write_interactions};
use graphreason::graph::SwingGraph;
use graphreason::inference::adaptive_infer;
use graphreason::pipeline::{self, Dataset, Manifest};
use graphreason::verification::{flops_estimate, run_suite, write_jsonl};
use graphreason::{ExperimentConfig, ItemId};
use serde_json::json;

/// Graph-conditioned latent reasoning for next-item recommendation.
#[derive(Parser)]
#[command(name = "graphreason", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set backbone.d=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory; overrides the `output` key.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic interaction log as CSV.
    Synth,
    /// Build the Swing graph from the training split.
    BuildGraph,
    /// Train and write a checkpoint plus the per-epoch log.
    Train {
        /// Reuse a saved graph instead of rebuilding it.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Adaptive inference for one history.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Comma-separated item ids, oldest first.
        #[arg(long, value_delimiter = ',', required = true)]
        history: Vec<u64>,
    },
    /// Test-split metrics for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Run the verification suite; exits with 2 if any check fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cost model for one configuration.
    Flops {
        #[arg(long)]
        context: u64,
        #[arg(long)]
        history: u64,
        #[arg(long)]
        d: u64,
        #[arg(long)]
        layers: u64,
        #[arg(long)]
        steps: u64,
    },
    /// Average attention maps over test users.
    ExportAttention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
}

enum Outcome {
    Ok,
    VerificationFailed,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.overrides {
        let Some((k, v)) = kv.split_once('=') else { bail!("--set expects KEY=VALUE, got {kv:?}") };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(out) = &common.output {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    Ok(cfg)
}

fn graph_for(
    cfg: &ExperimentConfig,
    data: &Dataset,
    path: Option<&Path>,
    manifest: &mut Manifest,
) -> Result<SwingGraph> {
    match path {
        Some(p) => {
            manifest.input(p)?;
            Ok(SwingGraph::load(p).with_context(|| format!("loading graph {}", p.display()))?)
        }
        None => Ok(pipeline::build_graph(cfg, data)?),
    }
}

fn load_model(cfg: &ExperimentConfig, path: Option<&Path>, manifest: &mut Manifest) -> Result<Model<f64>> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.join("model.ckpt"));
    manifest.input(&path)?;
    let (model, _) = Model::<f64>::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(cli: Cli) -> Result<Outcome> {
    let cfg = load_config(&cli.common)?;
    let out = cfg.output.clone();
    let stage = match &cli.command {
        Command::Synth => "synth",
        Command::BuildGraph => "build-graph",
        Command::Train { .. } => "train",
        Command::Infer { .. } => "infer",
        Command::Eval { .. } => "eval",
        Command::Verify { .. } => "verify",
        Command::Flops { .. } => "flops",
        Command::ExportAttention { .. } => "export-attention",
    };
    let mut manifest = Manifest::new(stage, &cfg);
    let mut outcome = Outcome::Ok;
    match cli.command {
        Command::Synth => {
            let (log, _) = generate_synthetic(&cfg.synth)?;
            let path = out.join("interactions.csv");
            let mut w = create(&path)?;
            write_interactions(&log, &mut w)?;
            w.flush()?;
            manifest.output(&path)?;
            println!("{} users, {} interactions -> {}", log.num_users(), log.num_interactions(), path.display());
        }
        Command::BuildGraph => {
            let data = pipeline::load_dataset(&cfg)?;
            let graph = pipeline::build_graph(&cfg, &data)?;
            let path = out.join("graph.tsv");
            graph.save(&path)?;
            manifest.output(&path)?;
            println!("{} nodes, {} edges -> {}", graph.nodes().len(), graph.num_edges(), path.display());
        }
        Command::Train { graph } => {
            let data = pipeline::load_dataset(&cfg)?;
            let graph = graph_for(&cfg, &data, graph.as_deref(), &mut manifest)?;
            let (model, report) = pipeline::train_model(&cfg, &data, &graph)?;
            let ckpt = out.join("model.ckpt");
            let extra = json!({ "config": cfg.to_text(), "best_epoch": report.best_epoch, "best_val_ndcg10": report.best_val_ndcg10 });
            model.save(&ckpt, &extra)?;
            let log = out.join("train_log.csv");
            let mut w = create(&log)?;
            report.write_csv(&mut w)?;
            w.flush()?;
            manifest.output(&ckpt)?;
            manifest.output(&log)?;
            println!(
                "best epoch {} val NDCG@10 {:.4} -> {}",
                report.best_epoch,
                report.best_val_ndcg10,
                ckpt.display()
            );
        }
        Command::Infer { checkpoint, graph, history } => {
            let model = load_model(&cfg, checkpoint.as_deref(), &mut manifest)?;
            let data = pipeline::load_dataset(&cfg)?;
            let graph = graph_for(&cfg, &data, graph.as_deref(), &mut manifest)?;
            let history: Vec<ItemId> = history.into_iter().map(ItemId).collect();
            let res = adaptive_infer(&model, &history, &graph, &cfg.reasoning_config().inference())?;
            let top: Vec<u64> = res.top_k.iter().map(|i| i.0).collect();
            println!("{}", json!({ "steps_used": res.steps_used, "kl_deltas": res.kl_deltas, "top_k": top }));
        }
        Command::Eval { checkpoint, graph } => {
            let model = load_model(&cfg, checkpoint.as_deref(), &mut manifest)?;
            let data = pipeline::load_dataset(&cfg)?;
            let graph = graph_for(&cfg, &data, graph.as_deref(), &mut manifest)?;
            let report = pipeline::evaluate_model(&cfg, &model, &data, &graph)?;
            let path = out.join("metrics.csv");
            let mut w = create(&path)?;
            report.write_csv(&mut w)?;
            w.flush()?;
            manifest.output(&path)?;
            println!(
                "NDCG@10 {:.4} Recall@10 {:.4} mean steps {:.3} ({} users)",
                report.ndcg[&10], report.recall[&10], report.mean_steps, report.users
            );
        }
        Command::Verify { seed } => {
            let outcomes = run_suite(seed)?;
            let path = out.join("verification.jsonl");
            let mut w = create(&path)?;
            write_jsonl(&outcomes, &mut w)?;
            w.flush()?;
            manifest.output(&path)?;
            for o in &outcomes {
                println!("{:<16} {:?} slack {:e}", o.check, o.status, o.slack);
            }
            if !outcomes.iter().all(|o| o.passed()) {
                outcome = Outcome::VerificationFailed;
            }
        }
        Command::Flops { context, history, d, layers, steps } => {
            let f = flops_estimate(context, history, d, layers, steps);
            let path = out.join("flops.json");
            std::fs::write(&path, serde_json::to_vec(&f)?)?;
            manifest.output(&path)?;
            println!(
                "{}",
                json!({ "encoder": f.encoder.to_string(), "reasoning": f.reasoning.to_string(), "total": f.total.to_string() })
            );
        }
        Command::ExportAttention { checkpoint, graph, samples } => {
            let model = load_model(&cfg, checkpoint.as_deref(), &mut manifest)?;
            let data = pipeline::load_dataset(&cfg)?;
            let graph = graph_for(&cfg, &data, graph.as_deref(), &mut manifest)?;
            let maps = pipeline::attention_maps(&cfg, &model, &data, &graph, samples)?;
            let path = out.join("attention.csv");
            let mut w = create(&path)?;
            maps.write_csv(&mut w)?;
            w.flush()?;
            manifest.output(&path)?;
            println!("attention -> {}", path.display());
        }
    }
    manifest.write(&out)?;
    Ok(outcome)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
