use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use concept_regions::harness::{self, RunConfig};
use concept_regions::metrics::EvalMode;

#[derive(Parser)]
#[command(name = "concept-regions", version, about = "Concept regions, association scores and contributions for image classifiers")]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set translator.max_epochs=30`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Candidates considered by best_nra_of_top_k.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Evaluate a single mode instead of both.
    #[arg(long, global = true)]
    mode: Option<EvalMode>,
    /// Train the translator without the similarity loss.
    #[arg(long, global = true)]
    no_similarity_loss: bool,
    /// Feed only the last layer's pooled features to the translator.
    #[arg(long, global = true)]
    single_layer: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    Synth,
    /// Train the toy classifier and the translator.
    Train,
    /// Explain one image.
    Explain {
        #[arg(long)]
        image: PathBuf,
        /// Restrict to these concept labels (repeatable).
        #[arg(long = "concept")]
        concepts: Vec<String>,
    },
    /// Evaluate concept regions on the test split.
    Evaluate,
}

fn config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(j) = cli.jobs {
        overrides.push(format!("jobs={j}"));
    }
    if let Some(k) = cli.k {
        overrides.push(format!("eval_k={k}"));
    }
    if let Some(m) = cli.mode {
        overrides.push(format!("modes=[\"{m}\"]"));
    }
    if cli.no_similarity_loss {
        overrides.push("translator.use_similarity_loss=false".into());
    }
    if cli.single_layer {
        overrides.push("translator.multi_layer=false".into());
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out={}", serde_json::to_string(o).context("output path")?));
    }
    Ok(RunConfig::load(cli.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = config(&cli)?;
    match &cli.command {
        Command::Synth => {
            let m = harness::cmd_synth(&cfg).context("synth failed")?;
            println!(
                "wrote {} scenes to {} (content hash {})",
                m.count,
                cfg.dataset.dir.display(),
                m.content_hash
            );
        }
        Command::Train => {
            let r = harness::cmd_train(&cfg).context("train failed")?;
            println!(
                "classifier test accuracy {:.4}; translator stopped at epoch {} (best {}); outputs in {}",
                r.classifier.test_accuracy,
                r.translator.stopped_epoch,
                r.translator.best_epoch,
                cfg.out.display()
            );
        }
        Command::Explain { image, concepts } => {
            let r = harness::cmd_explain(&cfg, image, concepts).context("explain failed")?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!("predicted {} ({})", r.prediction.class_name, r.prediction.class_index);
            for c in &r.contributions {
                println!("  {:<12} contribution {:+.5}", c.label, c.value);
            }
            println!("artifacts in {}", harness::explain_dir(&cfg, &r.image_id).display());
        }
        Command::Evaluate => {
            let r = harness::cmd_evaluate(&cfg).context("evaluate failed")?;
            for m in &r.modes {
                println!(
                    "{} (k={}): Avg. NRA {:.4}, Avg. EPG {:.4}, Hit Rate {:.4} over {} samples",
                    m.mode, m.k, m.summary.avg_nra, m.summary.avg_epg, m.summary.avg_hit_rate, m.summary.count
                );
                for (cat, s) in &m.summary.per_category {
                    println!("  {cat:<8} NRA {:.4} EPG {:.4} Hit {:.4} (n={})", s.nra, s.epg, s.hit_rate, s.count);
                }
            }
            println!(
                "random maps: Avg. NRA {:.4}, Hit Rate {:.4}; skipped {}",
                r.random_baseline.avg_nra, r.random_baseline.avg_hit_rate, r.skipped.count
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
