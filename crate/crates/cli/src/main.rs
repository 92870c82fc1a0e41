use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use res_core::corpus::{
    generate_synthetic_world, load_zeshel, Confusability, Dataset, DomainPartition, Split, SynthConfig,
};
use res_core::encoder::{load_checkpoint, System};
use res_core::evaluation::{disagreements, evaluate, scaling_curve, scaling_svg};
use res_core::io;
use res_core::predict::{predict_all, read_predictions, write_predictions, ModelRanker};
use res_core::retrieval::{
    index_by_mention, read_candidates, recall_at_k, retrieve_all, write_candidates, AnalyzerConfig, Bm25Params,
    CandidateMap,
};
use res_core::training::{train, TrainConfig, LOSS_FILE};

const CANDIDATES_FILE: &str = "candidates.jsonl";

#[derive(Parser)]
#[command(name = "res", version, about = "Read-and-select entity linking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert ZESHEL-style documents and mentions into a dataset directory.
    Ingest {
        /// Directory of per-domain document files, or one documents file.
        #[arg(long)]
        documents: PathBuf,
        #[arg(long)]
        mentions: PathBuf,
        /// TOML file with a [partition] table of train/valid/test domains.
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic multi-domain world.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "easy")]
        confusability: Confusability,
        #[arg(long, default_value_t = 8)]
        domains: usize,
        #[arg(long, default_value_t = 40)]
        entities: usize,
        #[arg(long, default_value_t = 60)]
        mentions: usize,
    },
    /// BM25 top-k candidates for every mention.
    Retrieve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        k: usize,
        /// Defaults to <data>/candidates.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
    },
    /// Train a ranker.
    Train {
        /// Config file, or the preset name `desk` or `paper`.
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to <data>/candidates.jsonl.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        system: Option<System>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Rank candidates of one split with a checkpoint.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 64)]
        k: usize,
        /// Scorer; defaults to the system the checkpoint was trained as.
        #[arg(long)]
        system: Option<System>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions and write an evaluation report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 64)]
        k: usize,
        /// Report path (JSON); a text table goes to stdout.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint used to re-rank at each scaling k.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated candidate counts for the scaling curve.
        #[arg(long, value_delimiter = ',')]
        scaling: Vec<usize>,
        /// SVG path for the scaling curves.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Second prediction file to diff against.
        #[arg(long)]
        diff: Option<PathBuf>,
    },
}

fn candidates_path(data: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| data.join(CANDIDATES_FILE))
}

fn load_candidates(path: &Path) -> Result<CandidateMap> {
    Ok(index_by_mention(
        read_candidates(path).with_context(|| format!("reading candidates {}", path.display()))?,
    ))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            documents,
            mentions,
            partition,
            out,
        } => {
            let partition = DomainPartition::load(&partition)?;
            let dataset = load_zeshel(&documents, &mentions, &partition)?;
            dataset.save(&out)?;
            println!(
                "ingested {} entities and {} mentions into {}",
                dataset.all_entities().count(),
                dataset.mentions().len(),
                out.display()
            );
        }
        Command::Synth {
            out,
            seed,
            confusability,
            domains,
            entities,
            mentions,
        } => {
            let dataset = generate_synthetic_world(&SynthConfig {
                seed,
                n_domains: domains,
                entities_per_domain: entities,
                mentions_per_domain: mentions,
                confusability,
            })?;
            dataset.save(&out)?;
            println!("wrote synthetic world to {}", out.display());
        }
        Command::Retrieve { data, k, out, k1, b } => {
            if k == 0 {
                bail!("--k must be at least 1");
            }
            let dataset = Dataset::load(&data)?;
            let sets = retrieve_all(&dataset, k, Bm25Params { k1, b }, AnalyzerConfig::default())?;
            let out = candidates_path(&data, out);
            write_candidates(&out, &sets)?;
            let map = index_by_mention(sets);
            for split in Split::ALL {
                let ms = dataset.mentions_in(split);
                if !ms.is_empty() {
                    println!(
                        "{:<5} recall@{k} = {:.4} over {} mentions",
                        split.name(),
                        recall_at_k(&map, ms.iter().copied(), k)?,
                        ms.len()
                    );
                }
            }
        }
        Command::Train {
            config,
            data,
            candidates,
            out,
            seed,
            system,
            epochs,
        } => {
            let mut cfg = match config.as_str() {
                "desk" | "paper" => TrainConfig::preset(&config)?,
                path => TrainConfig::load(Path::new(path))?,
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = system {
                cfg.system = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let dataset = Dataset::load(&data)?;
            let cands = load_candidates(&candidates_path(&data, candidates))?;
            let outcome = train(&dataset, &cands, &cfg, Some(&out))?;
            let means = outcome.epoch_means();
            println!(
                "trained {} on {} instances; epoch losses {:?}; best epoch {}; loss curve in {}",
                cfg.system.name(),
                outcome.instances,
                means.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>(),
                outcome.best_epoch + 1,
                out.join(LOSS_FILE).display()
            );
        }
        Command::Predict {
            model,
            data,
            candidates,
            split,
            k,
            system,
            out,
        } => {
            let mut model = load_checkpoint(&model)?;
            if let Some(s) = system {
                model.system = s;
            }
            let dataset = Dataset::load(&data)?;
            let cands = load_candidates(&candidates_path(&data, candidates))?;
            let ranker = ModelRanker::new(&model, &dataset);
            let preds = predict_all(&ranker, dataset.mentions_in(split), &cands, k)?;
            write_predictions(&out, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Eval {
            pred,
            data,
            candidates,
            split,
            k,
            out,
            model,
            scaling,
            plot,
            diff,
        } => {
            let dataset = Dataset::load(&data)?;
            let cands = load_candidates(&candidates_path(&data, candidates))?;
            let preds = read_predictions(&pred)?;
            let mut report = evaluate(&dataset, split, &preds, &cands, k)?;
            if !scaling.is_empty() {
                let Some(model) = model else {
                    bail!("--scaling needs --model to re-rank at each k");
                };
                let model = load_checkpoint(&model)?;
                let ranker = ModelRanker::new(&model, &dataset);
                report.scaling = scaling_curve(&ranker, &dataset.mentions_in(split), &cands, &scaling)?;
                if let Some(plot) = plot {
                    let series = vec![
                        (
                            "normalized".to_string(),
                            report.scaling.iter().map(|p| (p.k, p.normalized_accuracy)).collect(),
                        ),
                        (
                            "unnormalized".to_string(),
                            report.scaling.iter().map(|p| (p.k, p.unnormalized_accuracy)).collect(),
                        ),
                    ];
                    io::write_atomic(&plot, scaling_svg("accuracy vs. candidates", &series).as_bytes())?;
                }
            }
            io::write_atomic(&out, report.to_json().as_bytes())?;
            print!("{}", report.to_table());
            if let Some(other) = diff {
                let other = read_predictions(&other)?;
                let d = disagreements(&preds, &other);
                println!("{} disagreements", d.len());
                for x in d {
                    println!(
                        "{}\t{}\t{}",
                        x.mention_id,
                        x.left.as_deref().unwrap_or("-"),
                        x.right.as_deref().unwrap_or("-")
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::from(1)
        }
    }
}
