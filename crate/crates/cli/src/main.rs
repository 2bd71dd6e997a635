//! `csm`: generate data, train, index, search and evaluate from the shell.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 for data errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use csm_core::evaluator::{analysis_report, evaluate, inspect, render_svg_charts, training_query_set, EvalResults, Inspection};
use csm_core::image_encoder::{gradient_check, LayerSpec, NetworkSpec};
use csm_core::io::{read_dataset, read_judgments, read_queries, write_dataset, QUERIES};
use csm_core::objective::loss_gradient_check;
use csm_core::retrieval::{build_index, search, ImageIndex, ModelCheckpoint};
use csm_core::synthgen::{generate_dataset, GenerationConfig};
use csm_core::trainer::{train, TrainerConfig};
use csm_core::CsmError;
use serde_json::json;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "csm", version, about = "Cross-space image retrieval from clickthrough data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clickthrough dataset directory.
    GenData {
        /// Generation config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a JSON-lines history.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Trainer config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// History file; defaults to `<out>.history.jsonl`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Embed a directory of `.ten` images.
    Index {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k images for a text query.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 25)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print JSON instead of tab-separated lines.
        #[arg(long)]
        json: bool,
    },
    /// DCG@n of model, ideal and random rankings over judged queries.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        /// Query texts; defaults to `queries.tsv` next to the judgments.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 25)]
        n: usize,
        /// Which queries to score; `auto` means the held-out test split when
        /// the checkpoint records one, otherwise all.
        #[arg(long, value_enum, default_value_t = Subset::Auto)]
        subset: Subset,
    },
    /// Render the analysis tables and charts for an evaluation report.
    Report {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every layer kind and of the margin loss.
    Gradcheck {
        /// Trainer config whose image network is also checked.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image side length used when the config has no explicit network.
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Subset {
    Auto,
    All,
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<CsmError>() {
        Some(CsmError::File { source, .. }) if !source.is_data_error() => 1,
        Some(c) if !c.is_data_error() => 1,
        _ => 2,
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses a JSON config; a malformed config is a usage error.
fn read_config<C: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData { config, seed, out } => {
            let config: GenerationConfig = read_config(config.as_deref())?;
            let ds = generate_dataset(&config, seed)?;
            write_dataset(&ds, &out)?;
            println!(
                "wrote {} images, {} queries, {} clicks, {} judgments to {}",
                ds.images.len(),
                ds.queries.len(),
                ds.clicks.num_clicks(),
                ds.judgments.len(),
                out.display()
            );
        }
        Command::Train { data, config, out, history } => {
            let config: TrainerConfig = read_config(config.as_deref())?;
            config.validate()?;
            let ds = read_dataset(&data)?;
            let (ckpt, hist) = train(&ds, &config)?;
            ckpt.save(&out)?;
            let history = history.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".history.jsonl");
                p.into()
            });
            hist.write_json_lines(BufWriter::new(File::create(&history)?))?;
            if let Some(last) = hist.records.last() {
                println!(
                    "trained {} epochs; validation margin {:.6}; checkpoint {} ({})",
                    ckpt.meta().epochs,
                    last.validation_margin,
                    out.display(),
                    ckpt.digest()
                );
            }
        }
        Command::Index { model, images, out } => {
            let ckpt = ModelCheckpoint::load(&model)?;
            let index = build_index(&ckpt, &images)?;
            index.save(&out)?;
            println!("indexed {} images into {}", index.len(), out.display());
        }
        Command::Search { model, index, query, k, seed, json } => {
            if k == 0 {
                return Err(usage("--k must be at least 1"));
            }
            let ckpt = ModelCheckpoint::load(&model)?;
            let index = ImageIndex::load(&index)?;
            let result = search(&ckpt, &index, &query, k, seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&result)?);
            } else {
                if result.oov {
                    println!("# out of vocabulary: random ranking");
                }
                for (rank, e) in result.ranked.entries.iter().enumerate() {
                    println!("{}\t{}\t{:.6}", rank + 1, e.image, e.score);
                }
            }
        }
        Command::Evaluate { model, index, judgments, queries, out, seed, n, subset } => {
            if n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            let ckpt = ModelCheckpoint::load(&model)?;
            let index = ImageIndex::load(&index)?;
            if index.checkpoint_digest() != ckpt.digest() {
                return Err(CsmError::DigestMismatch {
                    index: index.checkpoint_digest().into(),
                    model: ckpt.digest().into(),
                }
                .into());
            }
            let queries_path = queries.unwrap_or_else(|| judgments.with_file_name(QUERIES));
            let texts = read_queries(&queries_path)?;
            let mut judged = read_judgments(&judgments)?;
            let split = ckpt.meta().split.as_ref();
            let chosen: Option<BTreeSet<u32>> = match (subset, split) {
                (Subset::All, _) | (Subset::Auto, None) => None,
                (Subset::Auto | Subset::Test, Some(s)) => Some(s.test.iter().copied().collect()),
                (Subset::Train, Some(s)) => Some(s.train.iter().chain(&s.validation).copied().collect()),
                (_, None) => bail!(usage("checkpoint records no query split")),
            };
            if let Some(ids) = &chosen {
                judged = judged.restricted_to(ids);
            }
            let training = training_query_set(&ckpt.meta().training_queries);
            let results = evaluate(ckpt.model(), &index, &judged, &texts, &training, n, seed)?;
            let words = probe_words(&results, &texts);
            let inspection = inspect(ckpt.model(), &index, 4, 10, &words, seed)?;
            let report = json!({ "results": results, "inspection": inspection });
            fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!(
                "{} queries: DCG@{n} model {:.4}, random {:.4}, ideal {:.4}",
                results.per_query.len(),
                results.mean_model,
                results.mean_random,
                results.mean_ideal
            );
        }
        Command::Report { eval, out } => {
            let text = fs::read_to_string(&eval).with_context(|| format!("reading {}", eval.display()))?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(CsmError::from)?;
            let results: EvalResults = serde_json::from_value(value["results"].clone()).map_err(CsmError::from)?;
            let inspection: Option<Inspection> = match value.get("inspection") {
                Some(v) => Some(serde_json::from_value(v.clone()).map_err(CsmError::from)?),
                None => None,
            };
            let report = analysis_report(&results, inspection.as_ref());
            fs::create_dir_all(&out)?;
            fs::write(out.join("analysis.json"), serde_json::to_string_pretty(&report)?)?;
            for (name, svg) in render_svg_charts(&report) {
                fs::write(out.join(name), svg)?;
            }
            println!("{:<6} {:>5} {:>8} {:>8} {:>8}", "words", "count", "model", "random", "ideal");
            for b in &report.buckets {
                println!("{:<6} {:>5} {:>8.4} {:>8.4} {:>8.4}", b.label, b.count, b.mean_model, b.mean_random, b.mean_ideal);
            }
            println!("match types: exact {} partial {} none {}", report.exact, report.partial, report.none);
        }
        Command::Gradcheck { config, image_size, seed } => {
            let config: TrainerConfig = read_config(config.as_deref())?;
            let network = config.network_for(image_size);
            network.validate()?;
            let mut all_passed = true;
            let checks = [
                ("layer kinds", gradient_check(&all_kinds_network(), [2, 8, 8], GRADCHECK_TOLERANCE, seed)?),
                ("configured network", gradient_check(&network, network.input_shape, GRADCHECK_TOLERANCE, seed)?),
                ("margin loss, d=4", loss_gradient_check(&toy_loss_network(), GRADCHECK_TOLERANCE, seed)?),
            ];
            for (name, report) in &checks {
                println!("{name}:\n{report}");
                all_passed &= report.passed;
            }
            if !all_passed {
                bail!(CsmError::Contract("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

/// Conv with padding, pooling, LCN with a visible nonlinearity, and two FC layers.
fn all_kinds_network() -> NetworkSpec {
    NetworkSpec {
        input_shape: [2, 8, 8],
        layers: vec![
            LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, padding: 1, relu: true },
            LayerSpec::pool(2, 2),
            LayerSpec::Lcn { n: 3, k: 1.0, alpha: 0.5, beta: 0.75 },
            LayerSpec::conv(3, 3, 1),
            LayerSpec::fc(6, true),
            LayerSpec::fc(4, false),
        ],
    }
}

fn toy_loss_network() -> NetworkSpec {
    NetworkSpec {
        input_shape: [2, 6, 6],
        layers: vec![LayerSpec::conv(3, 3, 1), LayerSpec::pool(2, 2), LayerSpec::lcn(), LayerSpec::fc(4, false)],
    }
}

/// The most common words among the evaluated queries, for neighbour inspection.
fn probe_words(results: &EvalResults, texts: &BTreeMap<u32, String>) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &results.per_query {
        for w in csm_core::text_encoder::tokenize(&texts[&r.query_id]) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(3).map(|(w, _)| w).collect()
}
