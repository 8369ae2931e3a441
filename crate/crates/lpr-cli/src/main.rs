//! `lpr`: generate synthetic livestream corpora, train the retrieval model,
//! evaluate recall, export embeddings, and run component ablations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lpr_core::arrayfile;
use lpr_core::harness::{self, eval, export, plot, Checkpoint, TrainConfig};
use lpr_core::synth_data::{generate_corpus, Corpus, CorpusSpec};

#[derive(Parser)]
#[command(name = "lpr", version, about = "Livestream product retrieval testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for everything this run writes.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        variants_per_class: Option<usize>,
        #[arg(long)]
        num_train: Option<usize>,
        #[arg(long)]
        num_test: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        frame_count: Option<usize>,
        #[arg(long)]
        distractors_min: Option<usize>,
        #[arg(long)]
        distractors_max: Option<usize>,
        #[arg(long)]
        occlusion_prob: Option<f64>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        noise_tokens: Option<usize>,
    },
    /// Train on a corpus and write a checkpoint plus metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory produced by generate-data.
        #[arg(long)]
        data: PathBuf,
        /// Config overrides as KEY=VALUE (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint: recall report plus recall curve plot.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which manifest split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also export graph blocks and mined indices for one batch.
        #[arg(long)]
        export_graphs: bool,
    },
    /// Export gallery embeddings as tensor files.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the component ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_config(common: &Common, sets: &[String]) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    for kv in sets {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        cfg.apply_key_value(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[allow(clippy::type_complexity)]
fn load_split(
    corpus: &Corpus,
    cfg: &TrainConfig,
    split: &str,
) -> Result<(ndarray::Array4<f64>, Vec<Vec<u32>>, Vec<usize>)> {
    let records = corpus.split(split);
    if records.is_empty() {
        bail!("split `{split}` has no records");
    }
    let n = records.len();
    let (l, hw) = (cfg.frame_count, cfg.image_size);
    let mut clips = ndarray::Array4::<f64>::zeros((n, l, hw, hw));
    let mut asr = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for (i, r) in records.iter().enumerate() {
        clips.index_axis_mut(ndarray::Axis(0), i).assign(&corpus.load_clip(r)?);
        asr.push(r.asr.clone());
        truth.push(r.product_id);
    }
    Ok((clips, asr, truth))
}

fn load_catalog(
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(ndarray::Array3<f64>, Vec<Vec<u32>>)> {
    let g = corpus.catalog.len();
    let hw = cfg.image_size;
    let mut images = ndarray::Array3::<f64>::zeros((g, hw, hw));
    let mut titles = Vec::with_capacity(g);
    for (i, e) in corpus.catalog.iter().enumerate() {
        images.index_axis_mut(ndarray::Axis(0), i).assign(&corpus.load_catalog_image(e)?);
        titles.push(e.title.clone());
    }
    Ok((images, titles))
}

#[derive(serde::Serialize)]
struct EvalReport {
    split: String,
    gallery_size: usize,
    num_queries: usize,
    recall_at: Vec<(usize, f64)>,
    r_mean: f64,
    per_query_ranks: Vec<usize>,
    loss_history: Option<Vec<harness::StepMetrics>>,
}

fn evaluate(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    split: &str,
    out_dir: &Path,
    metrics_hint: Option<&Path>,
) -> Result<EvalReport> {
    let cfg = &checkpoint.config;
    let (clips, asr, truth) = load_split(corpus, cfg, split)?;
    let (gallery_images, titles) = load_catalog(corpus, cfg)?;
    let (qv, qt) = harness::embed_queries(&checkpoint.store, cfg, &clips, &asr)?;
    let gallery = eval::embed_gallery(&checkpoint.store, cfg, &gallery_images, &titles)?;
    let ranking = eval::rank_queries(&qv, qt.as_ref(), &gallery, cfg.lambda)?;
    let report = eval::evaluate_recall(&ranking.order, &truth, &[1, 5, 10])?;

    // Full curve out to the gallery size for the plot.
    let g = corpus.catalog.len();
    let ks: Vec<usize> = (1..=g).collect();
    let curve = eval::evaluate_recall(&ranking.order, &truth, &ks)?;
    plot::save_recall_curve(&curve.recall_at, &out_dir.join("recall_curve.png"))?;

    let loss_history = metrics_hint.and_then(|p| read_metrics(p).ok());
    Ok(EvalReport {
        split: split.to_string(),
        gallery_size: g,
        num_queries: truth.len(),
        recall_at: report.recall_at,
        r_mean: report.r_mean,
        per_query_ranks: eval::truth_ranks(&ranking.order, &truth),
        loss_history,
    })
}

fn read_metrics(path: &Path) -> Result<Vec<harness::StepMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData {
            common,
            num_classes,
            variants_per_class,
            num_train,
            num_test,
            image_size,
            frame_count,
            distractors_min,
            distractors_max,
            occlusion_prob,
            vocab_size,
            noise_tokens,
        } => {
            let mut spec = match &common.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    parse_corpus_config(&text)?
                }
                None => CorpusSpec::default(),
            };
            macro_rules! set {
                ($field:ident, $value:expr) => {
                    if let Some(v) = $value {
                        spec.$field = v;
                    }
                };
            }
            set!(num_classes, num_classes);
            set!(variants_per_class, variants_per_class);
            set!(num_train, num_train);
            set!(num_test, num_test);
            set!(image_size, image_size);
            set!(frame_count, frame_count);
            set!(distractors_min, distractors_min);
            set!(distractors_max, distractors_max);
            set!(occlusion_prob, occlusion_prob);
            set!(vocab_size, vocab_size);
            set!(noise_tokens_per_caption, noise_tokens);
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            std::fs::create_dir_all(&common.out_dir)?;
            generate_corpus(&spec, &common.out_dir)?;
            println!(
                "generated corpus: {} products, {} train / {} test records at {}",
                spec.num_products(),
                spec.num_train,
                spec.num_test,
                common.out_dir.display()
            );
            Ok(())
        }
        Command::Train { common, data, sets } => {
            let cfg = load_config(&common, &sets)?;
            let corpus = Corpus::load(&data)?;
            let outcome = harness::train(&cfg, &corpus, &common.out_dir)?;
            println!(
                "trained {} steps; checkpoint at {}",
                outcome.checkpoint.step,
                outcome.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Eval { common, data, checkpoint, split, export_graphs } => {
            std::fs::create_dir_all(&common.out_dir)?;
            let corpus = Corpus::load(&data)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let metrics_hint = checkpoint.parent().map(|p| p.join("metrics.jsonl"));
            let report = evaluate(&ckpt, &corpus, &split, &common.out_dir, metrics_hint.as_deref())?;
            let report_path = common.out_dir.join("eval_report.json");
            serde_json::to_writer_pretty(std::fs::File::create(&report_path)?, &report)?;
            if export_graphs {
                export::export_interaction_arrays(
                    &ckpt.store,
                    &ckpt.config,
                    &corpus,
                    &common.out_dir.join("arrays"),
                )?;
            }
            for (k, r) in &report.recall_at {
                println!("R@{k} = {r:.4}");
            }
            println!("R@mean = {:.4}", report.r_mean);
            println!("report: {}", report_path.display());
            Ok(())
        }
        Command::Embed { common, data, checkpoint } => {
            std::fs::create_dir_all(&common.out_dir)?;
            let corpus = Corpus::load(&data)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (images, titles) = load_catalog(&corpus, &ckpt.config)?;
            let gallery = eval::embed_gallery(&ckpt.store, &ckpt.config, &images, &titles)?;
            arrayfile::write_f64(
                &common.out_dir.join("gallery_visual.lpt"),
                &gallery.visual.into_dyn(),
            )?;
            if let Some(text) = gallery.text {
                arrayfile::write_f64(&common.out_dir.join("gallery_text.lpt"), &text.into_dyn())?;
            }
            println!("embedded {} gallery items to {}", corpus.catalog.len(), common.out_dir.display());
            Ok(())
        }
        Command::Ablate { common, data, sets } => {
            let base = load_config(&common, &sets)?;
            let corpus = Corpus::load(&data)?;
            std::fs::create_dir_all(&common.out_dir)?;
            #[allow(clippy::type_complexity)]
            let variants: [(&str, fn(&mut TrainConfig)); 5] = [
                ("full", |_| {}),
                ("no_te", |c| c.use_te = false),
                ("no_tmc", |c| c.use_tmc = false),
                ("no_gci", |c| c.use_gci = false),
                ("no_smf", |c| c.use_smf = false),
            ];
            let mut rows = Vec::new();
            for (name, tweak) in variants {
                let mut cfg = base.clone();
                tweak(&mut cfg);
                let run_dir = common.out_dir.join(name);
                let outcome = harness::train(&cfg, &corpus, &run_dir)?;
                let report = evaluate(
                    &outcome.checkpoint,
                    &corpus,
                    "test",
                    &run_dir,
                    Some(&outcome.metrics_path),
                )?;
                println!(
                    "{name}: R@1 {:.4} R@5 {:.4} R@10 {:.4} R@mean {:.4}",
                    report.recall_at[0].1, report.recall_at[1].1, report.recall_at[2].1, report.r_mean
                );
                rows.push(serde_json::json!({
                    "variant": name,
                    "use_te": cfg.use_te,
                    "use_tmc": cfg.use_tmc,
                    "use_gci": cfg.use_gci,
                    "use_smf": cfg.use_smf,
                    "recall_at": report.recall_at,
                    "r_mean": report.r_mean,
                }));
            }
            let path = common.out_dir.join("ablation.json");
            serde_json::to_writer_pretty(std::fs::File::create(&path)?, &rows)?;
            println!("ablation table: {}", path.display());
            Ok(())
        }
    }
}

/// Corpus specs reuse the flat config format with their own key set.
fn parse_corpus_config(text: &str) -> Result<CorpusSpec> {
    let mut spec = CorpusSpec::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`", lineno + 1);
        };
        let (key, value) = (key.trim(), value.trim());
        macro_rules! parse_into {
            ($field:ident) => {{
                spec.$field = value
                    .parse()
                    .with_context(|| format!("invalid value `{value}` for `{key}`"))?;
            }};
        }
        match key {
            "num_classes" => parse_into!(num_classes),
            "variants_per_class" => parse_into!(variants_per_class),
            "num_train" => parse_into!(num_train),
            "num_test" => parse_into!(num_test),
            "image_size" => parse_into!(image_size),
            "frame_count" => parse_into!(frame_count),
            "distractors_min" => parse_into!(distractors_min),
            "distractors_max" => parse_into!(distractors_max),
            "occlusion_prob" => parse_into!(occlusion_prob),
            "vocab_size" => parse_into!(vocab_size),
            "noise_tokens_per_caption" => parse_into!(noise_tokens_per_caption),
            "seed" => parse_into!(seed),
            other => bail!("unknown corpus config key `{other}`"),
        }
    }
    Ok(spec)
}
