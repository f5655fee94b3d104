use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use mat::checkpoint::Checkpoint;
use mat::config::RunConfig;
use mat::data::{
    caption_vocabulary, generate_synthetic, load_captions, load_dataset, load_features, CaptionRecord, Dataset, Example,
};
use mat::experiment::{ablation_rows_csv, ablation_summary_csv, ordered_seeds, run_ablation};
use mat::inference::{caption_all, SearchOptions};
use mat::metrics::{evaluate, CiderMode, EvalPair};
use mat::training::{write_history, Trainer};

const THREADS_VAR: &str = "MAT_THREADS";
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "mat",
    version,
    about = "Caption object sequences with an attentive encoder-decoder LSTM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/val corpus.
    GenerateData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoints, history and a report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption every record of a feature file.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = mat::inference::DEFAULT_BEAM_SIZE)]
        beam: usize,
        #[arg(long, default_value_t = mat::inference::DEFAULT_MAX_LEN)]
        max_len: usize,
        #[arg(long)]
        length_normalize: bool,
        /// Include per-step attention weights.
        #[arg(long)]
        attention: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score candidate captions against references.
    Evaluate {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use CIDEr-D instead of base CIDEr.
        #[arg(long)]
        cider_d: bool,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train all three variants on synthetic data and compare them.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn threads() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn generate_data(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(spec)?;
    if let Some(s) = seed {
        cfg.synthetic.seed = s;
    }
    prepare_out(out, &cfg)?;
    let data = generate_synthetic(&cfg.synthetic, cfg.train_size + cfg.val_size)?;
    let (train, val) = data.split_at(cfg.train_size);
    for (name, part) in [("train", train), ("val", val)] {
        Dataset {
            features: part.iter().map(|e| (e.id.clone(), e.objects.clone())).collect(),
            captions: part
                .iter()
                .map(|e| CaptionRecord {
                    id: e.id.clone(),
                    caption: e.caption.clone(),
                })
                .collect(),
        }
        .save(&out.join(name))?;
    }
    println!(
        "wrote {} train and {} val examples to {}",
        train.len(),
        val.len(),
        out.display()
    );
    Ok(())
}

fn examples(dataset: &Dataset, vocab: &mat::data::Vocabulary) -> Result<Vec<Example>> {
    Ok(dataset
        .pairs()?
        .into_iter()
        .enumerate()
        .map(|(i, (id, objects, caption))| Example::encode(format!("{id}#{i}"), objects.clone(), caption, vocab))
        .collect())
}

fn corpus_for(records: &[mat::inference::CaptionRecord], dataset: &Dataset) -> Result<Vec<EvalPair>> {
    let refs = dataset.references();
    records
        .iter()
        .map(|c| {
            let r = refs
                .get(&c.id)
                .with_context(|| format!("no reference for `{}`", c.id))?;
            Ok(EvalPair::from_text(&c.caption, r)?)
        })
        .collect()
}

fn train_cmd(config: Option<&Path>, data: Option<PathBuf>, val: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let data = data.or_else(|| cfg.data.clone()).context("no training data (--data)")?;
    let val = val.or_else(|| cfg.val.clone()).context("no validation data (--val)")?;
    let out = out.or_else(|| cfg.out.clone()).context("no output directory (--out)")?;
    prepare_out(&out, &cfg)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;

    let train_set = load_dataset(&data).with_context(|| format!("training data {}", data.display()))?;
    let val_set = load_dataset(&val).with_context(|| format!("validation data {}", val.display()))?;
    let captions: Vec<&str> = train_set.captions.iter().map(|c| c.caption.as_str()).collect();
    let vocab = caption_vocabulary(&captions, cfg.train.min_count)?;
    let train_ex = examples(&train_set, &vocab)?;
    let val_ex = examples(&val_set, &vocab)?;

    let mut trainer = Trainer::new(cfg.train.clone(), vocab.clone(), &train_ex, &val_ex)?;
    while !trainer.is_finished() {
        let r = trainer.run_epoch()?;
        println!(
            "epoch {:>3}  train {:.5}  val {:.5}  lr {}",
            r.epoch, r.train_loss, r.val_loss, r.lr
        );
        write_history(&out.join("history.csv"), trainer.history())?;
        trainer.checkpoint().save(&ckpt_dir.join("best.json"))?;
    }
    let history = trainer.history().to_vec();
    let ckpt = trainer.finish().checkpoint;
    let model = ckpt.to_model()?;
    let items: Vec<_> = val_set.features.clone();
    let captions = caption_all(&model, &vocab, &items, &cfg.search, false, threads())?;
    let metrics = evaluate(&corpus_for(&captions, &val_set)?, cfg.cider_mode)?;
    let best = history.iter().find(|r| r.epoch == ckpt.epoch);
    write_json(
        &out.join("report.json"),
        &json!({
            "epochs": history.len(),
            "best_epoch": ckpt.epoch,
            "best_val_loss": best.map(|r| r.val_loss),
            "vocab_size": vocab.len(),
            "parameters": mat::numerics::Parameters::num_weights(&model),
            "val_metrics": metrics,
        }),
    )?;
    println!(
        "best epoch {} of {}; report in {}",
        ckpt.epoch,
        history.len(),
        out.join("report.json").display()
    );
    Ok(())
}

fn caption_cmd(checkpoint: &Path, features: &Path, opts: SearchOptions, attention: bool, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let model = ckpt.to_model()?;
    let items = load_features(features).with_context(|| format!("features {}", features.display()))?;
    let records = caption_all(&model, &ckpt.vocab, &items, &opts, attention, threads())?;
    let mut buf = String::new();
    for r in &records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    fs::write(out, buf).with_context(|| format!("writing {}", out.display()))?;
    println!("captioned {} images", records.len());
    Ok(())
}

fn evaluate_cmd(candidates: &Path, references: &Path, out: Option<&Path>, cider_d: bool) -> Result<()> {
    let cands = load_captions(candidates).with_context(|| format!("candidates {}", candidates.display()))?;
    let refs = Dataset {
        features: Vec::new(),
        captions: load_captions(references).with_context(|| format!("references {}", references.display()))?,
    }
    .references();
    let corpus = cands
        .iter()
        .map(|c| {
            let r = refs
                .get(&c.id)
                .with_context(|| format!("no reference for `{}`", c.id))?;
            Ok(EvalPair::from_text(&c.caption, r)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mode = if cider_d { CiderMode::D } else { CiderMode::Base };
    let report = serde_json::to_value(evaluate(&corpus, mode)?)?;
    println!("{}", serde_json::to_string(&report)?);
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn grad_check_cmd(config: Option<&Path>) -> Result<bool> {
    let cfg = load_config(config)?;
    let start = std::time::Instant::now();
    let report = cfg.grad_check.run(
        cfg.train.variant,
        cfg.train.modulation,
        cfg.synthetic.feature_dim,
        cfg.train.seed,
    )?;
    let (name, index) = report.worst.clone().unwrap_or_default();
    println!("max_rel_err {:e}", report.max_rel_error);
    println!(
        "worst {name}[{index}]  max_abs_err {:e}  entries {}  {:.2}s",
        report.max_abs_error,
        report.entries_checked,
        start.elapsed().as_secs_f64()
    );
    Ok(report.max_rel_error < GRAD_TOLERANCE)
}

fn ablation_cmd(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    prepare_out(out, &cfg)?;
    let rows = run_ablation(&cfg, threads(), |r| {
        println!(
            "seed {}  {:<13}  val_loss {:.5}  bleu4 {:.4}  cider {:.4}  exact {:.3}",
            r.seed,
            r.variant.to_string(),
            r.val_loss,
            r.bleu4,
            r.cider,
            r.exact_match
        );
    })?;
    fs::write(out.join("ablation.csv"), ablation_summary_csv(&rows))?;
    fs::write(out.join("ablation_seeds.csv"), ablation_rows_csv(&rows))?;
    let ordered = ordered_seeds(&rows);
    write_json(
        &out.join("report.json"),
        &json!({ "rows": rows, "ordered_seeds": ordered, "seeds": cfg.ablation_seeds }),
    )?;
    print!("{}", ablation_summary_csv(&rows));
    println!(
        "mat < no-attention < single-vector on {} of {} seeds",
        ordered.len(),
        cfg.ablation_seeds
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData { spec, out, seed } => generate_data(spec.as_deref(), &out, seed)?,
        Command::Train { config, data, val, out } => train_cmd(config.as_deref(), data, val, out)?,
        Command::Caption {
            checkpoint,
            features,
            beam,
            max_len,
            length_normalize,
            attention,
            out,
        } => {
            if beam == 0 || max_len == 0 {
                bail!("--beam and --max-len must be at least 1");
            }
            let opts = SearchOptions {
                beam_size: beam,
                max_len,
                length_normalize,
            };
            caption_cmd(&checkpoint, &features, opts, attention, &out)?
        }
        Command::Evaluate {
            candidates,
            references,
            out,
            cider_d,
        } => evaluate_cmd(&candidates, &references, out.as_deref(), cider_d)?,
        Command::GradCheck { config } => return grad_check_cmd(config.as_deref()),
        Command::Ablation { config, out } => ablation_cmd(config.as_deref(), &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
