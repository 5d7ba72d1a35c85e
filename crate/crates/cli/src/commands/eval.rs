use std::path::PathBuf;
use std::str::FromStr;

use clap::Args as ClapArgs;
use nepadd_core::checkpoint;
use nepadd_core::dataio::load_corpus;
use nepadd_core::datagen::Split;
use nepadd_core::error::{Error, Result};
use nepadd_core::metrics::{compute_eer, dump_scores, eer_by_forgery_level, pool_scores};
use nepadd_core::model::{AggregationMode, NePaddModel};
use nepadd_core::training::{evaluate, split_pairs};
use serde::Serialize;

use super::{format_eer_percent, parallelism, prepare_out_dir, write_json, write_text, ConfigArgs};

#[derive(Debug, ClapArgs)]
pub struct Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Corpus directory produced by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to evaluate
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory for scores and metrics
    #[arg(long)]
    pub out: PathBuf,
    /// Split to evaluate: train, dev or eval
    #[arg(long, default_value = "eval")]
    pub split: String,
    /// Aggregation mode the checkpoint was trained with (overrides the config)
    #[arg(long)]
    pub aggregation: Option<AggregationMode>,
    /// Additionally break the EER down by forgery level
    #[arg(long)]
    pub by_forgery_level: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Serialize)]
struct Metrics {
    split: String,
    aggregation: String,
    eer: f64,
    eer_percent: String,
    threshold: f64,
    frames: usize,
    utterances: usize,
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(mode) = args.aggregation {
        cfg.training.aggregation = mode;
    }
    let mode = cfg.training.aggregation;
    let split = Split::from_str(&args.split)?;
    prepare_out_dir(&args.out, args.force)?;

    let corpus = load_corpus(&args.data)?;
    let ck = checkpoint::load(&args.ckpt)?;
    if ck.config_hash != cfg.hash() {
        eprintln!("warning: checkpoint config hash differs from the provided configuration");
    }
    let mut model = NePaddModel::new(cfg.model, cfg.training.seed)?;
    model
        .store
        .import_prefix(&ck.params, "")
        .map_err(|e| Error::Data(format!("checkpoint does not match the model config: {e}")))?;

    let pairs = split_pairs(&corpus, split)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("split `{split}` is empty")));
    }
    let (_, scored) = evaluate(&model, &pairs, mode, parallelism())?;
    let pooled = pool_scores(&scored);
    let res = compute_eer(&pooled)?;

    write_text(&args.out.join("scores.jsonl"), &dump_scores(&scored)?)?;
    write_json(
        &args.out.join("metrics.json"),
        &Metrics {
            split: split.to_string(),
            aggregation: mode.to_string(),
            eer: res.eer,
            eer_percent: format_eer_percent(res.eer),
            threshold: res.threshold,
            frames: pooled.len(),
            utterances: scored.len(),
        },
    )?;

    println!("EER%: {}", format_eer_percent(res.eer));

    if args.by_forgery_level {
        let records: Vec<_> = corpus.split(split).map(|u| u.record.clone()).collect();
        let table = eer_by_forgery_level(&scored, &records)?;
        let mut csv = String::from("level,eer\n");
        for (level, eer) in &table.rows {
            csv.push_str(&format!("{level},{eer:.6}\n"));
            println!("level {level}: EER% {}", format_eer_percent(*eer));
        }
        for (level, reason) in &table.skipped {
            eprintln!("warning: level {level} skipped: {reason}");
        }
        write_text(&args.out.join("forgery_eer.csv"), &csv)?;
    }
    Ok(())
}
