use std::path::PathBuf;

use clap::Args as ClapArgs;
use nepadd_core::checkpoint;
use nepadd_core::config::RunConfig;
use nepadd_core::dataio::load_corpus;
use nepadd_core::error::{Error, Result};
use nepadd_core::model::AggregationMode;
use nepadd_core::params::ParamStore;
use nepadd_core::training::train_padd;
use serde::Serialize;

use super::{parallelism, prepare_out_dir, write_json, write_jsonl, ConfigArgs};

#[derive(Debug, ClapArgs)]
pub struct Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Corpus directory produced by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the training log
    #[arg(long)]
    pub out: PathBuf,
    /// Teacher checkpoint (required for af and at)
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Aggregation mode: none, af or at (overrides the config)
    #[arg(long)]
    pub aggregation: Option<AggregationMode>,
    /// Transfer-loss weight (overrides the config)
    #[arg(long)]
    pub lambda_kl: Option<f64>,
    /// Weight on the authentic-class BCE term
    #[arg(long)]
    pub pos_weight: Option<f64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Serialize)]
struct Summary {
    aggregation: String,
    lambda_kl: Option<f64>,
    steps: u64,
    best_step: u64,
    best_dev_eer: f64,
    final_dev_eer: f64,
    best_checkpoint: String,
    final_checkpoint: String,
}

pub fn apply_overrides(cfg: &mut RunConfig, args: &Args) -> Result<()> {
    if let Some(mode) = args.aggregation {
        cfg.training.aggregation = mode;
    }
    if let Some(l) = args.lambda_kl {
        cfg.training.lambda_kl = Some(l);
    }
    if let Some(w) = args.pos_weight {
        cfg.training.pos_weight = Some(w);
    }
    cfg.training.validate()
}

pub fn load_teacher_store(path: &PathBuf) -> Result<ParamStore> {
    Ok(checkpoint::load(path)?.params)
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = args.config.load()?;
    apply_overrides(&mut cfg, &args)?;
    if cfg.training.aggregation.needs_teacher() && args.teacher.is_none() {
        return Err(Error::Config(format!(
            "aggregation mode `{}` requires --teacher <checkpoint>",
            cfg.training.aggregation
        )));
    }
    prepare_out_dir(&args.out, args.force)?;
    let corpus = load_corpus(&args.data)?;
    let teacher = args.teacher.as_ref().map(load_teacher_store).transpose()?;

    let out = train_padd(&corpus, &cfg.model, &cfg.training, teacher.as_ref(), parallelism())?;

    let best_path = args.out.join("best.ckpt");
    let final_path = args.out.join("final.ckpt");
    let hash = cfg.hash();
    // the best checkpoint carries the final optimizer state; it is kept for
    // evaluation, not for resuming at the best step
    let moments = out.adam.to_store(&out.model.store);
    checkpoint::save(&best_path, &out.best_params, &moments, out.best_step, hash)?;
    checkpoint::save(&final_path, &out.model.store, &moments, out.adam.step, hash)?;
    write_jsonl(&args.out.join("train_log.jsonl"), &out.log)?;
    write_json(
        &args.out.join("summary.json"),
        &Summary {
            aggregation: cfg.training.aggregation.to_string(),
            lambda_kl: cfg.training.lambda_kl,
            steps: out.adam.step,
            best_step: out.best_step,
            best_dev_eer: out.best_dev_eer,
            final_dev_eer: out.final_dev_eer,
            best_checkpoint: best_path.display().to_string(),
            final_checkpoint: final_path.display().to_string(),
        },
    )?;

    println!(
        "trained {} steps (mode {}); best dev EER% {} at step {}, final dev EER% {}",
        out.adam.step,
        cfg.training.aggregation,
        super::format_eer_percent(out.best_dev_eer),
        out.best_step,
        super::format_eer_percent(out.final_dev_eer),
    );
    println!("checkpoints: {} / {}", best_path.display(), final_path.display());
    Ok(())
}
