use std::path::PathBuf;

use clap::Args as ClapArgs;
use nepadd_core::checkpoint;
use nepadd_core::dataio::load_corpus;
use nepadd_core::error::Result;
use nepadd_core::training::pretrain_teacher;

use super::{parallelism, prepare_out_dir, write_jsonl, ConfigArgs};

#[derive(Debug, ClapArgs)]
pub struct Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Corpus directory produced by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the teacher checkpoint and log
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: Args) -> Result<()> {
    let cfg = args.config.load()?;
    prepare_out_dir(&args.out, args.force)?;
    let corpus = load_corpus(&args.data)?;
    let out = pretrain_teacher(&corpus, &cfg.model, &cfg.teacher, parallelism())?;

    let ckpt_path = args.out.join("teacher.ckpt");
    let moments = out.adam.to_store(&out.model.store);
    checkpoint::save(&ckpt_path, &out.model.store, &moments, out.adam.step, cfg.hash())?;
    write_jsonl(&args.out.join("pretrain_log.jsonl"), &out.log)?;

    println!("teacher checkpoint: {}", ckpt_path.display());
    println!("held-out frame-tag accuracy: {:.4}", out.dev_tag_accuracy);
    Ok(())
}
