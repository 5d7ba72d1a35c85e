use std::path::PathBuf;

use clap::Args as ClapArgs;
use nepadd_core::datagen::generate_corpus;
use nepadd_core::dataio::write_corpus;
use nepadd_core::error::Result;

use super::{prepare_out_dir, write_json, write_text, ConfigArgs};

#[derive(Debug, ClapArgs)]
pub struct Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for manifest, features and the stats report
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: Args) -> Result<()> {
    let cfg = args.config.load()?;
    prepare_out_dir(&args.out, args.force)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    write_corpus(&corpus, &args.out)?;

    let stats = corpus.stats();
    write_json(&args.out.join("stats.json"), &stats)?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml_string()?)?;

    println!("{:<8} {:>10} {:>8} {:>8} {:>22}", "Name", "Bona fide", "Fake", "All", "Named Entities Count");
    for s in &stats {
        println!("{:<8} {:>10} {:>8} {:>8} {:>22}", s.split.to_string(), s.bona_fide, s.fake, s.all, s.named_entities);
    }
    println!(
        "wrote {} utterances to {} (spoofed frame fraction {:.4}, mean entities/utt {:.2})",
        corpus.utterances.len(),
        args.out.display(),
        corpus.spoofed_frame_fraction(),
        corpus.mean_entities_per_utterance()
    );
    Ok(())
}
