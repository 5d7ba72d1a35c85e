pub mod eval;
pub mod forgery;
pub mod gen_data;
pub mod pretrain;
pub mod sweep;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args as ClapArgs;
use nepadd_core::config::RunConfig;
use nepadd_core::error::{Error, Result};
use nepadd_core::par::Parallelism;

/// Seed override shared by every command: config value, then the NEPADD_SEED
/// variable, then an explicit --seed flag.
#[derive(Debug, ClapArgs)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply for missing keys or when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override every seed in the configuration
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var("NEPADD_SEED") {
            let seed: u64 = v
                .parse()
                .map_err(|e| Error::Config(format!("NEPADD_SEED `{v}` is not a u64: {e}")))?;
            cfg.override_seed(seed);
        }
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parallelism() -> Parallelism {
    Parallelism::default()
}

/// Create the output directory; refuse to reuse a non-empty one unless forced.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Data(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, s)?;
    Ok(())
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn format_eer_percent(eer: f64) -> String {
    format!("{:.2}", eer * 100.0)
}
