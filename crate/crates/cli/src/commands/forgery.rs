use std::path::PathBuf;

use clap::Args as ClapArgs;
use nepadd_core::dataio::load_corpus;
use nepadd_core::datagen::{Corpus, Split};
use nepadd_core::error::{Error, Result};
use nepadd_core::model::AggregationMode;
use nepadd_core::par::{map_collect, with_jobs};
use nepadd_core::params::ParamStore;
use nepadd_core::training::{evaluate, split_pairs, train_padd};
use serde::Serialize;

use super::train::load_teacher_store;
use super::{format_eer_percent, parallelism, prepare_out_dir, write_json, write_text, ConfigArgs};
use crate::svg::{line_chart, Series};

#[derive(Debug, ClapArgs)]
pub struct Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Teacher checkpoint (required when the modes include af or at)
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Aggregation modes to study, comma separated (none, af, at)
    #[arg(long, value_delimiter = ',', default_values_t = [AggregationMode::Af, AggregationMode::At])]
    pub modes: Vec<AggregationMode>,
    /// Minimum fake utterances a level needs in both train and eval splits
    #[arg(long, default_value_t = 2)]
    pub min_utterances: usize,
    /// Concurrent per-level runs
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Serialize)]
struct LevelRow {
    level: usize,
    mode: String,
    eval_eer: f64,
}

fn level_counts(corpus: &Corpus, level: usize) -> (usize, usize) {
    let count = |split: Split| {
        corpus
            .split(split)
            .filter(|u| u.record.is_fake() && u.record.forgery_level() == level)
            .count()
    };
    (count(Split::Train), count(Split::Eval))
}

pub fn run(args: Args) -> Result<()> {
    let cfg = args.config.load()?;
    if args.modes.is_empty() {
        return Err(Error::Config("at least one aggregation mode is required".into()));
    }
    let needs_teacher = args.modes.iter().any(|m| m.needs_teacher());
    if needs_teacher && args.teacher.is_none() {
        return Err(Error::Config("modes af/at require --teacher <checkpoint>".into()));
    }
    prepare_out_dir(&args.out, args.force)?;
    let corpus = load_corpus(&args.data)?;
    let teacher: Option<ParamStore> = args.teacher.as_ref().map(load_teacher_store).transpose()?;

    // levels 1..=10 with enough utterances on both sides get their own run
    let mut tasks: Vec<(usize, AggregationMode)> = Vec::new();
    for level in 1..=10usize {
        let (n_train, n_eval) = level_counts(&corpus, level);
        if n_train < args.min_utterances || n_eval < args.min_utterances.min(1) {
            eprintln!(
                "warning: level {level} skipped: {n_train} train / {n_eval} eval fake utterances \
                 (need at least {})",
                args.min_utterances
            );
            continue;
        }
        for mode in &args.modes {
            tasks.push((level, *mode));
        }
    }
    if tasks.is_empty() {
        return Err(Error::Data("no forgery level has enough utterances".into()));
    }

    let par = parallelism();
    let results: Vec<Result<LevelRow>> = with_jobs(par, args.jobs, || {
        map_collect(par, &tasks, |(level, mode)| {
            let subset = corpus.forgery_level_subset(*level);
            let mut tc = cfg.training;
            tc.aggregation = *mode;
            if *mode == AggregationMode::At && tc.lambda_kl.is_none() {
                tc.lambda_kl = Some(0.3);
            }
            let teacher_ref = if mode.needs_teacher() { teacher.as_ref() } else { None };
            let out = train_padd(&subset, &cfg.model, &tc, teacher_ref, par)?;
            let eval_pairs = split_pairs(&subset, Split::Eval)?;
            let (eer, _) = evaluate(&out.model, &eval_pairs, *mode, par)?;
            Ok(LevelRow { level: *level, mode: mode.to_string(), eval_eer: eer })
        })
    });
    let rows: Vec<LevelRow> = results.into_iter().collect::<Result<_>>()?;

    let mut csv = String::from("level,mode,eval_eer\n");
    println!("{:<6} {:<6} {:>10}", "level", "mode", "EER%");
    for r in &rows {
        csv.push_str(&format!("{},{},{:.6}\n", r.level, r.mode, r.eval_eer));
        println!("{:<6} {:<6} {:>10}", r.level, r.mode, format_eer_percent(r.eval_eer));
    }
    write_text(&args.out.join("forgery_levels.csv"), &csv)?;
    write_json(&args.out.join("forgery_levels.json"), &rows)?;

    let series: Vec<Series> = args
        .modes
        .iter()
        .map(|mode| Series {
            name: mode.to_string(),
            points: rows
                .iter()
                .filter(|r| r.mode == mode.to_string())
                .map(|r| (r.level as f64, r.eval_eer * 100.0))
                .collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    write_text(
        &args.out.join("forgery_levels.svg"),
        &line_chart("EER vs forgery level", "forgery level", "EER %", &series),
    )?;
    Ok(())
}
