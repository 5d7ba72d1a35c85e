use std::path::PathBuf;

use clap::Args as ClapArgs;
use nepadd_core::dataio::load_corpus;
use nepadd_core::datagen::Split;
use nepadd_core::error::{Error, Result};
use nepadd_core::model::AggregationMode;
use nepadd_core::par::{map_collect, with_jobs};
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
    /// Teacher checkpoint (the sweep always runs the transfer mode)
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// First lambda of the grid
    #[arg(long, default_value_t = 0.1)]
    pub from: f64,
    /// Last lambda of the grid (inclusive)
    #[arg(long, default_value_t = 1.0)]
    pub to: f64,
    /// Grid step
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    /// Concurrent training runs
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub force: bool,
}

/// The inclusive grid `{from, from+step, ..., to}`.
pub fn lambda_grid(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("sweep step must be > 0, got {step}")));
    }
    if to < from {
        return Err(Error::Config(format!("sweep range is empty: from {from} to {to}")));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| from + i as f64 * step).collect())
}

#[derive(Serialize)]
struct SweepRow {
    lambda: f64,
    eval_eer: f64,
    best_dev_eer: f64,
}

#[derive(Serialize)]
struct SweepReport {
    rows: Vec<SweepRow>,
    best_lambda: f64,
    best_eval_eer: f64,
}

pub fn run(args: Args) -> Result<()> {
    let cfg = args.config.load()?;
    let grid = lambda_grid(args.from, args.to, args.step)?;
    prepare_out_dir(&args.out, args.force)?;
    let corpus = load_corpus(&args.data)?;
    let teacher = load_teacher_store(&args.teacher)?;
    let eval_pairs = split_pairs(&corpus, Split::Eval)?;

    let par = parallelism();
    let results: Vec<Result<SweepRow>> = with_jobs(par, args.jobs, || {
        map_collect(par, &grid, |lambda| {
            let mut tc = cfg.training;
            tc.aggregation = AggregationMode::At;
            tc.lambda_kl = Some(*lambda);
            let out = train_padd(&corpus, &cfg.model, &tc, Some(&teacher), par)?;
            let (eer, _) = evaluate(&out.model, &eval_pairs, AggregationMode::At, par)?;
            Ok(SweepRow { lambda: *lambda, eval_eer: eer, best_dev_eer: out.best_dev_eer })
        })
    });
    let rows: Vec<SweepRow> = results.into_iter().collect::<Result<_>>()?;

    let best = rows
        .iter()
        .min_by(|a, b| a.eval_eer.partial_cmp(&b.eval_eer).expect("finite EER"))
        .expect("non-empty grid");
    let report = SweepReport { best_lambda: best.lambda, best_eval_eer: best.eval_eer, rows };

    let mut csv = String::from("lambda,eval_eer,best_dev_eer\n");
    println!("{:<8} {:>10}", "lambda", "EER%");
    for r in &report.rows {
        csv.push_str(&format!("{:.3},{:.6},{:.6}\n", r.lambda, r.eval_eer, r.best_dev_eer));
        println!("{:<8.1} {:>10}", r.lambda, format_eer_percent(r.eval_eer));
    }
    println!(
        "best lambda: {:.1} (EER% {})",
        report.best_lambda,
        format_eer_percent(report.best_eval_eer)
    );

    write_text(&args.out.join("lambda_sweep.csv"), &csv)?;
    let series = vec![Series {
        name: "transfer".into(),
        points: report.rows.iter().map(|r| (r.lambda, r.eval_eer * 100.0)).collect(),
    }];
    write_text(
        &args.out.join("lambda_sweep.svg"),
        &line_chart("EER vs lambda", "lambda", "EER %", &series),
    )?;
    write_json(&args.out.join("lambda_sweep.json"), &report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::lambda_grid;

    #[test]
    fn default_grid_is_exactly_ten_points() {
        let g = lambda_grid(0.1, 1.0, 0.1).unwrap();
        assert_eq!(g.len(), 10);
        for (i, v) in g.iter().enumerate() {
            assert!((v - 0.1 * (i + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_steps_are_rejected() {
        assert!(lambda_grid(0.1, 1.0, 0.0).is_err());
        assert!(lambda_grid(0.1, 1.0, -0.5).is_err());
        assert!(lambda_grid(1.0, 0.1, 0.1).is_err());
    }
}
