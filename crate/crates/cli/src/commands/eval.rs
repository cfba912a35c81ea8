use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use moes_core::dataset::io::read_pfm;
use moes_core::dataset::SaliencySample;
use moes_core::metrics::report::{evaluate, EvalInput};
use moes_core::metrics::Metric;
use moes_core::Tensor;

use super::predict::predict_members;
use super::{load_checkpoints, open_dataset, select, Subset};
use crate::config::RunConfig;
use crate::output::{create_dir, write, RunMeta};

const BATCH: usize = 8;

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Model checkpoint; repeat to average an ensemble.
    #[arg(long, conflicts_with = "maps", required_unless_present = "maps")]
    pub checkpoint: Vec<PathBuf>,
    /// Directory of `<sample id>.pfm` maps to score instead of a model.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// Dataset directory (defaults to the configured data root).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Which part of the configured split to score.
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    /// Comma-separated metric names (defaults to the configured list).
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
}

/// Rows are true categories, columns the argmax of the class probabilities.
pub fn confusion_csv(names: &[String], counts: &[Vec<usize>]) -> String {
    let mut s = String::from("true\\predicted");
    for n in names.iter().take(counts.first().map_or(0, |r| r.len())) {
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    for (name, row) in names.iter().zip(counts) {
        let _ = write!(s, "{name}");
        for c in row {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    }
    s
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
}

pub fn run(cfg: &RunConfig, out: Option<PathBuf>, args: &EvalArgs) -> Result<()> {
    let meta = RunMeta::start("eval");
    let metrics: Vec<Metric> = match &args.metrics {
        Some(names) => names.iter().map(|n| n.parse()).collect::<moes_core::Result<_>>()?,
        None => cfg.metrics.parse()?,
    };
    let data_root = args.data.clone().unwrap_or_else(|| cfg.data_root());
    let data = open_dataset(&data_root)?;
    let samples = select(cfg, &data, args.subset)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("eval"));

    let mut confusion = None;
    let predictions: Vec<Option<Tensor>> = match &args.maps {
        Some(maps) => samples
            .iter()
            .map(|s| {
                let path = maps.join(format!("{}.pfm", s.id));
                path.is_file().then(|| read_pfm(&path)).transpose()
            })
            .collect::<moes_core::Result<_>>()?,
        None => {
            let mut models = load_checkpoints(&args.checkpoint)?;
            let k = models[0].num_experts();
            let mut counts = vec![vec![0usize; k]; data.num_categories()];
            let mut maps = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(BATCH) {
                let images = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
                let pred = predict_members(&mut models, &images)?;
                for (i, s) in chunk.iter().enumerate() {
                    maps.push(Some(pred.saliency.index_outer(i)));
                    let row = &pred.class_probs.data()[i * k..(i + 1) * k];
                    counts[s.category][argmax(row)] += 1;
                }
            }
            if k > 1 {
                confusion = Some(counts);
            }
            maps
        }
    };
    if predictions.iter().all(Option::is_none) {
        return Err(moes_core::Error::Usage(format!(
            "none of the {} selected samples has a prediction",
            samples.len()
        ))
        .into());
    }
    let inputs: Vec<EvalInput<'_>> = samples
        .iter()
        .zip(predictions)
        .map(|(sample, prediction): (&SaliencySample, _)| EvalInput { sample, prediction })
        .collect();
    let report = evaluate(
        &inputs,
        &data.category_names,
        &metrics,
        cfg.metrics.borji_splits,
        cfg.metrics.seed,
    )?;

    create_dir(&dir)?;
    write(&dir.join("per_sample.csv"), report.per_sample_csv())?;
    write(&dir.join("aggregate.csv"), report.aggregate_csv())?;
    write(&dir.join("flags.csv"), report.flags_csv())?;
    if !report.missing.is_empty() {
        eprintln!("{} samples had no prediction", report.missing.len());
        write(&dir.join("missing.txt"), report.missing.join("\n") + "\n")?;
    }
    print!("{}", report.summary_table());
    if let Some(counts) = confusion {
        let correct: usize = (0..counts.len()).filter(|&c| c < counts[c].len()).map(|c| counts[c][c]).sum();
        let total: usize = counts.iter().flatten().sum();
        println!("gating accuracy: {:.4} ({correct}/{total})", correct as f64 / total.max(1) as f64);
        write(&dir.join("confusion.csv"), confusion_csv(&data.category_names, &counts))?;
    }
    meta.finish(&dir, cfg)
}
