//! Evaluation over a dataset and the CSV report format.

use std::fmt::Write as _;

use super::{Metric, ScoreFlag};
use crate::dataset::SaliencySample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Category label used for the all-samples aggregate.
pub const OVERALL: &str = "all";

/// One sample and its predicted map, if one was found.
pub struct EvalInput<'a> {
    pub sample: &'a SaliencySample,
    /// `[1,h,w]` or `[h,w]`; resized bilinearly to the ground-truth resolution.
    pub prediction: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub category: usize,
    pub metric: Metric,
    pub value: f64,
    pub std_err: Option<f64>,
    pub flag: Option<ScoreFlag>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub category: String,
    pub metric: Metric,
    /// Mean over samples with a finite value; NaN when there are none.
    pub mean: f64,
    pub n: usize,
}

/// Per-sample scores, sorted by sample id then metric, plus the ids of samples
/// that had no prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    pub category_names: Vec<String>,
    pub rows: Vec<MetricRow>,
    pub missing: Vec<String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed for a sample's AUC-Borji splits; depends on the id, not the position,
/// so reordering samples does not change any score.
pub fn sample_seed(seed: u64, sample_id: &str) -> u64 {
    fnv1a(format!("{seed}/{sample_id}").as_bytes())
}

fn resize_to(pred: &Tensor, h: usize, w: usize) -> Result<Vec<f64>> {
    let s = pred.shape();
    let (ph, pw) = (s[s.len() - 2], s[s.len() - 1]);
    if pred.numel() != ph * pw {
        return Err(Error::usage(format!("prediction must be a single map, got shape {s:?}")));
    }
    if (ph, pw) == (h, w) {
        Ok(pred.data().to_vec())
    } else {
        Ok(pred.upsample_bilinear(h, w)?.into_data())
    }
}

/// Scores every sample with a prediction on every requested metric.
pub fn evaluate(
    inputs: &[EvalInput<'_>],
    category_names: &[String],
    metrics: &[Metric],
    borji_splits: usize,
    seed: u64,
) -> Result<MetricReport> {
    if metrics.is_empty() {
        return Err(Error::usage(format!("no metrics requested; valid metrics: {}", Metric::valid_names())));
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for input in inputs {
        let s = input.sample;
        if s.category >= category_names.len() {
            return Err(Error::usage(format!("sample {} has unknown category {}", s.id, s.category)));
        }
        let Some(pred) = &input.prediction else {
            missing.push(s.id.clone());
            continue;
        };
        let dims = s.density.shape();
        let pred = resize_to(pred, dims[1], dims[2])?;
        for &m in metrics {
            let score = m.score(
                &pred,
                s.density.data(),
                s.fixations.data(),
                borji_splits,
                sample_seed(seed, &s.id),
            )?;
            rows.push(MetricRow {
                sample_id: s.id.clone(),
                category: s.category,
                metric: m,
                value: score.value,
                std_err: score.std_err,
                flag: score.flag,
            });
        }
    }
    let order = |m: Metric| metrics.iter().position(|&x| x == m).unwrap();
    rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id).then(order(a.metric).cmp(&order(b.metric))));
    missing.sort();
    Ok(MetricReport {
        metrics: metrics.to_vec(),
        category_names: category_names.to_vec(),
        rows,
        missing,
    })
}

impl MetricReport {
    /// Mean of finite per-sample values of `metric`, restricted to `category`
    /// when given. The overall mean is over samples, not over category means.
    pub fn mean(&self, metric: Metric, category: Option<usize>) -> (f64, usize) {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.metric == metric && category.is_none_or(|c| r.category == c) && r.value.is_finite())
            .map(|r| r.value)
            .collect();
        if vals.is_empty() {
            return (f64::NAN, 0);
        }
        (vals.iter().sum::<f64>() / vals.len() as f64, vals.len())
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut out = Vec::new();
        let groups = (0..self.category_names.len()).map(Some).chain([None]);
        for c in groups {
            let name = c.map_or(OVERALL.to_string(), |c| self.category_names[c].clone());
            for &m in &self.metrics {
                let (mean, n) = self.mean(m, c);
                if c.is_some() && n == 0 {
                    continue;
                }
                out.push(Aggregate {
                    category: name.clone(),
                    metric: m,
                    mean,
                    n,
                });
            }
        }
        out
    }

    /// `sample_id,category,metric,value,std_err`; `std_err` is empty for
    /// metrics without sampling.
    pub fn per_sample_csv(&self) -> String {
        let mut s = String::from("sample_id,category,metric,value,std_err\n");
        for r in &self.rows {
            let se = r.std_err.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{se}", r.sample_id, self.category_names[r.category], r.metric, r.value);
        }
        s
    }

    /// `category,metric,mean,n`
    pub fn aggregate_csv(&self) -> String {
        let mut s = String::from("category,metric,mean,n\n");
        for a in self.aggregates() {
            let _ = writeln!(s, "{},{},{},{}", a.category, a.metric, a.mean, a.n);
        }
        s
    }

    /// Samples whose score carries a flag, as `sample_id,metric,flag` lines.
    pub fn flags_csv(&self) -> String {
        let mut s = String::from("sample_id,metric,flag\n");
        for r in self.rows.iter().filter(|r| r.flag.is_some()) {
            let _ = writeln!(s, "{},{},{}", r.sample_id, r.metric, r.flag.unwrap().as_str());
        }
        s
    }

    /// Human-readable table of means, one line per category plus the overall line.
    pub fn summary_table(&self) -> String {
        let mut s = format!("{:<12}", "category");
        for m in &self.metrics {
            let _ = write!(s, " {:>10}", m.name());
        }
        s.push_str(&format!(" {:>5}\n", "n"));
        let groups = (0..self.category_names.len()).map(Some).chain([None]);
        for c in groups {
            let name = c.map_or(OVERALL.to_string(), |c| self.category_names[c].clone());
            let mut n = 0;
            let mut line = format!("{name:<12}");
            for &m in &self.metrics {
                let (mean, k) = self.mean(m, c);
                n = n.max(k);
                let _ = write!(line, " {mean:>10.4}");
            }
            if c.is_some() && n == 0 {
                continue;
            }
            let _ = writeln!(s, "{line} {n:>5}");
        }
        if !self.missing.is_empty() {
            let _ = writeln!(s, "missing predictions: {}", self.missing.len());
        }
        s
    }
}
