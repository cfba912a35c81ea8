//! Per-map saliency scores following the MIT benchmark conventions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Added to every pixel before KLD/SIM normalization.
pub const DISTRIBUTION_EPSILON: f64 = 1e-7;
pub const DEFAULT_BORJI_SPLITS: usize = 100;

/// Why a score is degenerate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFlag {
    /// A map had zero variance; the score is defined as 0.
    ConstantMap,
    /// Every pixel is fixated, so there are no negatives; the score is NaN.
    AllFixated,
}

impl ScoreFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreFlag::ConstantMap => "constant_map",
            ScoreFlag::AllFixated => "all_fixated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    /// Standard error across random splits, for sampled metrics.
    pub std_err: Option<f64>,
    pub flag: Option<ScoreFlag>,
}

impl Score {
    fn plain(value: f64) -> Self {
        Self {
            value,
            std_err: None,
            flag: None,
        }
    }

    fn flagged(value: f64, flag: ScoreFlag) -> Self {
        Self {
            value,
            std_err: None,
            flag: Some(flag),
        }
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::usage(format!(
            "maps must be nonempty and equally sized, got {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn fixation_split(pred: &[f64], fix: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    same_len(pred, fix)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (&p, &f) in pred.iter().zip(fix) {
        if f > 0.0 {
            pos.push(p);
        } else {
            neg.push(p);
        }
    }
    if pos.is_empty() {
        return Err(Error::usage("fixation map has no fixated pixel"));
    }
    Ok((pos, neg))
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Normalized scanpath saliency: mean of the standardized prediction (population
/// standard deviation) at fixated pixels.
pub fn nss(pred: &[f64], fix: &[f64]) -> Result<Score> {
    let (pos, _) = fixation_split(pred, fix)?;
    let (mean, std) = mean_std(pred);
    if is_constant(pred) || std == 0.0 {
        return Ok(Score::flagged(0.0, ScoreFlag::ConstantMap));
    }
    let total: f64 = pos.iter().map(|p| (p - mean) / std).sum();
    Ok(Score::plain(total / pos.len() as f64))
}

/// Pearson correlation between prediction and ground-truth density.
pub fn cc(pred: &[f64], density: &[f64]) -> Result<Score> {
    same_len(pred, density)?;
    let (mp, sp) = mean_std(pred);
    let (md, sd) = mean_std(density);
    if is_constant(pred) || is_constant(density) || sp == 0.0 || sd == 0.0 {
        return Ok(Score::flagged(0.0, ScoreFlag::ConstantMap));
    }
    let cov = pred.iter().zip(density).map(|(p, d)| (p - mp) * (d - md)).sum::<f64>() / pred.len() as f64;
    Ok(Score::plain((cov / (sp * sd)).clamp(-1.0, 1.0)))
}

/// Shifts a map so its minimum is 0, adds the epsilon to every pixel and
/// normalizes to sum 1.
pub fn to_distribution(map: &[f64]) -> Vec<f64> {
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = map.iter().map(|v| v - min + DISTRIBUTION_EPSILON).collect();
    let total: f64 = shifted.iter().sum();
    shifted.into_iter().map(|v| v / total).collect()
}

/// `sum q log(q/p)` with `q` the ground-truth and `p` the predicted distribution.
pub fn kld(pred: &[f64], density: &[f64]) -> Result<Score> {
    same_len(pred, density)?;
    let p = to_distribution(pred);
    let q = to_distribution(density);
    let d: f64 = q.iter().zip(&p).map(|(qi, pi)| qi * (qi / pi).ln()).sum();
    Ok(Score::plain(d.max(0.0)))
}

/// Histogram intersection of the two distributions.
pub fn sim(pred: &[f64], density: &[f64]) -> Result<Score> {
    same_len(pred, density)?;
    let p = to_distribution(pred);
    let q = to_distribution(density);
    Ok(Score::plain(p.iter().zip(&q).map(|(a, b)| a.min(*b)).sum::<f64>().min(1.0)))
}

/// Integer numerator of the ROC area over every distinct threshold, scaled by
/// `2 * |pos| * |neg|`. Equal to twice the Mann-Whitney U statistic with ties
/// counted half.
pub fn roc_numerator(pos: &[f64], neg: &[f64]) -> u128 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut area = 0u128;
    let mut i = 0;
    while i < all.len() {
        // one threshold per distinct value, descending
        let (prev_tp, prev_fp) = (tp, fp);
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - prev_fp) * (tp + prev_tp);
    }
    area
}

fn area(num: u128, p: usize, n: usize) -> f64 {
    num as f64 / (2 * p * n) as f64
}

/// AUC with thresholds at the fixated values; false positives counted over
/// every non-fixated pixel at or above the threshold. The curve runs from
/// (0,0) to (1,1).
pub fn auc_judd(pred: &[f64], fix: &[f64]) -> Result<Score> {
    let (mut pos, neg) = fixation_split(pred, fix)?;
    if neg.is_empty() {
        return Ok(Score::flagged(f64::NAN, ScoreFlag::AllFixated));
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let mut neg = neg;
    neg.sort_by(|a, b| b.total_cmp(a));
    let (p, n) = (pos.len(), neg.len());
    let (mut prev_tp, mut prev_fp) = (0u128, 0u128);
    let mut num = 0u128;
    let (mut i, mut j) = (0, 0);
    while i < p {
        let t = pos[i];
        while i < p && pos[i] >= t {
            i += 1;
        }
        while j < n && neg[j] >= t {
            j += 1;
        }
        let (tp, fp) = (i as u128, j as u128);
        num += (fp - prev_fp) * (tp + prev_tp);
        (prev_tp, prev_fp) = (tp, fp);
    }
    num += (n as u128 - prev_fp) * (p as u128 + prev_tp);
    Ok(Score::plain(area(num, p, n)))
}

/// Negatives for one AUC-Borji split: `count` non-fixated values drawn
/// uniformly with replacement.
pub fn borji_negatives(neg: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..count).map(|_| neg[rng.random_range(0..neg.len())]).collect()
}

/// AUC-Borji: mean ROC area over `n_splits` random negative sets, with the
/// standard error of that mean.
pub fn auc_borji(pred: &[f64], fix: &[f64], n_splits: usize, seed: u64) -> Result<Score> {
    if n_splits == 0 {
        return Err(Error::config("auc_borji needs at least one split"));
    }
    let (pos, neg) = fixation_split(pred, fix)?;
    if neg.is_empty() {
        return Ok(Score::flagged(f64::NAN, ScoreFlag::AllFixated));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let areas: Vec<f64> = (0..n_splits)
        .map(|_| {
            let sampled = borji_negatives(&neg, pos.len(), &mut rng);
            area(roc_numerator(&pos, &sampled), pos.len(), sampled.len())
        })
        .collect();
    let mean = areas.iter().sum::<f64>() / n_splits as f64;
    let std_err = if n_splits > 1 {
        let var = areas.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n_splits - 1) as f64;
        (var / n_splits as f64).sqrt()
    } else {
        0.0
    };
    Ok(Score {
        value: mean,
        std_err: Some(std_err),
        flag: None,
    })
}
