use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{Dataset, DatasetSpec};

// ---- independent oracles ----------------------------------------------------

/// Threshold sweep over every distinct value (plus one above the maximum),
/// counting positives and negatives at or above each threshold from scratch.
fn sweep_oracle(pos: &[f64], neg: &[f64]) -> u128 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![(0u128, 0u128)];
    for t in thresholds {
        let tp = pos.iter().filter(|&&v| v >= t).count() as u128;
        let fp = neg.iter().filter(|&&v| v >= t).count() as u128;
        points.push((tp, fp));
    }
    points.windows(2).map(|w| (w[1].1 - w[0].1) * (w[0].0 + w[1].0)).sum()
}

/// Pairwise comparison count: 2 per correctly ordered pair, 1 per tie.
fn mann_whitney_oracle(pos: &[f64], neg: &[f64]) -> u128 {
    let mut s = 0u128;
    for p in pos {
        for n in neg {
            s += if p > n { 2 } else if p == n { 1 } else { 0 };
        }
    }
    s
}

/// Judd curve from scratch: thresholds at the distinct fixated values.
fn judd_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![(0u128, 0u128)];
    for t in thresholds {
        let tp = pos.iter().filter(|&&v| v >= t).count() as u128;
        let fp = neg.iter().filter(|&&v| v >= t).count() as u128;
        points.push((tp, fp));
    }
    points.push((pos.len() as u128, neg.len() as u128));
    let num: u128 = points.windows(2).map(|w| (w[1].1 - w[0].1) * (w[0].0 + w[1].0)).sum();
    num as f64 / (2 * pos.len() * neg.len()) as f64
}

/// Floating-point textbook trapezoid over (FPR, TPR) points.
fn judd_float(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let tpr = pos.iter().filter(|&&v| v >= t).count() as f64 / pos.len() as f64;
        let fpr = neg.iter().filter(|&&v| v >= t).count() as f64 / neg.len() as f64;
        pts.push((fpr, tpr));
    }
    pts.push((1.0, 1.0));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

fn borji_oracle(pos: &[f64], neg: &[f64], splits: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let areas: Vec<f64> = (0..splits)
        .map(|_| {
            let sampled = borji_negatives(neg, pos.len(), &mut rng);
            let num = sweep_oracle(pos, &sampled);
            assert_eq!(num, mann_whitney_oracle(pos, &sampled));
            num as f64 / (2 * pos.len() * sampled.len()) as f64
        })
        .collect();
    areas.iter().sum::<f64>() / splits as f64
}

fn split(pred: &[f64], fix: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pos = pred.iter().zip(fix).filter(|(_, &f)| f > 0.0).map(|(&p, _)| p).collect();
    let neg = pred.iter().zip(fix).filter(|(_, &f)| f == 0.0).map(|(&p, _)| p).collect();
    (pos, neg)
}

fn check_aucs_against_oracles(pred: &[f64], fix: &[f64], seed: u64) {
    let (pos, neg) = split(pred, fix);
    let judd = auc_judd(pred, fix).unwrap();
    let borji = auc_borji(pred, fix, 7, seed).unwrap();
    if neg.is_empty() {
        assert!(judd.value.is_nan() && judd.flag == Some(ScoreFlag::AllFixated));
        assert!(borji.value.is_nan() && borji.flag == Some(ScoreFlag::AllFixated));
        return;
    }
    assert_eq!(judd.value, judd_oracle(&pos, &neg), "pred {pred:?} fix {fix:?}");
    assert!((judd.value - judd_float(&pos, &neg)).abs() <= 1e-12);
    assert_eq!(borji.value, borji_oracle(&pos, &neg, 7, seed), "pred {pred:?} fix {fix:?}");
    assert_eq!(roc_numerator(&pos, &neg), sweep_oracle(&pos, &neg));
    assert_eq!(roc_numerator(&pos, &neg), mann_whitney_oracle(&pos, &neg));
}

// ---- AUC ----------------------------------------------------------------------

#[test]
fn exhaustive_two_by_two_maps_match_the_oracles() {
    for code in 0..81u32 {
        let pred: Vec<f64> = (0..4).map(|i| ((code / 3u32.pow(i)) % 3) as f64).collect();
        for mask in 1..16u32 {
            let fix: Vec<f64> = (0..4).map(|i| ((mask >> i) & 1) as f64).collect();
            check_aucs_against_oracles(&pred, &fix, code as u64 * 16 + mask as u64);
        }
    }
}

proptest! {
    #[test]
    fn integer_maps_up_to_four_by_four_match_the_oracles(
        h in 1usize..=4,
        w in 1usize..=4,
        values in proptest::collection::vec(0u8..6, 16),
        mask in proptest::collection::vec(any::<bool>(), 16),
        seed in any::<u64>(),
    ) {
        let n = h * w;
        let pred: Vec<f64> = values[..n].iter().map(|&v| v as f64).collect();
        let mut fix: Vec<f64> = mask[..n].iter().map(|&b| b as u8 as f64).collect();
        if fix.iter().all(|&f| f == 0.0) {
            fix[0] = 1.0;
        }
        check_aucs_against_oracles(&pred, &fix, seed);
    }
}

#[test]
fn three_by_three_known_ordering() {
    let pred = [9.0, 8.0, 1.0, 7.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let fix = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    // positives 9 and 2; 9 beats all 7 negatives, 2 beats only the 1
    let judd = auc_judd(&pred, &fix).unwrap().value;
    // thresholds 9 -> (1/2, 0), 2 -> (1, 6/7); then (1, 1)
    let want = 0.5 * (6.0 / 7.0) * (0.5 + 1.0) + (1.0 / 7.0) * 1.0;
    assert!((judd - want).abs() <= 1e-15);
    let (pos, neg) = split(&pred, &fix);
    assert_eq!(mann_whitney_oracle(&pos, &neg), 2 * 8);
}

#[test]
fn perfect_ranking_scores_one() {
    let pred = [0.9, 0.1, 0.2, 0.8];
    let fix = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(auc_judd(&pred, &fix).unwrap().value, 1.0);
    let b = auc_borji(&pred, &fix, DEFAULT_BORJI_SPLITS, 3).unwrap();
    assert_eq!(b.value, 1.0);
    assert_eq!(b.std_err, Some(0.0));
}

#[test]
fn constant_map_auc_is_one_half() {
    let pred = [0.3; 9];
    let fix = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    assert_eq!(auc_judd(&pred, &fix).unwrap().value, 0.5);
    assert_eq!(auc_borji(&pred, &fix, DEFAULT_BORJI_SPLITS, 1).unwrap().value, 0.5);
}

#[test]
fn missing_fixations_are_a_usage_error() {
    assert!(auc_judd(&[1.0, 2.0], &[0.0, 0.0]).is_err());
    assert!(nss(&[1.0, 2.0], &[0.0, 0.0]).is_err());
    assert!(auc_borji(&[1.0, 2.0], &[1.0, 0.0], 0, 0).is_err());
}

// ---- NSS / CC / KLD / SIM -------------------------------------------------------

#[test]
fn nss_hand_values() {
    let pred = [0.0, 1.0, 0.0, 0.0];
    let s = nss(&pred, &pred).unwrap();
    let want = (1.0 - 0.25) / (3.0f64 / 16.0).sqrt();
    assert!((s.value - want).abs() <= 1e-12);
    assert!((s.value - 1.73205).abs() <= 1e-5);

    let c = nss(&[0.4; 4], &pred).unwrap();
    assert_eq!((c.value, c.flag), (0.0, Some(ScoreFlag::ConstantMap)));

    let all = nss(&[0.1, 0.7, 0.3, 0.2], &[1.0; 4]).unwrap();
    assert!(all.value.abs() <= 1e-12);
}

#[test]
fn cc_hand_values() {
    let m = [1.0, 2.0, 3.0, 4.0];
    assert!((cc(&m, &m).unwrap().value - 1.0).abs() <= 1e-12);
    let neg: Vec<f64> = m.iter().map(|v| 10.0 - v).collect();
    assert!((cc(&m, &neg).unwrap().value + 1.0).abs() <= 1e-12);
    assert!((cc(&m, &[1.0, 3.0, 2.0, 4.0]).unwrap().value - 0.8).abs() <= 1e-12);
    assert_eq!(cc(&m, &[2.0; 4]).unwrap().flag, Some(ScoreFlag::ConstantMap));
}

#[test]
fn kld_hand_values() {
    let m = [0.2, 0.5, 0.1, 0.9];
    assert!(kld(&m, &m).unwrap().value.abs() <= 1e-12);

    let (p, q) = ([0.5, 0.5], [1.0, 0.0]);
    let e: f64 = 1e-7;
    // q = [1+e, e] / (1+2e) against the uniform p
    let q0 = (1.0 + e) / (1.0 + 2.0 * e);
    let q1 = e / (1.0 + 2.0 * e);
    let want = q0 * (q0 / 0.5).ln() + q1 * (q1 / 0.5).ln();
    let got = kld(&p, &q).unwrap().value;
    assert!((got - want).abs() <= 1e-12);
    assert!((got - 2f64.ln()).abs() <= 1e-5);

    let reverse = kld(&q, &p).unwrap().value;
    let want_rev = 0.5 * (0.5 / q0).ln() + 0.5 * (0.5 / q1).ln();
    assert!((reverse - want_rev).abs() <= 1e-9);
    assert!((reverse - got).abs() > 1.0);
}

#[test]
fn sim_hand_values() {
    let m = [0.2, 0.5, 0.1, 0.9];
    assert!((sim(&m, &m).unwrap().value - 1.0).abs() <= 1e-12);
    assert!(sim(&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 1.0]).unwrap().value <= 1e-6);
    assert!((sim(&[0.5, 0.5], &[1.0, 0.0]).unwrap().value - 0.5).abs() <= 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn shift_and_scale_invariance(
        pred in proptest::collection::vec(0.0f64..1.0, 12),
        density in proptest::collection::vec(0.0f64..1.0, 12),
        fix_mask in proptest::collection::vec(any::<bool>(), 12),
        shift in -5.0f64..5.0,
        scale in 0.1f64..10.0,
    ) {
        let spread = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread(&pred) > 0.05 && spread(&density) > 0.05);
        let mut fix: Vec<f64> = fix_mask.iter().map(|&b| b as u8 as f64).collect();
        fix[0] = 1.0;
        fix[11] = 0.0;
        let shifted: Vec<f64> = pred.iter().map(|v| v + shift).collect();
        let scaled: Vec<f64> = pred.iter().map(|v| v * scale).collect();
        for variant in [&shifted, &scaled] {
            prop_assert!((nss(variant, &fix).unwrap().value - nss(&pred, &fix).unwrap().value).abs() <= 1e-9);
            prop_assert!((cc(variant, &density).unwrap().value - cc(&pred, &density).unwrap().value).abs() <= 1e-9);
        }
        // the distribution metrics subtract the minimum first, so only shifts are free
        prop_assert!((kld(&shifted, &density).unwrap().value - kld(&pred, &density).unwrap().value).abs() <= 1e-6);
        prop_assert!((sim(&shifted, &density).unwrap().value - sim(&pred, &density).unwrap().value).abs() <= 1e-6);
        // the rankings are unchanged, so both AUCs are exactly equal when the
        // transformed values keep every order relation
        let order_kept = |v: &[f64]| {
            (0..12).all(|i| (0..12).all(|j| (pred[i] < pred[j]) == (v[i] < v[j]) && (pred[i] == pred[j]) == (v[i] == v[j])))
        };
        for variant in [&shifted, &scaled] {
            if order_kept(variant) {
                prop_assert_eq!(auc_judd(variant, &fix).unwrap().value, auc_judd(&pred, &fix).unwrap().value);
                prop_assert_eq!(auc_borji(variant, &fix, 5, 9).unwrap().value, auc_borji(&pred, &fix, 5, 9).unwrap().value);
            }
        }
    }

    #[test]
    fn kld_nonnegative_and_sim_bounded(
        pred in proptest::collection::vec(-1.0f64..1.0, 9),
        density in proptest::collection::vec(0.0f64..1.0, 9),
    ) {
        prop_assert!(kld(&pred, &density).unwrap().value >= 0.0);
        let s = sim(&pred, &density).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&s));
        let r = cc(&pred, &density).unwrap().value;
        prop_assert!((-1.0..=1.0).contains(&r));
    }
}

// ---- reports -------------------------------------------------------------------

fn small_dataset() -> Dataset {
    Dataset::generate(&DatasetSpec {
        samples_per_category: 3,
        seed: 5,
        ..DatasetSpec::default()
    })
    .unwrap()
}

#[test]
fn self_evaluation_is_perfect() {
    let data = small_dataset();
    let inputs: Vec<EvalInput> = data
        .samples
        .iter()
        .map(|s| EvalInput {
            sample: s,
            prediction: Some(s.density.clone()),
        })
        .collect();
    let r = evaluate(&inputs, &data.category_names, &[Metric::Cc, Metric::Kld, Metric::Sim], 10, 0).unwrap();
    for row in &r.rows {
        match row.metric {
            Metric::Cc | Metric::Sim => assert!((row.value - 1.0).abs() <= 1e-12),
            Metric::Kld => assert!(row.value.abs() <= 1e-12),
            _ => unreachable!(),
        }
    }
    assert_eq!(r.rows.len(), data.len() * 3);
}

#[test]
fn reports_are_permutation_invariant_and_count_missing() {
    let data = small_dataset();
    let pred = |s: &crate::dataset::SaliencySample| s.image.map(|v| (v - 0.5).abs());
    let mut inputs: Vec<EvalInput> = data
        .samples
        .iter()
        .map(|s| EvalInput {
            sample: s,
            prediction: Some(pred(s)),
        })
        .collect();
    inputs[4].prediction = None;
    let all = Metric::ALL.to_vec();
    let a = evaluate(&inputs, &data.category_names, &all, 20, 7).unwrap();
    inputs.reverse();
    let b = evaluate(&inputs, &data.category_names, &all, 20, 7).unwrap();
    assert_eq!(a.per_sample_csv(), b.per_sample_csv());
    assert_eq!(a.aggregate_csv(), b.aggregate_csv());
    assert_eq!(a.missing, vec![data.samples[4].id.clone()]);
    let (_, n) = a.mean(Metric::Nss, None);
    assert_eq!(n, data.len() - 1);

    // overall mean is the mean over samples
    let vals: Vec<f64> = a.rows.iter().filter(|r| r.metric == Metric::Cc).map(|r| r.value).collect();
    let (m, _) = a.mean(Metric::Cc, None);
    assert!((m - vals.iter().sum::<f64>() / vals.len() as f64).abs() <= 1e-15);
    assert!(a.aggregate_csv().starts_with("category,metric,mean,n\n"));
    assert!(a.per_sample_csv().starts_with("sample_id,category,metric,value,std_err\n"));
}

#[test]
fn single_sample_category_mean_equals_the_sample() {
    let data = small_dataset();
    let s = &data.samples[0];
    let inputs = [EvalInput {
        sample: s,
        prediction: Some(s.image.clone()),
    }];
    let r = evaluate(&inputs, &data.category_names, &[Metric::Nss], 10, 0).unwrap();
    assert_eq!(r.mean(Metric::Nss, Some(s.category)), (r.rows[0].value, 1));
}

#[test]
fn low_resolution_predictions_are_upsampled() {
    let data = small_dataset();
    let s = &data.samples[0];
    let low = s.density.avg_pool(4).unwrap();
    let up = low.upsample_bilinear(32, 32).unwrap();
    let inputs = [EvalInput {
        sample: s,
        prediction: Some(low),
    }];
    let r = evaluate(&inputs, &data.category_names, &[Metric::Cc], 10, 0).unwrap();
    assert_eq!(r.rows[0].value, cc(up.data(), s.density.data()).unwrap().value);
    assert!(r.rows[0].value > 0.5);
}

#[test]
fn metric_names_parse() {
    assert_eq!("AUC-Borji".parse::<Metric>().unwrap(), Metric::AucBorji);
    let err = "emd".parse::<Metric>().unwrap_err().to_string();
    assert!(err.contains("nss") && err.contains("auc_judd"), "{err}");
}
